"""Few-shot retinal OCT classification: augmentation, GAN expansion, balancing, attention CNNs, metrics."""
__version__ = "0.1.0"
