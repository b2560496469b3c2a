from .networks import AdaLIN, Discriminator, Generator, ILN, PRESETS, clamp_rho, rho_values
from .ops import CamOutput, adalin, cam_attention, instance_norm, layer_norm
from .trainer import (NonFiniteLossError, TranslationCheckpoint, TranslationConfig, TranslationState, generate,
                      load_checkpoint, load_domain, save_checkpoint, train, training_step)

__all__ = ["AdaLIN", "Discriminator", "Generator", "ILN", "PRESETS", "clamp_rho", "rho_values", "CamOutput",
           "adalin", "cam_attention", "instance_norm", "layer_norm", "NonFiniteLossError", "TranslationCheckpoint",
           "TranslationConfig", "TranslationState", "generate", "load_checkpoint", "load_domain", "save_checkpoint", "train",
           "training_step"]
