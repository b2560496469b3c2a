"""Training, checkpointing and sampling for per-class normal -> pathology translation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..dataset import ClassLabel, DatasetManifest, ImageRecord, Provenance, load_image, save_image
from ..tensorstore import load_tensors, numpy_to_state_dict, save_tensors, state_dict_to_numpy
from .networks import PRESETS, Discriminator, Generator, clamp_rho

log = logging.getLogger(__name__)

DEFAULT_LOSS_WEIGHTS = {"adversarial": 1.0, "cycle": 10.0, "identity": 10.0, "cam": 1000.0}
DISCRIMINATORS = ("GA", "GB", "LA", "LB")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, iteration: int, value: float):
        super().__init__(f"non-finite {component} loss ({value}) at iteration {iteration}")
        self.component = component
        self.iteration = iteration


@dataclass(frozen=True)
class TranslationConfig:
    image_size: int = 32
    channels: int = 1
    iterations: int = 200
    batch_size: int = 1
    learning_rate: float = 1e-4
    loss_weights: dict = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))
    seed: int = 0
    preset: str = "light"
    spectral_norm: bool = True
    weight_decay: float = 1e-4
    betas: tuple = (0.5, 0.999)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.image_size % 4 != 0 or self.image_size < 16:
            raise ValueError(f"image_size must be a multiple of 4 and >= 16, got {self.image_size}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        # the global discriminator downsamples 2**(layers - 2) times and needs >= 4 pixels left
        min_size = 4 * 2 ** (PRESETS[self.preset]["global_layers"] - 2)
        if self.image_size < min_size:
            raise ValueError(f"image_size {self.image_size} is below the {self.preset!r} preset minimum {min_size}")
        weights = {**DEFAULT_LOSS_WEIGHTS, **dict(self.loss_weights)}
        if any(v < 0 for v in weights.values()):
            raise ValueError("loss weights must be nonnegative")
        object.__setattr__(self, "loss_weights", weights)
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d) -> "TranslationConfig":
        return cls(**d)

    @classmethod
    def paper(cls, **overrides) -> "TranslationConfig":
        """Full-scale settings: 256 px, 200,000 iterations, full-width networks."""
        base = dict(image_size=256, channels=3, iterations=200_000, batch_size=1, preset="paper")
        base.update(overrides)
        return cls(**base)


def build_networks(cfg: TranslationConfig) -> dict[str, torch.nn.Module]:
    p = PRESETS[cfg.preset]
    c = cfg.channels
    nets = {
        "generator_AB": Generator(c, c, p["ngf"], p["n_res"]),
        "generator_BA": Generator(c, c, p["ngf"], p["n_res"]),
        "disc_GA": Discriminator(c, p["ndf"], p["global_layers"], cfg.spectral_norm),
        "disc_GB": Discriminator(c, p["ndf"], p["global_layers"], cfg.spectral_norm),
        "disc_LA": Discriminator(c, p["ndf"], p["local_layers"], cfg.spectral_norm),
        "disc_LB": Discriminator(c, p["ndf"], p["local_layers"], cfg.spectral_norm),
    }
    return nets


@dataclass
class TranslationState:
    config: TranslationConfig
    nets: dict
    g_optim: torch.optim.Optimizer
    d_optim: torch.optim.Optimizer
    iteration: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, cfg: TranslationConfig) -> "TranslationState":
        torch.manual_seed(cfg.seed)
        nets = build_networks(cfg)
        g_params = [*nets["generator_AB"].parameters(), *nets["generator_BA"].parameters()]
        d_params = [q for k in DISCRIMINATORS for q in nets[f"disc_{k}"].parameters()]
        kw = dict(lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)
        return cls(cfg, nets, torch.optim.Adam(g_params, **kw), torch.optim.Adam(d_params, **kw))

    @property
    def generators(self):
        return self.nets["generator_AB"], self.nets["generator_BA"]

    @property
    def discriminators(self):
        return [self.nets[f"disc_{k}"] for k in DISCRIMINATORS]


def _mse_to(x, value: float):
    return F.mse_loss(x, torch.full_like(x, value))


def _bce_to(x, value: float):
    return F.binary_cross_entropy_with_logits(x, torch.full_like(x, value))


def _check_finite(record: dict, iteration: int):
    for k, v in record.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(k, iteration, v)


def training_step(batch_A, batch_B, state: TranslationState):
    """One discriminator update followed by one generator update.

    Returns ``(state, record)``; the record holds unweighted loss components
    (``d_total`` and ``g_total`` are the weighted objectives actually optimised).
    """
    cfg = state.config
    size = cfg.image_size
    for name, b in (("A", batch_A), ("B", batch_B)):
        if b.shape[0] == 0:
            raise ValueError(f"batch {name} is empty")
        if tuple(b.shape[1:]) != (cfg.channels, size, size):
            raise ValueError(f"batch {name} has shape {tuple(b.shape)}, expected (N, {cfg.channels}, {size}, {size})")
    w = cfg.loss_weights
    G_AB, G_BA = state.generators
    disc = {k: state.nets[f"disc_{k}"] for k in DISCRIMINATORS}
    domain = {"GA": "A", "LA": "A", "GB": "B", "LB": "B"}
    it = state.iteration
    rec = {}

    # discriminators
    state.d_optim.zero_grad()
    with torch.no_grad():
        fake_AB = G_AB(batch_A)[0]
        fake_BA = G_BA(batch_B)[0]
    real = {"A": batch_A, "B": batch_B}
    fake = {"A": fake_BA, "B": fake_AB}
    d_adv, d_real, d_fake = 0.0, [], []
    for k, D in disc.items():
        r_logit, r_cam, _ = D(real[domain[k]])
        f_logit, f_cam, _ = D(fake[domain[k]])
        lr_, lf_ = _mse_to(r_logit, 1.0), _mse_to(f_logit, 0.0)
        d_real.append(lr_)
        d_fake.append(lf_)
        d_adv = d_adv + lr_ + lf_ + _mse_to(r_cam, 1.0) + _mse_to(f_cam, 0.0)
    d_total = w["adversarial"] * d_adv
    rec["d_real"] = float(torch.stack(d_real).mean().detach())
    rec["d_fake"] = float(torch.stack(d_fake).mean().detach())
    rec["d_adv"] = float(d_adv.detach())
    rec["d_total"] = float(d_total.detach())
    _check_finite(rec, it)
    d_total.backward()
    state.d_optim.step()

    # generators
    state.g_optim.zero_grad()
    fake_AB, cam_AB, _ = G_AB(batch_A)
    fake_BA, cam_BA, _ = G_BA(batch_B)
    fake_ABA = G_BA(fake_AB)[0]
    fake_BAB = G_AB(fake_BA)[0]
    fake_AA, cam_AA, _ = G_BA(batch_A)
    fake_BB, cam_BB, _ = G_AB(batch_B)
    fake = {"A": fake_BA, "B": fake_AB}
    g_adv = 0.0
    for k, D in disc.items():
        f_logit, f_cam, _ = D(fake[domain[k]])
        g_adv = g_adv + _mse_to(f_logit, 1.0) + _mse_to(f_cam, 1.0)
    cyc_A = F.l1_loss(fake_ABA, batch_A)
    cyc_B = F.l1_loss(fake_BAB, batch_B)
    idt_A = F.l1_loss(fake_AA, batch_A)
    idt_B = F.l1_loss(fake_BB, batch_B)
    cam = _bce_to(cam_BA, 1.0) + _bce_to(cam_AA, 0.0) + _bce_to(cam_AB, 1.0) + _bce_to(cam_BB, 0.0)
    g_total = (w["adversarial"] * g_adv + w["cycle"] * (cyc_A + cyc_B)
               + w["identity"] * (idt_A + idt_B) + w["cam"] * cam)
    g = {"g_adv": g_adv, "g_cycle_A": cyc_A, "g_cycle_B": cyc_B, "g_cycle": cyc_A + cyc_B,
         "g_identity": idt_A + idt_B, "g_cam": cam, "g_total": g_total}
    g = {k: float(v.detach()) for k, v in g.items()}
    _check_finite(g, it)
    rec.update(g)
    g_total.backward()
    state.g_optim.step()
    clamp_rho(G_AB, G_BA)

    state.iteration += 1
    state.history.append(rec)
    return state, rec


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(img.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    arr = ((t.detach().clamp(-1, 1).permute(1, 2, 0).cpu().numpy() + 1.0) * 127.5)
    return np.clip(np.floor(arr + 0.5), 0, 255).astype(np.uint8)


def load_domain(manifest: DatasetManifest, cfg: TranslationConfig) -> torch.Tensor:
    imgs = [image_to_tensor(load_image(r.path, cfg.image_size, cfg.channels)) for r in manifest.records]
    return torch.stack(imgs)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TranslationCheckpoint:
    generator_AB: dict
    generator_BA: dict
    discriminators: dict
    config: TranslationConfig
    iteration: int
    loss_history: list
    target_class: ClassLabel

    def __post_init__(self):
        if len(self.loss_history) != self.iteration:
            raise ValueError("loss_history length must equal iteration")

    @classmethod
    def from_state(cls, state: TranslationState, target_class: ClassLabel) -> "TranslationCheckpoint":
        sd = {k: state_dict_to_numpy(v.state_dict()) for k, v in state.nets.items()}
        return cls(sd["generator_AB"], sd["generator_BA"], {k: sd[f"disc_{k}"] for k in DISCRIMINATORS},
                   state.config, state.iteration, [dict(r) for r in state.history], ClassLabel.parse(target_class))

    def generator(self, direction: str = "AB") -> Generator:
        p = PRESETS[self.config.preset]
        g = Generator(self.config.channels, self.config.channels, p["ngf"], p["n_res"])
        arrays = self.generator_AB if direction == "AB" else self.generator_BA
        g.load_state_dict(numpy_to_state_dict(arrays, g.state_dict()))
        g.eval()
        return g


def save_checkpoint(ckpt: TranslationCheckpoint, directory) -> None:
    directory = Path(directory)
    tensors = {}
    for prefix, sd in (("generator_AB", ckpt.generator_AB), ("generator_BA", ckpt.generator_BA),
                       *((f"disc_{k}", v) for k, v in ckpt.discriminators.items())):
        tensors.update({f"{prefix}.{name}": arr for name, arr in sd.items()})
    header = {"kind": "translation_checkpoint", "config": ckpt.config.to_json(),
              "iteration": ckpt.iteration, "target_class": ckpt.target_class.name}
    save_tensors(directory, tensors, header)
    (directory / "loss_history.json").write_text(json.dumps(ckpt.loss_history) + "\n")


def load_checkpoint(directory) -> TranslationCheckpoint:
    directory = Path(directory)
    header, tensors = load_tensors(directory)
    if header.get("kind") != "translation_checkpoint":
        raise ValueError(f"{directory} is not a translation checkpoint")
    groups: dict[str, dict] = {}
    for name, arr in tensors.items():
        prefix, _, rest = name.partition(".")
        groups.setdefault(prefix, {})[rest] = arr
    history = json.loads((directory / "loss_history.json").read_text())
    return TranslationCheckpoint(groups["generator_AB"], groups["generator_BA"],
                                 {k: groups[f"disc_{k}"] for k in DISCRIMINATORS},
                                 TranslationConfig.from_json(header["config"]), header["iteration"], history,
                                 ClassLabel.parse(header["target_class"]))


# ---------------------------------------------------------------------------
# train / generate
# ---------------------------------------------------------------------------

def train(domain_A: DatasetManifest, domain_B: DatasetManifest, config: TranslationConfig,
          out_dir=None, snapshot_every: int = 0, log_every: int = 0) -> TranslationCheckpoint:
    """Fit one normal -> pathology model; ``domain_B`` must hold a single class."""
    if len(domain_A) == 0 or len(domain_B) == 0:
        raise ValueError("both domains need at least one image")
    classes = {r.label for r in domain_B.records}
    if len(classes) != 1:
        raise ValueError(f"domain B must be single-class, found {sorted(c.name for c in classes)}")
    target = classes.pop()
    data_A = load_domain(domain_A, config)
    data_B = load_domain(domain_B, config)
    state = TranslationState.create(config)
    rng = np.random.default_rng(config.seed)
    for it in range(config.iterations):
        ia = rng.integers(0, len(data_A), config.batch_size)
        ib = rng.integers(0, len(data_B), config.batch_size)
        _, rec = training_step(data_A[ia], data_B[ib], state)
        if log_every and (it + 1) % log_every == 0:
            log.info("%s iter %d: d=%.4f g=%.4f", target.name, it + 1, rec["d_total"], rec["g_total"])
        if out_dir and snapshot_every and (it + 1) % snapshot_every == 0 and it + 1 < config.iterations:
            save_checkpoint(TranslationCheckpoint.from_state(state, target),
                            Path(out_dir) / "snapshots" / f"iter_{it + 1:07d}")
    ckpt = TranslationCheckpoint.from_state(state, target)
    if out_dir:
        save_checkpoint(ckpt, out_dir)
    return ckpt


def generate(checkpoint: TranslationCheckpoint, source: DatasetManifest, n: int, seed: int, img_dir,
             batch_size: int = 32) -> DatasetManifest:
    """Translate ``n`` normal images into the checkpoint's class and write them as PNG."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(source) == 0:
        raise ValueError("generation source manifest is empty")
    cfg = checkpoint.config
    label = checkpoint.target_class
    rng = np.random.default_rng(seed)
    pool = list(source.records)
    idx = rng.choice(len(pool), size=n, replace=n > len(pool))
    G = checkpoint.generator("AB")
    img_dir = Path(img_dir)
    cache: dict[str, torch.Tensor] = {}
    records = []
    for start in range(0, n, batch_size):
        chunk = idx[start:start + batch_size]
        batch = []
        for i in chunk:
            r = pool[i]
            if r.id not in cache:
                cache[r.id] = image_to_tensor(load_image(r.path, cfg.image_size, cfg.channels))
            batch.append(cache[r.id])
        with torch.no_grad():
            out = G(torch.stack(batch))[0]
        for j, i in enumerate(chunk):
            num = start + j
            rid = f"gen:{label.name}:{seed}:{num:06d}"
            path = img_dir / label.name / f"gen_{label.name}_{seed}_{num:06d}.png"
            save_image(path, tensor_to_image(out[j]))
            records.append(ImageRecord(id=rid, path=str(path), label=label, provenance=Provenance.generated,
                                       source_id=pool[i].id, seed=seed))
    return DatasetManifest(tuple(records), created_at=source.created_at, global_seed=source.global_seed,
                           notes=f"generated {n} {label.name} images from checkpoint at iteration {checkpoint.iteration}")
