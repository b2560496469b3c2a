"""Inception-style and toy backbones, fine-tuning, prediction and k-fold cross-validation."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import ATTENTION_TYPES, AttentionConfig, insert_attention
from .dataset import DatasetManifest, NUM_CLASSES, load_image, make_folds, merge_manifests
from .metrics import ConfusionMatrix, MetricReport, confusion, evaluate
from .tensorstore import load_tensors, numpy_to_state_dict, save_tensors, state_dict_to_numpy

log = logging.getLogger(__name__)

VARIANTS = {
    "toy_cnn": {"input_size": 32, "sites": ("stage1", "stage2", "stage3"), "final": ("stage3", "head"),
                "head": "head", "penultimate": "pool"},
    "inception_v3_like": {"input_size": 299, "sites": ("Mixed_5d", "Mixed_6e", "Mixed_7c"),
                          "final": ("Mixed_7c", "fc"), "head": "fc", "penultimate": "avgpool"},
}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class WeightSchemaError(ValueError):
    pass


class ImageLoadError(IOError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "toy_cnn"
    input_size: int | None = None
    num_classes: int = NUM_CLASSES
    pretrained_weights: str | None = None
    freeze_policy: str = "full"
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    trainable_layers: tuple[str, ...] | None = None
    seed: int = 0
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        default = VARIANTS[self.variant]["input_size"]
        if self.input_size is None:
            object.__setattr__(self, "input_size", default)
        elif self.input_size != default:
            raise ValueError(f"{self.variant} expects input_size {default}, got {self.input_size}")
        if self.freeze_policy not in ("final_layers_only", "full"):
            raise ValueError(f"unknown freeze_policy {self.freeze_policy!r}")
        if isinstance(self.attention, dict):
            object.__setattr__(self, "attention", AttentionConfig(**self.attention))
        for name in ("mean", "std"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.trainable_layers is not None:
            object.__setattr__(self, "trainable_layers", tuple(self.trainable_layers))

    @property
    def sites(self) -> tuple[str, ...]:
        return self.attention.sites or VARIANTS[self.variant]["sites"]

    @property
    def final_layers(self) -> tuple[str, ...]:
        return self.trainable_layers or VARIANTS[self.variant]["final"]

    @property
    def penultimate_layer(self) -> str:
        return VARIANTS[self.variant]["penultimate"]

    def to_json(self) -> dict:
        d = asdict(self)
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return d

    @classmethod
    def from_json(cls, d) -> "BackboneConfig":
        d = dict(d)
        if isinstance(d.get("attention"), dict):
            d["attention"] = AttentionConfig(**d["attention"])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# backbones
# ---------------------------------------------------------------------------

class ToyCNN(nn.Module):
    """Three conv stages, global pooling, linear head."""

    def __init__(self, num_classes=NUM_CLASSES, in_ch=3, widths=(16, 32, 64)):
        super().__init__()
        chans = (in_ch, *widths)
        for i in range(3):
            setattr(self, f"stage{i + 1}", nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 3, padding=1, bias=False),
                nn.BatchNorm2d(chans[i + 1]), nn.ReLU(inplace=True), nn.MaxPool2d(2)))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(widths[-1], num_classes)
        self.input_size = 32

    def forward(self, x):
        x = self.stage3(self.stage2(self.stage1(x)))
        return self.head(torch.flatten(self.pool(x), 1))


def _inception(num_classes):
    from torchvision.models.inception import Inception3

    class InceptionV3Like(Inception3):
        def __init__(self):
            super().__init__(num_classes=num_classes, aux_logits=False, transform_input=False, init_weights=True)
            self.input_size = 299

    return InceptionV3Like()


def _base_model(cfg: BackboneConfig) -> nn.Module:
    if cfg.variant == "toy_cnn":
        return ToyCNN(cfg.num_classes)
    return _inception(cfg.num_classes)


def _is_head(name: str, cfg: BackboneConfig) -> bool:
    head = VARIANTS[cfg.variant]["head"]
    return name == head or name.startswith(head + ".")


def load_pretrained(model: nn.Module, path, cfg: BackboneConfig) -> None:
    """Copy every non-head tensor from a tensor-store directory into ``model``."""
    _, arrays = load_tensors(path)
    state = model.state_dict()
    trunk = {k for k in state if not _is_head(k, cfg)}
    given = {k for k in arrays if not _is_head(k, cfg)}
    missing, extra = sorted(trunk - given), sorted(given - trunk)
    bad_shape = sorted(k for k in trunk & given if tuple(arrays[k].shape) != tuple(state[k].shape))
    if missing or extra or bad_shape:
        raise WeightSchemaError(f"pretrained weights do not match {cfg.variant}: missing={missing} "
                                f"extra={extra} shape_mismatch={bad_shape}")
    model.load_state_dict(numpy_to_state_dict({k: arrays[k] for k in trunk}, state), strict=False)


def build_model(cfg: BackboneConfig) -> nn.Module:
    torch.manual_seed(cfg.seed)
    model = _base_model(cfg)
    if cfg.pretrained_weights:
        load_pretrained(model, cfg.pretrained_weights, cfg)
    if cfg.attention.variant != "none":
        insert_attention(model, cfg.attention.variant, cfg.sites, cfg.attention.block_config(),
                         input_size=cfg.input_size)
    model.backbone_config = cfg
    return model


def trainable_names(model: nn.Module, cfg: BackboneConfig, policy: str | None = None) -> set[str]:
    policy = policy or cfg.freeze_policy
    names = {n for n, _ in model.named_parameters()}
    if policy == "full":
        return names
    keep = set()
    attn_prefixes = [n for n, m in model.named_modules() if isinstance(m, ATTENTION_TYPES)]
    for n in names:
        for p in (*cfg.final_layers, *attn_prefixes):
            if n == p or n.startswith(p + "."):
                keep.add(n)
    return keep


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

class ImageStore:
    """Decodes manifest images at a fixed size, caching uint8 arrays by path."""

    def __init__(self, size: int, mean=IMAGENET_MEAN, std=IMAGENET_STD, cache: bool = True):
        self.size = size
        self.mean = torch.tensor(mean, dtype=torch.float32)[:, None, None]
        self.std = torch.tensor(std, dtype=torch.float32)[:, None, None]
        self.cache = cache
        self._arrays: dict[str, np.ndarray] = {}

    @classmethod
    def for_config(cls, cfg: BackboneConfig, cache: bool = True) -> "ImageStore":
        return cls(cfg.input_size, cfg.mean, cfg.std, cache)

    def array(self, record) -> np.ndarray:
        arr = self._arrays.get(record.path)
        if arr is None:
            try:
                arr = load_image(record.path, self.size, 3)
            except Exception as exc:
                raise ImageLoadError(f"cannot read image for record {record.id!r}: {exc}") from exc
            if self.cache:
                self._arrays[record.path] = arr
        return arr

    def batch(self, records) -> torch.Tensor:
        x = torch.from_numpy(np.stack([self.array(r) for r in records])).permute(0, 3, 1, 2).float() / 255.0
        return (x - self.mean) / self.std


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainedModel:
    model: nn.Module
    backbone_config: BackboneConfig
    train_config: TrainConfig
    log: list = field(default_factory=list)


def _freeze_bn(model, trainable: set[str]):
    for name, m in model.named_modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            own = [f"{name}.{p}" for p, _ in m.named_parameters(recurse=False)]
            if own and not any(p in trainable for p in own):
                m.eval()


def fine_tune(model: nn.Module, train_manifest: DatasetManifest, val_manifest: DatasetManifest | None,
              cfg: TrainConfig, freeze_policy: str | None = None, store: ImageStore | None = None) -> TrainedModel:
    """Cross-entropy training of the unfrozen parameters.

    With a validation manifest the best-validation-accuracy weights are kept;
    otherwise the final epoch's weights are returned.
    """
    bcfg: BackboneConfig = model.backbone_config
    store = store or ImageStore.for_config(bcfg)
    records = list(train_manifest.records)
    if not records:
        raise ValueError("training manifest is empty")
    trainable = trainable_names(model, bcfg, freeze_policy)
    for n, p in model.named_parameters():
        p.requires_grad_(n in trainable)
    params = [p for n, p in model.named_parameters() if n in trainable]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    labels = torch.tensor([r.label.index for r in records])
    history = []
    best = (-1.0, None)
    stale = 0
    for epoch in range(cfg.epochs):
        model.train()
        _freeze_bn(model, trainable)
        order = rng.permutation(len(records))
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = store.batch([records[i] for i in idx])
            y = labels[idx]
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y).sum())
        entry = {"epoch": epoch, "loss": total_loss / len(records), "accuracy": correct / len(records)}
        if val_manifest is not None and len(val_manifest):
            _, pred = predict(model, val_manifest, store)
            truth = np.array([r.label.index for r in val_manifest.records])
            entry["val_accuracy"] = float(np.mean(pred == truth))
            if entry["val_accuracy"] > best[0]:
                best = (entry["val_accuracy"], copy.deepcopy(model.state_dict()))
                stale = 0
            else:
                stale += 1
        history.append(entry)
        log.debug("epoch %d: %s", epoch, entry)
        if cfg.early_stop_patience is not None and stale > cfg.early_stop_patience:
            break
    if best[1] is not None:
        model.load_state_dict(best[1])
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return TrainedModel(model, bcfg, cfg, history)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(model: nn.Module, manifest: DatasetManifest, store: ImageStore | None = None,
            batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities (N, K) and argmax labels; ties go to the lowest index."""
    store = store or ImageStore.for_config(model.backbone_config)
    was_training = model.training
    model.eval()
    records = list(manifest.records)
    out = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            out.append(model(store.batch(records[start:start + batch_size])).double().numpy())
    model.train(was_training)
    logits = np.concatenate(out) if out else np.zeros((0, model.backbone_config.num_classes))
    probs = softmax(logits)
    return probs, probs.argmax(axis=1)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(trained: TrainedModel, directory) -> None:
    header = {"kind": "classifier", "backbone": trained.backbone_config.to_json(),
              "train": trained.train_config.to_json(), "log": trained.log}
    save_tensors(directory, state_dict_to_numpy(trained.model.state_dict()), header)


def load_model(directory) -> TrainedModel:
    header, arrays = load_tensors(directory)
    if header.get("kind") != "classifier":
        raise ValueError(f"{directory} is not a classifier model directory")
    bcfg = replace(BackboneConfig.from_json(header["backbone"]), pretrained_weights=None)
    model = build_model(bcfg)
    state = model.state_dict()
    missing = sorted(set(state) - set(arrays))
    if missing:
        raise WeightSchemaError(f"model directory lacks tensors: {missing}")
    model.load_state_dict(numpy_to_state_dict(arrays, state))
    model.eval()
    return TrainedModel(model, bcfg, TrainConfig(**header["train"]), header["log"])


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    confusion: ConfusionMatrix
    report: MetricReport
    test_ids: list
    predicted: list
    probabilities: np.ndarray | None = None
    train_ids: list = field(default_factory=list)


def cross_validate(manifest: DatasetManifest, k: int, backbone_cfg: BackboneConfig, train_cfg: TrainConfig,
                   seed: int = 0, eval_manifest: DatasetManifest | None = None,
                   store: ImageStore | None = None,
                   on_fold: Callable[[FoldResult], None] | None = None) -> list[FoldResult]:
    """Train and score ``k`` independent models on a stratified split.

    Only real records are ever tested.  ``eval_manifest`` contributes extra
    real records that are tested in their fold but never trained on (e.g. the
    rare-class originals behind a synthetic training set).
    """
    union = manifest if eval_manifest is None else merge_manifests(manifest, eval_manifest.real(),
                                                                   notes=manifest.notes)
    plan = make_folds(union, k, seed)
    trainable_ids = set(manifest.ids)
    store = store or ImageStore.for_config(backbone_cfg)
    index = union.by_id()
    results = []
    for fold in range(k):
        test_ids = plan.test_ids(fold)
        train_ids = [i for i in plan.train_ids(fold) if i in trainable_ids]
        try:
            model = build_model(backbone_cfg)
            trained = fine_tune(model, union.subset(train_ids), None, train_cfg, store=store)
            test = union.subset(test_ids)
            probs, pred = predict(trained.model, test, store)
        except Exception as exc:
            raise RuntimeError(f"fold {fold} failed: {exc}") from exc
        truth = [index[i].label.index for i in test.ids]
        cm = confusion(truth, pred, backbone_cfg.num_classes)
        res = FoldResult(fold, cm, evaluate(cm), test.ids, [int(p) for p in pred], probs, train_ids)
        results.append(res)
        if on_fold:
            on_fold(res)
    return results
