"""Per-class dataset composition: sampled real, augmented and generated images to fixed targets."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

from .augment import AugmentationSpec, augment_to_count
from .dataset import (ClassLabel, DatasetManifest, ImageRecord, MAJOR_CLASSES, Provenance, RARE_CLASSES,
                      sample_class)
from .seeds import derive_seed

log = logging.getLogger(__name__)

SAMPLE = "sample"       # real component = target minus the other components, drawn at random
ALL = "all"             # every available real image
REMAINDER = "remainder"  # augmented component fills up to the target


class BalanceError(ValueError):
    pass


@dataclass(frozen=True)
class Composition:
    real: int | str = 0
    augmented: int | str = 0
    generated: int = 0


@dataclass(frozen=True)
class BalanceStrategy:
    """``per_class_targets`` of ``None`` keeps a class at its native real count."""
    name: str
    per_class_targets: Mapping[ClassLabel, int | None]
    composition_rules: Mapping[ClassLabel, Composition]
    seed: int = 0


def _rare(aug: int, gen: int) -> Composition:
    return Composition(real=0, augmented=aug, generated=gen)


def builtin_strategy(name: str, seed: int = 0, scale: float = 1.0, major_fill: str = SAMPLE) -> BalanceStrategy:
    """The three dataset recipes: ``imb_5000``, ``bal_5000``, ``bal_10000``.

    ``scale`` shrinks every count (desk runs); ``major_fill="topup"`` makes
    major classes use all real images and augment the rest, for corpora with
    fewer real images than the target.
    """
    def s(n):
        return int(round(n * scale))

    if major_fill not in (SAMPLE, "topup"):
        raise ValueError(f"unknown major_fill {major_fill!r}")
    fill = Composition(real=SAMPLE) if major_fill == SAMPLE else Composition(real=ALL, augmented=REMAINDER)
    targets: dict[ClassLabel, int | None] = {}
    rules: dict[ClassLabel, Composition] = {}
    if name == "imb_5000":
        for c in MAJOR_CLASSES:
            targets[c], rules[c] = None, Composition(real=ALL)
        for c in RARE_CLASSES:
            targets[c], rules[c] = s(5000), _rare(s(2000), s(3000))
    elif name == "bal_5000":
        for c in MAJOR_CLASSES:
            targets[c], rules[c] = s(5000), fill
        for c in RARE_CLASSES:
            targets[c], rules[c] = s(5000), _rare(s(2000), s(3000))
    elif name == "bal_10000":
        for c in MAJOR_CLASSES:
            targets[c], rules[c] = s(10000), fill
        rules[ClassLabel.DRUSEN] = Composition(real=ALL, augmented=REMAINDER)
        for c in RARE_CLASSES:
            targets[c], rules[c] = s(10000), _rare(s(2000), s(8000))
    else:
        raise ValueError(f"unknown balance strategy {name!r}")
    return BalanceStrategy(name, targets, rules, seed)


@dataclass(frozen=True)
class ClassLedger:
    label: ClassLabel
    target: int
    real: int
    augmented: int
    generated: int
    available_real: int
    checkpoint: object = None

    @property
    def total(self) -> int:
        return self.real + self.augmented + self.generated

    def to_json(self) -> dict:
        return {"label": self.label.name, "target": self.target, "real": self.real, "augmented": self.augmented,
                "generated": self.generated, "available_real": self.available_real,
                "checkpoint": self.checkpoint if isinstance(self.checkpoint, (str, type(None))) else "<in-memory>"}


@dataclass(frozen=True)
class BalancePlan:
    strategy: BalanceStrategy
    per_class_ledger: Mapping[ClassLabel, ClassLedger]
    source: DatasetManifest = field(repr=False, default=None)

    @property
    def seed(self) -> int:
        return self.strategy.seed

    def total(self) -> int:
        return sum(led.total for led in self.per_class_ledger.values())

    def to_json(self) -> dict:
        return {"strategy": self.strategy.name, "seed": self.seed,
                "ledger": [self.per_class_ledger[c].to_json() for c in ClassLabel if c in self.per_class_ledger]}


def plan_balance(real: DatasetManifest, strategy: BalanceStrategy, checkpoints: Mapping | None = None) -> BalancePlan:
    """Resolve every composition rule into exact counts, or fail."""
    checkpoints = {ClassLabel.parse(k): v for k, v in (checkpoints or {}).items()}
    missing = [c.name for c, rule in strategy.composition_rules.items() if rule.generated > 0 and c not in checkpoints]
    if missing:
        raise BalanceError(f"missing translation checkpoint for {', '.join(missing)}")
    ledger = {}
    for label in ClassLabel:
        if label not in strategy.composition_rules:
            continue
        rule = strategy.composition_rules[label]
        available = len(real.of_class(label, Provenance.real))
        target = strategy.per_class_targets.get(label)
        if target is None:
            target = available
        gen = int(rule.generated)
        aug = 0 if rule.augmented == REMAINDER else int(rule.augmented)
        if rule.real == SAMPLE:
            n_real = target - gen - aug
        elif rule.real == ALL:
            n_real = min(available, target - gen - aug) if rule.augmented == REMAINDER else available
        else:
            n_real = int(rule.real)
        if rule.augmented == REMAINDER:
            aug = target - gen - n_real
        if n_real < 0 or aug < 0:
            raise BalanceError(f"{label.name}: components exceed target {target}")
        if n_real > available:
            raise BalanceError(f"{label.name}: needs {n_real} real images but only {available} available "
                               f"(short by {n_real - available})")
        if aug > 0 and available == 0:
            raise BalanceError(f"{label.name}: augmentation needs at least one real image")
        if n_real + aug + gen != target:
            raise BalanceError(f"{label.name}: components {n_real}+{aug}+{gen} do not sum to target {target}")
        ledger[label] = ClassLedger(label, target, n_real, aug, gen, available, checkpoints.get(label))
    return BalancePlan(strategy, ledger, real)


@dataclass
class Engines:
    """Producers of synthetic records.

    ``augment(sources, count, seed)`` returns ``count`` new augmented records;
    ``generate(label, checkpoint, count, seed)`` returns ``count`` generated records.
    """
    augment: Callable[[list, int, int], list]
    generate: Callable[[ClassLabel, object, int, int], list]


def default_engines(img_dir, domain_a: DatasetManifest, spec: AugmentationSpec = AugmentationSpec()) -> Engines:
    """Engines backed by the augmentation module and translation checkpoints (paths or objects)."""
    from .ugatit import generate, load_checkpoint

    img_dir = Path(img_dir)

    def aug(sources, count, seed):
        out = augment_to_count(sources, len(sources) + count, spec, seed, img_dir / "augmented")
        return out[len(sources):]

    def gen(label, checkpoint, count, seed):
        ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
        if ckpt.target_class is not label:
            raise BalanceError(f"checkpoint for {ckpt.target_class.name} used to generate {label.name}")
        return list(generate(ckpt, domain_a, count, seed, img_dir / "generated").records)

    return Engines(aug, gen)


def execute(plan: BalancePlan, engines: Engines, out_dir=None) -> DatasetManifest:
    """Materialise a plan into a merged manifest with exactly the planned composition."""
    real = plan.source
    parts: list[ImageRecord] = []
    used: set[str] = set()
    try:
        for label, led in plan.per_class_ledger.items():
            pool = real.of_class(label, Provenance.real)
            if led.real == len(pool):
                chosen = pool
            else:
                chosen = list(sample_class(real.real(), label, led.real, derive_seed(plan.seed, label.name, "real")).records)
            produced = list(chosen)
            if led.augmented:
                produced += engines.augment(pool, led.augmented, derive_seed(plan.seed, label.name, "augment"))
            if led.generated:
                produced += engines.generate(label, led.checkpoint, led.generated,
                                             derive_seed(plan.seed, label.name, "generate"))
            for r in produced:
                if r.label is not label:
                    raise BalanceError(f"engine produced a {r.label.name} record for class {label.name}")
                if r.id in used:
                    r = replace(r, id=f"{r.id}~{plan.seed}")
                    if r.id in used:
                        raise BalanceError(f"unresolvable id collision on {r.id!r}")
                used.add(r.id)
                parts.append(r)
            hist = {p: sum(1 for r in produced if r.provenance is p) for p in Provenance}
            expected = {Provenance.real: led.real, Provenance.augmented: led.augmented,
                        Provenance.generated: led.generated}
            if hist != expected:
                raise BalanceError(f"{label.name}: produced {hist}, ledger says {expected}")
    except Exception:
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "INVALID").write_text("balance execution aborted; outputs are incomplete\n")
        raise
    return DatasetManifest(tuple(parts), created_at=real.created_at, global_seed=plan.seed,
                           notes=f"balanced with {plan.strategy.name}")
