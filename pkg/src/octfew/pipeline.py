"""Declarative experiment runner: stage graph, seeds, caching and run records."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentationSpec
from .balance import (BalanceError, Engines, builtin_strategy, default_engines, execute, plan_balance)
from .dataset import (ClassLabel, DatasetManifest, RARE_CLASSES, merge_manifests, read_manifest, sample_class,
                      scan_directory, write_manifest)
from .seeds import derive_seed

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
STAGES = ("ingest", "augment", "gan_train", "gan_generate", "balance", "crossval", "train", "evaluate", "embed",
          "report")
DEPENDS = {
    "ingest": (),
    "augment": ("ingest",),
    "gan_train": ("ingest", "augment"),
    "gan_generate": ("ingest", "gan_train"),
    "balance": ("ingest", "augment", "gan_generate"),
    "crossval": ("ingest", "balance"),
    "train": ("ingest", "balance"),
    "evaluate": ("train",),
    "embed": ("ingest", "train"),
    "report": ("crossval",),
}
# read when present, so they join the cache key without being preconditions
OPTIONAL_INPUTS = {"report": ("evaluate",)}
RECORD_NAME = "run_record.json"
STAGE_RECORD = "stage.json"


class ConfigError(ValueError):
    """Raised with the full list of validation problems."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class PreconditionError(RuntimeError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage} failed: {cause}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    data_root: str
    output_root: str
    global_seed: int = 0
    strategy: str = "bal_5000"
    strategy_scale: float = 1.0
    major_fill: str = "sample"
    schema_version: str = SCHEMA_VERSION
    ingest: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    gan: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)
    crossval: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)
    embed: dict = field(default_factory=dict)
    base_dir: str = field(default=".", repr=False, compare=False)

    # --- loading -----------------------------------------------------------
    @classmethod
    def from_json(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"<root>: unknown field(s) {', '.join(unknown)}"])
        missing = [k for k in ("data_root", "output_root") if k not in d]
        if missing:
            raise ConfigError([f"<root>.{k}: required field missing" for k in missing])
        return cls(**d, base_dir=str(base_dir))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"]) from exc
        return cls.from_json(d, base_dir=path.parent)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    # --- resolved values ---------------------------------------------------
    def resolve(self, p) -> Path:
        p = Path(os.path.expanduser(str(p)))
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def data_path(self) -> Path:
        return self.resolve(os.environ.get("OCTFEW_DATA_ROOT") or self.data_root)

    @property
    def output_path(self) -> Path:
        return self.resolve(self.output_root)

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.global_seed, stage)

    def augmentation_spec(self) -> AugmentationSpec:
        return AugmentationSpec(**self.augment)

    def balance_strategy(self):
        return builtin_strategy(self.strategy, seed=self.stage_seed("balance"), scale=self.strategy_scale,
                                major_fill=self.major_fill)

    def translation_config(self, label: ClassLabel):
        from .ugatit import TranslationConfig

        d = {k: v for k, v in self.gan.items() if k not in ("checkpoints", "train", "domain_a_size")}
        d["seed"] = derive_seed(self.global_seed, "gan_train", label.name)
        return TranslationConfig(**d)

    def backbone_config(self, stage: str):
        from .classifier import BackboneConfig

        d = dict(self.classifier.get("backbone", {}))
        d["seed"] = self.stage_seed(stage)
        return BackboneConfig.from_json(d)

    def train_config(self, stage: str):
        from .classifier import TrainConfig

        return TrainConfig(**{**self.classifier.get("train", {}), "seed": self.stage_seed(stage)})

    @property
    def supplied_checkpoints(self) -> dict:
        return {ClassLabel.parse(k): self.resolve(v) for k, v in self.gan.get("checkpoints", {}).items()}

    @property
    def has_test_set(self) -> bool:
        return "test_root" in self.evaluate or "test_manifest" in self.evaluate

    @property
    def trains_gan(self) -> bool:
        return bool(self.gan.get("train", True))


def _check(errors: list, where: str, fn):
    try:
        return fn()
    except ConfigError as exc:
        errors.extend(exc.errors)
    except (ValueError, TypeError, KeyError) as exc:
        errors.append(f"{where}: {exc}")
    return None


def validate(cfg: ExperimentConfig) -> list[str]:
    """Every problem with ``cfg`` as ``path.field: message``; empty when valid."""
    errors: list[str] = []
    if cfg.schema_version != SCHEMA_VERSION:
        errors.append(f"<root>.schema_version: expected {SCHEMA_VERSION!r}, got {cfg.schema_version!r}")
    if not cfg.data_path.is_dir():
        errors.append(f"<root>.data_root: directory {cfg.data_path} does not exist")
    if not isinstance(cfg.global_seed, int):
        errors.append("<root>.global_seed: must be an integer")
    strategy = _check(errors, "<root>.strategy", cfg.balance_strategy)
    _check(errors, "augment", cfg.augmentation_spec)
    for key in ("class_mapping", "ignore"):
        if key in cfg.ingest and not isinstance(cfg.ingest[key], (dict if key == "class_mapping" else list)):
            errors.append(f"ingest.{key}: wrong type")
    for name, target in cfg.ingest.get("class_mapping", {}).items():
        _check(errors, f"ingest.class_mapping.{name}", lambda t=target: ClassLabel.parse(t))

    # translation checkpoints: train them, or every generating class must have one on disk
    supplied = {}
    for k, v in cfg.gan.get("checkpoints", {}).items():
        label = _check(errors, f"gan.checkpoints.{k}", lambda k=k: ClassLabel.parse(k))
        if label is not None:
            supplied[label] = cfg.resolve(v)
            if not (cfg.resolve(v) / "header.json").is_file():
                errors.append(f"gan.checkpoints.{k}: checkpoint {cfg.resolve(v)} does not exist")
    if strategy is not None:
        for label, rule in strategy.composition_rules.items():
            if rule.generated > 0 and label not in supplied and not cfg.trains_gan:
                errors.append(f"gan.checkpoints.{label.name}: missing checkpoint path for rare class {label.name} "
                              f"(required by {cfg.strategy} when gan.train is false)")
    if cfg.trains_gan:
        _check(errors, "gan", lambda: cfg.translation_config(ClassLabel.CSC))
        if int(cfg.gan.get("domain_a_size", 1)) < 1:
            errors.append("gan.domain_a_size: must be >= 1")

    _check(errors, "classifier.backbone", lambda: cfg.backbone_config("train"))
    _check(errors, "classifier.train", lambda: cfg.train_config("train"))
    k = cfg.crossval.get("k", 5)
    if not isinstance(k, int) or k < 2:
        errors.append(f"crossval.k: must be an integer >= 2, got {k!r}")
    for key in ("test_root", "test_manifest"):
        if key in cfg.evaluate and not cfg.resolve(cfg.evaluate[key]).exists():
            errors.append(f"evaluate.{key}: {cfg.resolve(cfg.evaluate[key])} does not exist")
    perp = cfg.embed.get("perplexity", 30.0)
    if not isinstance(perp, (int, float)) or perp <= 0:
        errors.append(f"embed.perplexity: must be positive, got {perp!r}")
    return errors


# ---------------------------------------------------------------------------
# hashing and records
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def tree_digest(root) -> str:
    """Content hash over every file (relative path + bytes) under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(sha256_file(p).encode())
    return h.hexdigest()


def _outputs(stage_dir: Path) -> dict[str, str]:
    return {p.relative_to(stage_dir).as_posix(): sha256_file(p)
            for p in sorted(stage_dir.rglob("*")) if p.is_file() and p.name != STAGE_RECORD}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, default=str) + "\n")


@dataclass
class StageRecord:
    name: str
    status: str  # ran | cached | failed | skipped
    seed: int
    cache_key: str = ""
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seconds: float = 0.0
    error: str | None = None

    @property
    def digest(self) -> str:
        return sha256_json(self.outputs)


@dataclass
class RunRecord:
    config: dict
    tool_version: str
    status: str = "complete"
    stages: list = field(default_factory=list)
    started: float = 0.0
    finished: float = 0.0

    def stage(self, name: str) -> StageRecord | None:
        return next((s for s in self.stages if s.name == name), None)

    def to_json(self) -> dict:
        return {"config": self.config, "tool_version": self.tool_version, "status": self.status,
                "started": self.started, "finished": self.finished, "stages": [asdict(s) for s in self.stages]}

    @classmethod
    def from_json(cls, d) -> "RunRecord":
        return cls(d["config"], d["tool_version"], d["status"], [StageRecord(**s) for s in d["stages"]],
                   d.get("started", 0.0), d.get("finished", 0.0))


def load_run_record(output_root) -> RunRecord:
    return RunRecord.from_json(json.loads((Path(output_root) / RECORD_NAME).read_text()))


# ---------------------------------------------------------------------------
# stage bodies
# ---------------------------------------------------------------------------

class Context:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = cfg.output_path / "stages"
        self._manifests: dict[str, DatasetManifest] = {}

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def manifest(self, stage: str, name: str = "manifest.json") -> DatasetManifest:
        key = f"{stage}/{name}"
        if key not in self._manifests:
            self._manifests[key] = read_manifest(self.dir(stage) / name)
        return self._manifests[key]

    def real(self) -> DatasetManifest:
        return self.manifest("ingest")

    def strategy(self):
        return self.cfg.balance_strategy()

    def placeholder_plan(self):
        return plan_balance(self.real(), self.strategy(), {c: None for c in RARE_CLASSES})


def _ingest_input(cfg: ExperimentConfig) -> dict:
    d = {"data": tree_digest(cfg.data_path)}
    for key in ("test_root", "test_manifest"):
        if key in cfg.evaluate:
            p = cfg.resolve(cfg.evaluate[key])
            d[key] = tree_digest(p) if p.is_dir() else sha256_file(p)
    return d


def _stage_ingest(ctx: Context, out: Path) -> None:
    cfg = ctx.cfg
    kw = dict(class_mapping=cfg.ingest.get("class_mapping"), ignore=tuple(cfg.ingest.get("ignore", ())),
              global_seed=cfg.global_seed)
    write_manifest(scan_directory(cfg.data_path, **kw), out / "manifest.json")
    if "test_root" in cfg.evaluate:
        write_manifest(scan_directory(cfg.resolve(cfg.evaluate["test_root"]), **kw), out / "test_manifest.json")
    elif "test_manifest" in cfg.evaluate:
        write_manifest(read_manifest(cfg.resolve(cfg.evaluate["test_manifest"])), out / "test_manifest.json")


def _stage_augment(ctx: Context, out: Path) -> None:
    # the same seeds and engine the balance step would use, so standalone and staged runs agree
    plan = ctx.placeholder_plan()
    engines = default_engines(out / "img", ctx.real(), ctx.cfg.augmentation_spec())
    records = []
    for label, led in plan.per_class_ledger.items():
        if led.augmented:
            pool = ctx.real().of_class(label)
            records += engines.augment(pool, led.augmented, derive_seed(plan.seed, label.name, "augment"))
    write_manifest(DatasetManifest(tuple(records), global_seed=ctx.cfg.global_seed, notes="augmented pool"),
                   out / "manifest.json")


def _generating_classes(ctx: Context) -> list[ClassLabel]:
    return [c for c, led in ctx.placeholder_plan().per_class_ledger.items() if led.generated > 0]


def _stage_gan_train(ctx: Context, out: Path) -> None:
    from .ugatit import train

    cfg = ctx.cfg
    real = ctx.real()
    supplied = cfg.supplied_checkpoints
    index = {}
    domain_a = sample_class(real, ClassLabel.NORMAL,
                            min(int(cfg.gan.get("domain_a_size", 1000)), len(real.of_class(ClassLabel.NORMAL))),
                            derive_seed(cfg.global_seed, "gan_train", "domain_a"))
    for label in _generating_classes(ctx):
        if label in supplied:
            index[label.name] = str(supplied[label])
            continue
        # domain B is the rare class after basic augmentation: its real images plus the augmented pool
        augmented = ctx.manifest("augment").of_class(label)
        domain_b = merge_manifests(real.subset(r.id for r in real.of_class(label)),
                                   DatasetManifest(tuple(augmented), global_seed=cfg.global_seed))
        log.info("training translation model for %s", label.name)
        train(domain_a, domain_b, cfg.translation_config(label), out_dir=out / label.name)
        index[label.name] = str(out / label.name)
    _write_json(out / "checkpoints.json", index)


def _checkpoint_index(ctx: Context) -> dict[ClassLabel, str]:
    d = json.loads((ctx.dir("gan_train") / "checkpoints.json").read_text())
    return {ClassLabel.parse(k): v for k, v in d.items()}


def _stage_gan_generate(ctx: Context, out: Path) -> None:
    plan = plan_balance(ctx.real(), ctx.strategy(), _checkpoint_index(ctx))
    engines = default_engines(out / "img", ctx.real(), ctx.cfg.augmentation_spec())
    records = []
    for label, led in plan.per_class_ledger.items():
        if led.generated:
            records += engines.generate(label, led.checkpoint, led.generated,
                                        derive_seed(plan.seed, label.name, "generate"))
    write_manifest(DatasetManifest(tuple(records), global_seed=ctx.cfg.global_seed, notes="generated pool"),
                   out / "manifest.json")


def _pool_engines(augmented: DatasetManifest, generated: DatasetManifest) -> Engines:
    """Engines that hand out records produced by the augment / gan_generate stages."""
    def aug(sources, count, seed):
        pool = augmented.of_class(sources[0].label)
        if len(pool) < count:
            raise BalanceError(f"augment stage produced {len(pool)} {sources[0].label.name} images, need {count}")
        return pool[:count]

    def gen(label, checkpoint, count, seed):
        pool = generated.of_class(label)
        if len(pool) < count:
            raise BalanceError(f"gan_generate stage produced {len(pool)} {label.name} images, need {count}")
        return pool[:count]

    return Engines(aug, gen)


def _stage_balance(ctx: Context, out: Path) -> None:
    ckpts = {c: None for c in RARE_CLASSES}
    plan = plan_balance(ctx.real(), ctx.strategy(), ckpts)
    engines = _pool_engines(ctx.manifest("augment"), ctx.manifest("gan_generate"))
    balanced = execute(plan, engines, out_dir=out)
    _write_json(out / "plan.json", plan.to_json())
    write_manifest(balanced, out / "manifest.json")


def _fold_json(results) -> list:
    return [{"fold": r.fold, "confusion": r.confusion.tolist(), "report": r.report.to_json(),
             "test_ids": r.test_ids, "train_ids": r.train_ids, "predicted": r.predicted} for r in results]


def _stage_crossval(ctx: Context, out: Path) -> None:
    from .classifier import ImageStore, cross_validate
    from .metrics import aggregate_folds

    cfg = ctx.cfg
    k = cfg.crossval.get("k", 5)
    split_seed = ctx.cfg.stage_seed("crossval")
    bcfg, tcfg = cfg.backbone_config("crossval"), cfg.train_config("crossval")
    store = ImageStore.for_config(bcfg)
    runs = {cfg.strategy: cross_validate(ctx.manifest("balance"), k, bcfg, tcfg, seed=split_seed,
                                         eval_manifest=ctx.real(), store=store)}
    if cfg.crossval.get("baseline", True):
        # imbalanced, no augmentation: the real corpus alone on the same test partitions
        runs["baseline"] = cross_validate(ctx.real(), k, bcfg, tcfg, seed=split_seed, store=store)
    summary = {}
    for name, results in runs.items():
        summary[name] = aggregate_folds([r.report for r in results]).to_json()
        _write_json(out / f"folds_{name}.json", _fold_json(results))
    _write_json(out / "aggregates.json", summary)


def _stage_train(ctx: Context, out: Path) -> None:
    from .classifier import ImageStore, build_model, fine_tune, predict, save_model

    bcfg, tcfg = ctx.cfg.backbone_config("train"), ctx.cfg.train_config("train")
    store = ImageStore.for_config(bcfg)
    trained = fine_tune(build_model(bcfg), ctx.manifest("balance"), None, tcfg, store=store)
    save_model(trained, out / "model")
    test_path = ctx.dir("ingest") / "test_manifest.json"
    if test_path.is_file():
        test = read_manifest(test_path)
        probs, pred = predict(trained.model, test, store)
        write_predictions(out / "predictions.json", test, probs, pred)


def write_predictions(path, manifest: DatasetManifest, probs: np.ndarray, pred: np.ndarray) -> None:
    _write_json(Path(path), {"classes": [c.name for c in ClassLabel], "ids": manifest.ids,
                             "truth": [r.label.index for r in manifest.records],
                             "predicted": [int(p) for p in pred],
                             "probabilities": np.round(probs, 8).tolist()})


def evaluate_predictions(path) -> dict:
    from .metrics import confusion, evaluate

    d = json.loads(Path(path).read_text())
    cm = confusion(d["truth"], d["predicted"], len(d["classes"]))
    return {"confusion": cm.tolist(), "report": evaluate(cm).to_json()}


def _stage_evaluate(ctx: Context, out: Path) -> None:
    pred = ctx.dir("train") / "predictions.json"
    if not pred.is_file():
        raise PreconditionError("evaluate needs predictions from the train stage; configure evaluate.test_root "
                                "or evaluate.test_manifest")
    _write_json(out / "evaluation.json", evaluate_predictions(pred))


def _stratified_subset(manifest: DatasetManifest, limit: int, seed: int) -> DatasetManifest:
    if len(manifest) <= limit:
        return manifest
    rng = np.random.default_rng(seed)
    keep = rng.choice(len(manifest), size=limit, replace=False)
    return manifest.subset(manifest.ids[i] for i in sorted(keep))


def _stage_embed(ctx: Context, out: Path) -> None:
    from .classifier import load_model
    from .embed import export, extract_features, tsne_3d

    e = ctx.cfg.embed
    seed = ctx.cfg.stage_seed("embed")
    trained = load_model(ctx.dir("train") / "model")
    subset = _stratified_subset(ctx.real(), int(e.get("max_points", 2000)), seed)
    feats = extract_features(trained.model, subset)
    emb = tsne_3d(feats, perplexity=float(e.get("perplexity", 30.0)), iterations=int(e.get("iterations", 1000)),
                  seed=seed)
    info = export(emb, [r.name for r in feats.labels], feats.ids, out / "embedding.csv", out / "embedding.png",
                  title=ctx.cfg.strategy)
    _write_json(out / "embedding.json", {**info, "source": "ingest/manifest.json", "kl": emb.kl, "kl_history": emb.kl_history,
                                         "perplexity": emb.perplexity, "iterations": emb.iterations})


def _stage_report(ctx: Context, out: Path) -> None:
    from .metrics import AggregateReport, MetricReport, render_table

    agg = json.loads((ctx.dir("crossval") / "aggregates.json").read_text())
    names = {"baseline": "Imb+NoAug", ctx.cfg.strategy: ctx.cfg.strategy}
    ordered = sorted(agg, key=lambda n: n != "baseline")
    aggregates = {names.get(n, n): AggregateReport.from_json(agg[n]) for n in ordered}
    per_class = {f"{names.get(n, n)} (CV)": a.tpr_mean for n, a in zip(ordered, aggregates.values())}
    ev = ctx.dir("evaluate") / "evaluation.json"
    if ev.is_file():
        rep = MetricReport.from_json(json.loads(ev.read_text())["report"])
        per_class[f"{ctx.cfg.strategy} (test)"] = rep.per_class_tpr
    tables = render_table(aggregates, per_class)
    (out / "metrics.txt").write_text(tables["summary_text"] + "\n" + tables["tpr_text"])
    (out / "metrics.csv").write_text(tables["summary_csv"])
    (out / "tpr.csv").write_text(tables["tpr_csv"])


BODIES = {
    "ingest": _stage_ingest, "augment": _stage_augment, "gan_train": _stage_gan_train,
    "gan_generate": _stage_gan_generate, "balance": _stage_balance, "crossval": _stage_crossval,
    "train": _stage_train, "evaluate": _stage_evaluate, "embed": _stage_embed, "report": _stage_report,
}
CONFIG_KEYS = {
    "ingest": ("ingest", "evaluate"), "augment": ("augment", "strategy", "strategy_scale", "major_fill"),
    "gan_train": ("gan", "strategy", "strategy_scale", "major_fill"),
    "gan_generate": ("augment", "strategy", "strategy_scale", "major_fill"),
    "balance": ("strategy", "strategy_scale", "major_fill"), "crossval": ("classifier", "crossval", "strategy"),
    "train": ("classifier",), "evaluate": (), "embed": ("embed",), "report": ("strategy",),
}


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def _stage_config(cfg: ExperimentConfig, stage: str) -> dict:
    snap = cfg.to_json()
    d = {k: snap[k] for k in CONFIG_KEYS[stage]}
    d["global_seed"] = cfg.global_seed
    if stage == "gan_train":
        d["gan"] = {**d["gan"], "checkpoints": {k: tree_digest(cfg.resolve(v))
                                                 for k, v in d["gan"].get("checkpoints", {}).items()}}
    return d


def _saved(stage_dir: Path) -> StageRecord | None:
    p = stage_dir / STAGE_RECORD
    if not p.is_file():
        return None
    return StageRecord(**json.loads(p.read_text()))


def _selected(stages) -> list[str]:
    if stages is None:
        return list(STAGES)
    stages = [s.replace("-", "_") for s in stages]
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ConfigError([f"stages: unknown stage(s) {', '.join(bad)}"])
    return [s for s in STAGES if s in stages]


def run(cfg: ExperimentConfig, stages=None, force: bool = False) -> RunRecord:
    """Execute ``stages`` (default: all) in order; cached stages are skipped.

    A stage is cached when its saved record has the same key (stage config plus
    upstream output digests) and its output files are unchanged.  A failure
    stops the run; later stages are marked skipped and the record is partial.
    """
    errors = validate(cfg)
    if errors:
        raise ConfigError(errors)
    selected = _selected(stages)
    ctx = Context(cfg)
    if stages is None and not cfg.has_test_set:
        # nothing to evaluate; drop any stale evaluation so the report carries CV rows only
        selected.remove("evaluate")
        shutil.rmtree(ctx.dir("evaluate"), ignore_errors=True)
    if "evaluate" in selected and "train" not in selected and not (ctx.dir("train") / "predictions.json").is_file():
        raise PreconditionError("evaluate needs predictions.json from the train stage; run train with a "
                                "configured test set first")
    for s in selected:
        for dep in DEPENDS[s]:
            if dep not in selected and _saved(ctx.dir(dep)) is None:
                raise PreconditionError(f"stage {s} needs outputs of {dep}; run it first or include it")

    record = RunRecord(cfg.to_json(), __version__, started=time.time())
    digests: dict[str, str] = {}
    failed = None
    for stage in STAGES:
        out = ctx.dir(stage)
        saved = _saved(out)
        if stage not in selected:
            if saved is not None:
                digests[stage] = saved.digest
                record.stages.append(saved)
            continue
        seed = cfg.stage_seed(stage)
        if failed is not None:
            record.stages.append(StageRecord(stage, "skipped", seed, error=f"upstream stage {failed} failed"))
            continue
        inputs = {dep: digests[dep] for dep in DEPENDS[stage] + OPTIONAL_INPUTS.get(stage, ()) if dep in digests}
        if stage == "ingest":
            inputs = _ingest_input(cfg)
        key = sha256_json({"stage": stage, "config": _stage_config(cfg, stage), "inputs": inputs})
        if (not force and saved is not None and saved.status in ("ran", "cached") and saved.cache_key == key
                and _outputs(out) == saved.outputs):
            saved = replace(saved, status="cached")
            digests[stage] = saved.digest
            record.stages.append(saved)
            log.info("stage %s: cached", stage)
            continue
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        t0 = time.perf_counter()
        log.info("stage %s: running", stage)
        try:
            BODIES[stage](ctx, out)
        except Exception as exc:  # recorded, then the run stops
            log.error("stage %s failed: %s", stage, exc)
            rec = StageRecord(stage, "failed", seed, key, inputs, _outputs(out), time.perf_counter() - t0,
                              f"{type(exc).__name__}: {exc}")
            _write_json(out / STAGE_RECORD, asdict(rec))
            record.stages.append(rec)
            failed = stage
            continue
        rec = StageRecord(stage, "ran", seed, key, inputs, _outputs(out), time.perf_counter() - t0)
        _write_json(out / STAGE_RECORD, asdict(rec))
        digests[stage] = rec.digest
        record.stages.append(rec)
    record.status = "partial" if failed else "complete"
    record.finished = time.time()
    _write_json(cfg.output_path / RECORD_NAME, record.to_json())
    return record


def desk_config(data_root, output_root, **overrides) -> ExperimentConfig:
    """The small synthetic-data configuration used for desk runs."""
    base = dict(
        data_root=str(data_root), output_root=str(output_root), global_seed=0, strategy="bal_5000",
        strategy_scale=0.1, major_fill="topup",
        gan={"iterations": 200, "learning_rate": 2e-4, "image_size": 32, "channels": 1, "preset": "light",
             "domain_a_size": 50},
        classifier={"backbone": {"variant": "toy_cnn", "input_size": 32},
                    "train": {"epochs": 10, "batch_size": 32, "learning_rate": 1e-3}},
        crossval={"k": 5, "baseline": True},
        embed={"perplexity": 30.0, "iterations": 1000, "max_points": 1000},
    )
    base.update(overrides)
    return ExperimentConfig.from_json(base)
