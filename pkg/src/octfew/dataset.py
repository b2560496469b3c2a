"""Class taxonomy, image manifests, class sampling and stratified folds."""
from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
IMAGE_SUFFIXES = (".png", ".jpeg", ".jpg", ".bmp", ".tiff", ".tif")
_ACCEPTED_MODES = ("L", "RGB", "P")


class ManifestError(ValueError):
    pass


class ClassLabel(enum.Enum):
    NORMAL = 0
    CNV = 1
    DME = 2
    DRUSEN = 3
    CSC = 4
    MH = 5
    MacTel = 6
    RP = 7
    Stargardt = 8

    @property
    def index(self) -> int:
        return self.value

    @property
    def tier(self) -> str:
        return "major" if self.value < 4 else "rare"

    @classmethod
    def parse(cls, name: str) -> "ClassLabel":
        if isinstance(name, ClassLabel):
            return name
        for label in cls:
            if label.name.lower() == str(name).lower():
                return label
        raise ValueError(f"unknown class label {name!r}")


MAJOR_CLASSES = tuple(c for c in ClassLabel if c.tier == "major")
RARE_CLASSES = tuple(c for c in ClassLabel if c.tier == "rare")
NUM_CLASSES = len(ClassLabel)


class Provenance(str, enum.Enum):
    real = "real"
    augmented = "augmented"
    generated = "generated"


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    label: ClassLabel
    provenance: Provenance = Provenance.real
    source_id: str | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "label", ClassLabel.parse(self.label))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        if self.provenance is Provenance.real and self.source_id is not None:
            raise ManifestError(f"real record {self.id!r} must not carry a source_id")
        if self.provenance is not Provenance.real and self.source_id is None:
            raise ManifestError(f"{self.provenance.value} record {self.id!r} needs a source_id")

    def to_json(self) -> dict:
        out = {"id": self.id, "path": self.path, "label": self.label.name,
               "provenance": self.provenance.value}
        if self.source_id is not None:
            out["source_id"] = self.source_id
        if self.seed is not None:
            out["seed"] = int(self.seed)
        return out

    @classmethod
    def from_json(cls, d: Mapping) -> "ImageRecord":
        return cls(id=d["id"], path=d["path"], label=ClassLabel.parse(d["label"]),
                   provenance=Provenance(d.get("provenance", "real")),
                   source_id=d.get("source_id"), seed=d.get("seed"))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...] = ()
    created_at: str = field(default_factory=_now)
    global_seed: int = 0
    notes: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate record id {r.id!r}")
            seen.add(r.id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def counts(self) -> dict[ClassLabel, int]:
        out: dict[ClassLabel, int] = {}
        for r in self.records:
            out[r.label] = out.get(r.label, 0) + 1
        return out

    def provenance_histogram(self, label: ClassLabel | None = None) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            if label is None or r.label is label:
                out[r.provenance.value] = out.get(r.provenance.value, 0) + 1
        return out

    def of_class(self, label: ClassLabel, provenance: Provenance | None = None) -> list[ImageRecord]:
        label = ClassLabel.parse(label)
        return [r for r in self.records
                if r.label is label and (provenance is None or r.provenance is provenance)]

    def real(self) -> "DatasetManifest":
        return self.subset(r.id for r in self.records if r.provenance is Provenance.real)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(tuple(r for r in self.records if r.id in keep),
                               created_at=self.created_at, global_seed=self.global_seed, notes=self.notes)

    def with_records(self, records: Iterable[ImageRecord], notes: str | None = None) -> "DatasetManifest":
        return DatasetManifest(tuple(records), created_at=self.created_at, global_seed=self.global_seed,
                               notes=self.notes if notes is None else notes)


def merge_manifests(*manifests: DatasetManifest, notes: str = "") -> DatasetManifest:
    """Concatenate manifests, dropping exact duplicate records (same id and content)."""
    records: dict[str, ImageRecord] = {}
    for m in manifests:
        for r in m.records:
            prev = records.get(r.id)
            if prev is not None and prev != r:
                raise ManifestError(f"conflicting records share id {r.id!r}")
            records[r.id] = r
    first = manifests[0] if manifests else DatasetManifest()
    return DatasetManifest(tuple(records.values()), created_at=first.created_at,
                           global_seed=first.global_seed, notes=notes)


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def load_image(path: str | os.PathLike, size: int | None = None, channels: int = 3) -> np.ndarray:
    """Decode to an 8-bit (H, W, channels) array; grayscale is replicated to 3 channels."""
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an 8-bit image as PNG; 3-channel images with equal channels are stored as grayscale."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    elif image.ndim == 3 and np.array_equal(image[..., 0], image[..., 1]) and np.array_equal(image[..., 0], image[..., 2]):
        image = image[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.astype(np.uint8)).save(path, format="PNG")


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.load()
            return im.mode in _ACCEPTED_MODES
    except Exception:
        return False


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def default_class_mapping(names: Iterable[str]) -> dict[str, ClassLabel]:
    out = {}
    for n in names:
        try:
            out[n] = ClassLabel.parse(n)
        except ValueError:
            pass
    return out


def scan_directory(root, class_mapping: Mapping[str, ClassLabel | str] | None = None,
                   ignore: Iterable[str] = (), global_seed: int = 0,
                   created_at: str | None = None) -> DatasetManifest:
    """Ingest a directory-per-class tree into a manifest of real records.

    Without ``class_mapping`` subdirectories are matched to class names
    case-insensitively.  Records are ordered lexicographically by path.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data root {root} does not exist")
    ignore = set(ignore)
    subdirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name not in ignore)
    if class_mapping is None:
        mapping = default_class_mapping(p.name for p in subdirs)
    else:
        mapping = {k: ClassLabel.parse(v) for k, v in class_mapping.items()}
    unmapped = [p.name for p in subdirs if p.name not in mapping]
    if unmapped:
        raise ManifestError(f"unmapped subdirectory {unmapped[0]!r} under {root}"
                            + (f" (and {len(unmapped) - 1} more)" if len(unmapped) > 1 else ""))
    records = []
    skipped = 0
    for sub in subdirs:
        label = mapping[sub.name]
        for f in sorted(sub.rglob("*")):
            if not f.is_file() or f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            if not _decodable(f):
                log.warning("skipping undecodable image %s", f)
                skipped += 1
                continue
            records.append(ImageRecord(id=f.relative_to(root).as_posix(), path=str(f), label=label))
    records.sort(key=lambda r: r.path)
    notes = f"scanned {root}; undecodable_skipped={skipped}"
    return DatasetManifest(tuple(records), created_at=created_at or _now(), global_seed=global_seed, notes=notes)


def sample_class(manifest: DatasetManifest, label: ClassLabel, n: int, seed: int) -> DatasetManifest:
    """Uniform draw of ``n`` records of one class without replacement."""
    label = ClassLabel.parse(label)
    pool = sorted(manifest.of_class(label), key=lambda r: r.id)
    if n > len(pool):
        raise ManifestError(f"cannot sample {n} {label.name} records: only {len(pool)} available "
                            f"(short by {n - len(pool)})")
    if n == len(pool):
        chosen = {r.id for r in pool}
    else:
        idx = np.random.default_rng(seed).choice(len(pool), size=n, replace=False)
        chosen = {pool[i].id for i in idx}
    return manifest.subset(chosen)


@dataclass(frozen=True)
class SplitPlan:
    """Fold assignment for every record of a manifest.

    Real records carry their test fold.  Synthetic records carry the fold of
    their real ancestor, so they are never trained on while that ancestor is
    under test, and they are never tested themselves.
    """
    k: int
    assignments: Mapping[str, int]
    stratified: bool = True
    real_ids: frozenset = frozenset()

    def test_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f == fold and i in self.real_ids]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f != fold]


def root_ancestor(record: ImageRecord, index: Mapping[str, ImageRecord]) -> str | None:
    seen = set()
    cur = record
    while cur.provenance is not Provenance.real:
        if cur.source_id in seen:
            raise ManifestError(f"source_id cycle at {cur.id!r}")
        seen.add(cur.source_id)
        nxt = index.get(cur.source_id)
        if nxt is None:
            return None
        cur = nxt
    return cur.id


def make_folds(manifest: DatasetManifest, k: int, seed: int) -> SplitPlan:
    if k < 2:
        raise ValueError(f"k must be at least 2 for a train/test split, got {k}")
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    real = [r for r in manifest.records if r.provenance is Provenance.real]
    offset = 0
    for label in ClassLabel:
        ids = sorted(r.id for r in real if r.label is label)
        if not ids:
            continue
        if len(ids) < k:
            raise ValueError(f"class {label.name} has {len(ids)} real records, fewer than k={k}")
        for pos, i in enumerate(rng.permutation(len(ids))):
            assignments[ids[i]] = (offset + pos) % k
        offset += len(ids)
    index = manifest.by_id()
    orphans = []
    for r in manifest.records:
        if r.provenance is Provenance.real:
            continue
        anc = root_ancestor(r, index)
        if anc is None:
            orphans.append(r.id)
        else:
            assignments[r.id] = assignments[anc]
    orphans.sort()
    for pos, i in enumerate(rng.permutation(len(orphans))):
        assignments[orphans[i]] = pos % k
    ordered = {r.id: assignments[r.id] for r in manifest.records}
    return SplitPlan(k=k, assignments=ordered, stratified=True, real_ids=frozenset(r.id for r in real))


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def manifest_to_json(manifest: DatasetManifest) -> str:
    counts = manifest.counts()
    doc = {
        "schema_version": SCHEMA_VERSION,
        "global_seed": int(manifest.global_seed),
        "created_at": manifest.created_at,
        "notes": manifest.notes,
        "counts": {c.name: counts[c] for c in ClassLabel if c in counts},
        "records": [r.to_json() for r in manifest.records],
    }
    return json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def write_manifest(manifest: DatasetManifest, path, check_files: bool = True) -> None:
    if check_files:
        for r in manifest.records:
            p = Path(r.path)
            if not p.is_file():
                raise ManifestError(f"record {r.id!r}: {p} does not exist")
            with Image.open(p) as im:
                if im.mode not in _ACCEPTED_MODES:
                    raise ManifestError(f"record {r.id!r}: unsupported image mode {im.mode}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest_to_json(manifest), encoding="utf-8")


def manifest_from_json(text: str) -> DatasetManifest:
    doc = json.loads(text)
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestError(f"manifest schema version {version!r} does not match supported version {SCHEMA_VERSION!r}")
    m = DatasetManifest(tuple(ImageRecord.from_json(r) for r in doc["records"]),
                        created_at=doc["created_at"], global_seed=doc["global_seed"], notes=doc.get("notes", ""))
    cached = doc.get("counts")
    if cached is not None:
        actual = {c.name: n for c, n in m.counts().items()}
        if {k: v for k, v in cached.items() if v} != actual:
            raise ManifestError(f"cached class counts {cached} disagree with records {actual}")
    return m


def read_manifest(path) -> DatasetManifest:
    return manifest_from_json(Path(path).read_text(encoding="utf-8"))
