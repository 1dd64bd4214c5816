"""Core value types shared by every stage of the pipeline.

Patches are float images in [0, 1]; on disk they are 8-bit PNGs. A dataset is
a :class:`DatasetManifest`, a JSON-lines file with one :class:`SampleRecord`
per line.
"""
from __future__ import annotations

import json
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
from PIL import Image

PATCH_SIZE = 100
FEATURE_SHAPE = (25, 25, 256)

MANIFEST_FIELDS = (
    "patch_ref",
    "label",
    "stain",
    "paired_ref",
    "split",
    "source_id",
    "center_row",
    "center_col",
)


class StainDomain(str, Enum):
    HE = "HE"
    PHH3 = "PHH3"

    @property
    def opposite(self) -> "StainDomain":
        return StainDomain.PHH3 if self is StainDomain.HE else StainDomain.HE


class Label(str, Enum):
    MITOSIS = "mitosis"
    NON_MITOSIS = "non_mitosis"

    @property
    def is_positive(self) -> bool:
        return self is Label.MITOSIS


class Split(str, Enum):
    GAN_TRAIN = "gan_train"
    CLS_TRAIN = "cls_train"
    TEST = "test"


class _ReadCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def bump(self):
        with self._lock:
            self.count += 1


# Every read of SampleRecord.paired_ref goes through this counter so tests can
# prove that the unpaired code paths never look at the stain alignment.
PAIR_READS = _ReadCounter()


class CountedReads:
    def __init__(self, start: int):
        self._start = start
        self.n = 0

    def _close(self):
        self.n = PAIR_READS.count - self._start


@contextmanager
def count_pair_reads() -> Iterator[CountedReads]:
    """Count ``paired_ref`` reads that happen inside the ``with`` block."""
    counted = CountedReads(PAIR_READS.count)
    try:
        yield counted
    finally:
        counted._close()


@dataclass(frozen=True)
class Patch:
    """A fixed-size RGB tile tagged with its stain.

    ``pixels`` is stored as a read-only float array. Any size is accepted here;
    the 100x100 requirement for classifier inputs is enforced where patches are
    consumed (see :func:`validate_sample`).
    """

    pixels: np.ndarray
    stain: StainDomain
    source_id: str = ""
    center: tuple[int, int] = (0, 0)

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"patch must be HxWx3, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("patch contains non-finite values")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("patch pixels must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "stain", StainDomain(self.stain))
        object.__setattr__(self, "center", (int(self.center[0]), int(self.center[1])))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray, stain: Optional[StainDomain] = None) -> "Patch":
        return Patch(pixels, stain if stain is not None else self.stain, self.source_id, self.center)


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray
    origin_patch: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32)
        if v.shape != FEATURE_SHAPE:
            raise ValueError(f"feature map must have shape {FEATURE_SHAPE}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class SampleRecord:
    patch_ref: str
    label: Label
    stain: StainDomain
    split: Split
    source_id: str
    center: tuple[int, int]
    paired_ref: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "stain", StainDomain(self.stain))
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "center", (int(self.center[0]), int(self.center[1])))

    def __getattribute__(self, name):
        if name == "paired_ref":
            PAIR_READS.bump()
        return object.__getattribute__(self, name)

    @property
    def sample_id(self) -> str:
        return self.patch_ref

    def to_dict(self) -> dict:
        return {
            "patch_ref": self.patch_ref,
            "label": self.label.value,
            "stain": self.stain.value,
            "paired_ref": self.paired_ref,
            "split": self.split.value,
            "source_id": self.source_id,
            "center_row": self.center[0],
            "center_col": self.center[1],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        missing = set(MANIFEST_FIELDS) - set(d)
        if missing:
            raise ValueError(f"manifest line missing fields: {sorted(missing)}")
        return cls(
            patch_ref=d["patch_ref"],
            label=Label(d["label"]),
            stain=StainDomain(d["stain"]),
            split=Split(d["split"]),
            source_id=str(d["source_id"]),
            center=(int(d["center_row"]), int(d["center_col"])),
            paired_ref=d["paired_ref"],
        )


@dataclass(frozen=True)
class ClassRatioConfig:
    """Positive:negative ratios as "1 to N" denominators.

    ``train_ratio`` negatives are kept per positive and every positive carries
    ``oversample_weight``; the two must cancel to give 1:1 effective exposure.
    """

    full_ratio: float = 60.0
    train_ratio: int = 5
    oversample_weight: float = 5.0

    def __post_init__(self):
        if self.train_ratio < 1 or self.oversample_weight <= 0:
            raise ValueError("train_ratio must be >= 1 and oversample_weight > 0")
        if not np.isclose(self.oversample_weight, self.train_ratio):
            raise ValueError(
                f"oversample_weight ({self.oversample_weight}) must equal train_ratio "
                f"({self.train_ratio}) for balanced effective exposure"
            )


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def save_image(path: str | Path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels)).save(path)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


class DatasetManifest:
    """Ordered collection of sample records backed by a JSON-lines file.

    Relative ``patch_ref``/``paired_ref`` paths resolve against ``root``.
    """

    def __init__(self, records: Iterable[SampleRecord], root: str | Path = "."):
        self.records = list(records)
        self.root = Path(root)
        self._by_ref = {r.patch_ref: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def select(self, stain=None, split=None, label=None) -> list[SampleRecord]:
        out = self.records
        if stain is not None:
            out = [r for r in out if r.stain == StainDomain(stain)]
        if split is not None:
            out = [r for r in out if r.split == Split(split)]
        if label is not None:
            out = [r for r in out if r.label == Label(label)]
        return list(out)

    def lookup(self, ref: str) -> SampleRecord:
        return self._by_ref[ref]

    def path_of(self, ref: str) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.root / p

    def load_patch(self, record: SampleRecord) -> Patch:
        pixels = load_image(self.path_of(record.patch_ref))
        return Patch(pixels, record.stain, record.source_id, record.center)

    def load_pair(self, record: SampleRecord) -> Patch:
        """Load the aligned counterpart of ``record`` (reads ``paired_ref``)."""
        ref = record.paired_ref
        if ref is None:
            raise ValueError(f"record {record.patch_ref} has no paired_ref")
        pixels = load_image(self.path_of(ref))
        return Patch(pixels, record.stain.opposite, record.source_id, record.center)

    def split_of_sources(self) -> dict[str, set[Split]]:
        out: dict[str, set[Split]] = {}
        for r in self.records:
            out.setdefault(r.source_id, set()).add(r.split)
        return out

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict(), sort_keys=False) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path, root: str | Path | None = None) -> "DatasetManifest":
        path = Path(path)
        records = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(SampleRecord.from_dict(json.loads(line)))
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
        return cls(records, root if root is not None else path.parent)


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[str, ...] = ()
    unreadable: bool = False

    @property
    def ok(self) -> bool:
        return not self.violations and not self.unreadable


def validate_sample(
    record: SampleRecord,
    patch: Patch,
    paired: Optional[Patch] = None,
    manifest: Optional[DatasetManifest] = None,
) -> ValidationResult:
    """Check a loaded record/patch against the data invariants.

    Returns every violation found rather than stopping at the first one.
    Split leakage is only checked when ``manifest`` is given.
    """
    problems = []
    if patch.shape != (PATCH_SIZE, PATCH_SIZE, 3):
        problems.append(f"shape: expected {(PATCH_SIZE, PATCH_SIZE, 3)}, got {patch.shape}")
    px = patch.pixels
    if not np.all(np.isfinite(px)):
        problems.append("range: non-finite pixel values")
    elif px.size and (px.min() < 0 or px.max() > 1):
        problems.append("range: pixel values outside [0, 1]")
    if patch.stain != record.stain:
        problems.append(f"stain: record says {record.stain.value}, patch is {patch.stain.value}")
    if paired is not None:
        if paired.stain != record.stain.opposite:
            problems.append("pair: counterpart must carry the opposite stain")
        if paired.center != record.center or paired.source_id != record.source_id:
            problems.append("pair: counterpart center/source_id differ")
        if paired.shape != patch.shape:
            problems.append("pair: counterpart shape differs")
    if manifest is not None:
        splits = manifest.split_of_sources().get(record.source_id, set()) | {record.split}
        if len(splits) > 1:
            names = ", ".join(sorted(s.value for s in splits))
            problems.append(f"leakage: source {record.source_id} appears in splits {names}")
    return ValidationResult(tuple(problems))


def validate_record(record: SampleRecord, manifest: DatasetManifest) -> ValidationResult:
    """Load ``record`` (and its pair, if any) from disk and validate it."""
    try:
        patch = manifest.load_patch(record)
    except (OSError, ValueError) as exc:
        return ValidationResult((f"unreadable: {record.patch_ref}: {exc}",), unreadable=True)
    paired = None
    ref = record.paired_ref
    if ref is not None:
        try:
            paired = manifest.load_pair(record)
        except (OSError, ValueError) as exc:
            return ValidationResult((f"unreadable: {ref}: {exc}",), unreadable=True)
        if ref in manifest._by_ref:
            other = manifest.lookup(ref)
            if other.stain != record.stain.opposite:
                return ValidationResult(("pair: paired record carries the same stain",))
            paired = Patch(paired.pixels, other.stain, other.source_id, other.center)
    return validate_sample(record, patch, paired=paired, manifest=manifest)


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    seconds: float


@dataclass
class TrainingTrace:
    """Per-epoch loss log; ``checkpoints`` maps epoch -> saved checkpoint path.

    ``snapshots`` holds in-memory checkpoints when nothing is written to disk.
    """

    records: list[EpochRecord] = field(default_factory=list)
    checkpoints: dict[int, str] = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict)
    initial_loss: Optional[float] = None

    def add(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError("epoch records must be consecutive")
        self.records.append(rec)

    def losses(self, name: str) -> list[float]:
        return [r.losses[name] for r in self.records]

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            if self.initial_loss is not None:
                fh.write(json.dumps({"initial_loss": self.initial_loss}) + "\n")
            for r in self.records:
                row = asdict(r)
                if r.epoch in self.checkpoints:
                    row["checkpoint"] = self.checkpoints[r.epoch]
                fh.write(json.dumps(row) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "TrainingTrace":
        trace = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            if "initial_loss" in row:
                trace.initial_loss = row["initial_loss"]
                continue
            ckpt = row.pop("checkpoint", None)
            rec = EpochRecord(**row)
            trace.add(rec)
            if ckpt:
                trace.checkpoints[rec.epoch] = ckpt
        return trace
