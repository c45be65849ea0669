"""CT studies, 7-slice blocks, the CTV1 volume format and training batches."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .numeric import NUM_CLASSES
from .preprocessing import AugmentConfig, apply_augment, compose_channels, cutmix, draw_augment_params, to_hu

BLOCK_SIZE = 7
HALF_BLOCK = BLOCK_SIZE // 2
CTV1_MAGIC = b"CTV1"
_HEADER = struct.Struct("<4sIII")


@dataclass
class CtStudy:
    study_id: str
    hu: np.ndarray  # [n, H, W] Hounsfield units, axial order
    labels: np.ndarray  # [n, 6] in {0, 1}
    slope: float = 1.0
    intercept: float = -1024.0

    def __post_init__(self):
        self.hu = np.asarray(self.hu, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.hu.ndim != 3 or self.hu.shape[0] < 1:
            raise ShapeError(f"study {self.study_id}: HU volume must be [n>=1, H, W], got {self.hu.shape}")
        check_labels(self.labels, self.hu.shape[0], self.study_id)

    @property
    def n_slices(self) -> int:
        return self.hu.shape[0]


def check_labels(labels, n_slices, study_id):
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] != NUM_CLASSES:
        raise ValidationError(f"study {study_id}: each label vector must have {NUM_CLASSES} entries")
    if labels.shape[0] != n_slices:
        raise ValidationError(f"study {study_id}: {labels.shape[0]} label rows for {n_slices} slices")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError(f"study {study_id}: labels must be 0 or 1")
    bad = np.nonzero(labels[:, 0] != labels[:, 1:].max(axis=1))[0]
    if bad.size:
        raise ValidationError(f"study {study_id}: label[any] != OR(subtypes) on slices {bad.tolist()}")


@dataclass(frozen=True)
class SliceBlock:
    study_id: str
    center_index: int
    member_indices: tuple[int, ...]


def block_indices(n_slices: int, center: int) -> tuple[int, ...]:
    if not 0 <= center < n_slices:
        raise IndexError(f"slice index {center} out of range for {n_slices} slices")
    return tuple(min(max(center + d, 0), n_slices - 1) for d in range(-HALF_BLOCK, HALF_BLOCK + 1))


def block_for(study: CtStudy, slice_idx: int) -> SliceBlock:
    """Seven slices centred on ``slice_idx``; out-of-range neighbours replicate the edge slice."""
    return SliceBlock(study.study_id, slice_idx, block_indices(study.n_slices, slice_idx))


# ---------------------------------------------------------------- CTV1 volumes


def write_volume(path, raw: np.ndarray) -> None:
    raw = np.asarray(raw)
    if raw.ndim != 3:
        raise ShapeError(f"volume must be [n, H, W], got {raw.shape}")
    if raw.dtype != np.int16:
        if raw.min() < -32768 or raw.max() > 32767:
            raise ValueError("stored pixel values do not fit in int16")
        raw = raw.astype(np.int16)
    n, h, w = raw.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CTV1_MAGIC, n, h, w))
        fh.write(raw.astype("<i2").tobytes())


def read_volume_header(path) -> tuple[int, int, int]:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise ValidationError(f"{path}: truncated CTV1 header")
    magic, n, h, w = _HEADER.unpack(head)
    if magic != CTV1_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}, expected {CTV1_MAGIC!r}")
    expected = _HEADER.size + 2 * n * h * w
    size = path.stat().st_size
    if size != expected:
        raise ValidationError(f"{path}: file is {size} bytes, header ({n}x{h}x{w}) implies {expected}")
    return n, h, w


def read_volume(path) -> np.ndarray:
    n, h, w = read_volume_header(path)
    data = Path(path).read_bytes()[_HEADER.size :]
    return np.frombuffer(data, dtype="<i2").reshape(n, h, w).astype(np.int16)


# ---------------------------------------------------------------- dataset


@dataclass
class StudyEntry:
    study_id: str
    volume_file: Path
    slope: float
    intercept: float
    labels: np.ndarray
    shape: tuple[int, int, int]


class Dataset:
    """Read-only collection of studies. Volumes load lazily and windowed slices are cached."""

    def __init__(self, entries: Sequence[StudyEntry] = (), studies: Sequence[CtStudy] = ()):
        self.entries = list(entries)
        self._studies: dict[str, CtStudy] = {s.study_id: s for s in studies}
        self._ids = [e.study_id for e in self.entries] + [s.study_id for s in studies]
        if len(set(self._ids)) != len(self._ids):
            raise ValidationError("duplicate study ids in dataset")
        self._windowed: dict[str, np.ndarray] = {}

    @classmethod
    def from_studies(cls, studies: Sequence[CtStudy]) -> "Dataset":
        return cls(studies=studies)

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def study_ids(self) -> list[str]:
        return list(self._ids)

    def study(self, i: int) -> CtStudy:
        sid = self._ids[i]
        if sid not in self._studies:
            e = self.entries[i]
            raw = read_volume(e.volume_file)
            if raw.shape != e.shape:
                raise ValidationError(f"study {sid}: volume shape changed since load")
            self._studies[sid] = CtStudy(sid, to_hu(raw, e.slope, e.intercept), e.labels, e.slope, e.intercept)
        return self._studies[sid]

    def labels(self, i: int) -> np.ndarray:
        if i < len(self.entries):
            return self.entries[i].labels
        return self._studies[self._ids[i]].labels

    def n_slices(self, i: int) -> int:
        return self.labels(i).shape[0]

    def windowed(self, i: int) -> np.ndarray:
        """[n, 3, H, W] windowed images for study ``i``."""
        sid = self._ids[i]
        if sid not in self._windowed:
            self._windowed[sid] = compose_channels(self.study(i).hu)
        return self._windowed[sid]

    def pairs(self) -> list[tuple[int, int]]:
        return [(i, s) for i in range(len(self)) for s in range(self.n_slices(i))]


def load_dataset(manifest_path) -> Dataset:
    """Parse a JSON manifest and validate every study header and label matrix."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest_path}: invalid JSON ({exc})") from exc
    studies = doc.get("studies") if isinstance(doc, dict) else doc
    if not isinstance(studies, list):
        raise ValidationError(f"{manifest_path}: expected a list of studies")
    root = manifest_path.parent
    entries = []
    for k, item in enumerate(studies):
        sid = item.get("study_id") if isinstance(item, dict) else None
        if not isinstance(sid, str) or not sid:
            raise ValidationError(f"{manifest_path}: study #{k} has no study_id")
        for key in ("volume_file", "slope", "intercept", "labels"):
            if key not in item:
                raise ValidationError(f"study {sid}: missing field {key!r}")
        path = Path(item["volume_file"])
        if not path.is_absolute():
            path = root / path
        if not path.exists():
            raise FileNotFoundError(f"study {sid}: volume file {path} not found")
        slope = float(item["slope"])
        if slope == 0:
            raise ValidationError(f"study {sid}: slope must be non-zero")
        try:
            shape = read_volume_header(path)
        except ValidationError as exc:
            raise ValidationError(f"study {sid}: {exc}") from exc
        rows = item["labels"]
        if not isinstance(rows, list) or any(not isinstance(r, list) or len(r) != NUM_CLASSES for r in rows):
            raise ValidationError(f"study {sid}: each label vector must have {NUM_CLASSES} entries")
        labels = np.asarray(rows, dtype=np.float64).reshape(-1, NUM_CLASSES)
        check_labels(labels, shape[0], sid)
        entries.append(StudyEntry(sid, path, slope, float(item["intercept"]), labels, shape))
    return Dataset(entries)


def write_manifest(path, rows: Sequence[dict]) -> None:
    Path(path).write_text(json.dumps({"studies": list(rows)}, indent=1) + "\n")


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    images: np.ndarray  # [B*7, 3, H, W], blocks contiguous
    labels: np.ndarray  # [B*7, 6], possibly fractional after CutMix
    center_labels: np.ndarray  # [B, 6]
    blocks: list[SliceBlock] = field(default_factory=list)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


def assemble_batch(
    dataset: Dataset,
    pairs: Sequence[tuple[int, int]],
    rng: np.random.Generator,
    augment_cfg: AugmentConfig | None = None,
) -> Batch:
    """Gather blocks for ``pairs`` and augment them; one augmentation draw per block."""
    imgs, labs, blocks = [], [], []
    for i, s in pairs:
        idx = block_indices(dataset.n_slices(i), s)
        blocks.append(SliceBlock(dataset.study_ids[i], s, idx))
        block_img = dataset.windowed(i)[list(idx)]
        if augment_cfg is not None:
            block_img = apply_augment(block_img, draw_augment_params(rng, augment_cfg), rng)
        imgs.append(block_img)
        labs.append(dataset.labels(i)[list(idx)])
    if augment_cfg is not None and augment_cfg.cutmix_p > 0 and len(pairs) > 1:
        mixed_imgs, mixed_labs = [], []
        for k in range(len(pairs)):
            partner = int(rng.integers(len(pairs) - 1))
            partner += partner >= k
            if rng.random() < augment_cfg.cutmix_p:
                img, lab = cutmix((imgs[k], labs[k]), (imgs[partner], labs[partner]), rng, augment_cfg.cutmix_alpha)
            else:
                img, lab = imgs[k], labs[k]
            mixed_imgs.append(img)
            mixed_labs.append(lab)
        imgs, labs = mixed_imgs, mixed_labs
    center = [lab[HALF_BLOCK] for lab in labs]
    return Batch(
        np.ascontiguousarray(np.concatenate(imgs)),
        np.concatenate(labs),
        np.stack(center),
        blocks,
    )


def sample_batch(
    dataset: Dataset,
    rng: np.random.Generator,
    blocks_per_batch: int = 16,
    augment_cfg: AugmentConfig | None = None,
) -> Batch:
    """Draw ``blocks_per_batch`` distinct (study, slice) centres uniformly at random."""
    if len(dataset) == 0:
        raise ConfigError("cannot sample from an empty dataset")
    pairs = dataset.pairs()
    k = min(blocks_per_batch, len(pairs))
    chosen = rng.choice(len(pairs), size=k, replace=False)
    return assemble_batch(dataset, [pairs[j] for j in chosen], rng, augment_cfg)


def steps_per_epoch(dataset: Dataset, blocks_per_batch: int = 16) -> int:
    n = len(dataset.pairs())
    return -(-n // blocks_per_batch)


def iterate_epoch(
    dataset: Dataset,
    rng: np.random.Generator,
    blocks_per_batch: int = 16,
    augment_cfg: AugmentConfig | None = None,
) -> Iterator[Batch]:
    """One pass over every (study, slice) centre in random order; the last batch may be short."""
    if len(dataset) == 0:
        raise ConfigError("cannot iterate an empty dataset")
    if blocks_per_batch < 1:
        raise ConfigError(f"blocks_per_batch must be >= 1, got {blocks_per_batch}")
    pairs = dataset.pairs()
    order = rng.permutation(len(pairs))
    for start in range(0, len(order), blocks_per_batch):
        chunk = [pairs[j] for j in order[start : start + blocks_per_batch]]
        yield assemble_batch(dataset, chunk, rng, augment_cfg)
