"""Synthetic head-CT phantoms with planted hyperdense lesions.

Each sub-type lives in its own concentric band of the brain ellipse (and has its
own lesion shape), so labels survive flips and rotations. Lesions are
ellipsoids spanning a contiguous run of slices, which gives the fusion stage an
axial signal to exploit.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .metrics import slice_id, write_predictions_csv
from .numeric import NUM_CLASSES
from .sampler import CtStudy, block_indices, write_manifest, write_volume

# sub-type index -> (inner radius, outer radius, tangential/radial aspect, radial size in brain radii)
SUBTYPE_BANDS = {
    1: (0.30, 0.50, 1.0, 0.22),  # intraparenchymal: round blob, mid brain
    2: (0.00, 0.12, 1.0, 0.18),  # intraventricular: small, inside the ventricles
    3: (0.55, 0.62, 2.5, 0.09),  # subarachnoid: thin streak
    4: (0.72, 0.80, 3.0, 0.10),  # subdural: long crescent-like sliver
    5: (0.86, 0.94, 1.8, 0.15),  # extradural: lens against the skull
}


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 32
    slices: tuple[int, int] = (20, 28)  # inclusive range of slice counts
    brain_hu: float = 35.0
    brain_sigma: float = 5.0
    csf_hu: float = 8.0
    skull_hu: float = 1000.0
    lesion_hu: tuple[float, float] = (60.0, 90.0)
    lesion_count_weights: tuple[float, ...] = (0.2, 0.3, 0.3, 0.2)  # P(0..3 lesions)
    lesion_z_half: tuple[float, float] = (1.5, 4.0)  # slices
    area_threshold: int = 4  # pixels
    slope: float = 1.0
    intercept: float = -1024.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigError(f"synth.image_size must be >= 16, got {self.image_size}")
        lo, hi = self.slices
        if not 1 <= lo <= hi:
            raise ConfigError(f"synth.slices must satisfy 1 <= lo <= hi, got {self.slices}")
        if self.lesion_hu[0] <= self.brain_hu + 3 * self.brain_sigma:
            raise ConfigError("synth.lesion_hu must start above brain_hu + 3*brain_sigma")
        if self.lesion_hu[0] > self.lesion_hu[1]:
            raise ConfigError(f"synth.lesion_hu is not an interval: {self.lesion_hu}")
        w = np.asarray(self.lesion_count_weights, dtype=float)
        if w.size == 0 or np.any(w < 0) or not w.sum() > 0:
            raise ConfigError("synth.lesion_count_weights must be non-negative with a positive sum")
        if self.slope == 0:
            raise ConfigError("synth.slope must be non-zero")
        if self.area_threshold < 1:
            raise ConfigError("synth.area_threshold must be >= 1")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class Lesion:
    subtype: int  # 1..5, column in the label vector
    center: tuple[float, float]  # (y, x) pixels
    radii: tuple[float, float]  # semi-axes (along angle, across) in pixels
    angle: float  # radians
    z_center: float
    z_half: float
    hu: float


@dataclass
class _Geometry:
    yy: np.ndarray
    xx: np.ndarray
    brain: np.ndarray
    skull: np.ndarray
    ventricles: np.ndarray
    cy: float
    cx: float
    ry: float
    rx: float


def _geometry(size: int) -> _Geometry:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = cx = (size - 1) / 2.0
    ry, rx = 0.40 * size, 0.34 * size
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    brain = r <= 1.0
    skull = (r > 1.0) & (r <= 1.0 + 2.0 / (0.34 * size))
    ventricles = np.sqrt(((yy - cy) / (0.2 * ry)) ** 2 + ((xx - cx) / (0.12 * rx)) ** 2) <= 1.0
    return _Geometry(yy, xx, brain, skull, ventricles, cy, cx, ry, rx)


def lesion_mask(lesion: Lesion, z: int, geo: _Geometry) -> np.ndarray:
    dz = (z - lesion.z_center) / lesion.z_half
    if abs(dz) >= 1.0:
        return np.zeros_like(geo.brain)
    s = math.sqrt(1.0 - dz * dz)
    dy, dx = geo.yy - lesion.center[0], geo.xx - lesion.center[1]
    ca, sa = math.cos(lesion.angle), math.sin(lesion.angle)
    u = dy * ca - dx * sa  # tangential
    v = dy * sa + dx * ca  # radial
    inside = (u / (lesion.radii[0] * s)) ** 2 + (v / (lesion.radii[1] * s)) ** 2 <= 1.0
    return inside & geo.brain


def random_lesion(rng: np.random.Generator, cfg: PhantomConfig, n_slices: int, geo: _Geometry) -> Lesion:
    subtype = int(rng.integers(1, NUM_CLASSES))
    r_in, r_out, aspect, size = SUBTYPE_BANDS[subtype]
    r = rng.uniform(r_in, r_out)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    cy = geo.cy + r * geo.ry * math.sin(phi)
    cx = geo.cx + r * geo.rx * math.cos(phi)
    radial = max(size * geo.rx * rng.uniform(0.9, 1.2), 1.2)
    # the long axis runs tangentially: perpendicular to the radius direction
    return Lesion(
        subtype=subtype,
        center=(cy, cx),
        radii=(radial * aspect, radial),
        angle=phi,
        z_center=float(rng.uniform(0, n_slices - 1)),
        z_half=float(rng.uniform(*cfg.lesion_z_half)),
        hu=float(rng.uniform(*cfg.lesion_hu)),
    )


def generate_study(
    rng: np.random.Generator,
    cfg: PhantomConfig,
    study_id: str = "study",
    lesions: list[Lesion] | None = None,
    n_slices: int | None = None,
) -> CtStudy:
    """Render one phantom. ``lesions``/``n_slices`` override the random draws."""
    size = cfg.image_size
    geo = _geometry(size)
    if n_slices is None:
        n_slices = int(rng.integers(cfg.slices[0], cfg.slices[1] + 1))
    if lesions is None:
        w = np.asarray(cfg.lesion_count_weights, dtype=float)
        count = int(rng.choice(w.size, p=w / w.sum()))
        lesions = [random_lesion(rng, cfg, n_slices, geo) for _ in range(count)]
    hu = np.full((n_slices, size, size), -1024.0)
    labels = np.zeros((n_slices, NUM_CLASSES))
    for z in range(n_slices):
        sl = hu[z]
        sl[geo.skull] = cfg.skull_hu + rng.normal(0.0, 20.0, size=int(geo.skull.sum()))
        sl[geo.brain] = cfg.brain_hu + rng.normal(0.0, cfg.brain_sigma, size=int(geo.brain.sum()))
        sl[geo.ventricles] = cfg.csf_hu + rng.normal(0.0, cfg.brain_sigma, size=int(geo.ventricles.sum()))
        for les in lesions:
            m = lesion_mask(les, z, geo)
            if m.any():
                sl[m] = les.hu + rng.normal(0.0, cfg.brain_sigma, size=int(m.sum()))
            if m.sum() >= cfg.area_threshold:
                labels[z, les.subtype] = 1.0
    labels[:, 0] = labels[:, 1:].max(axis=1)
    # quantise through the stored-pixel representation so files and memory agree
    raw = np.clip(np.round((hu - cfg.intercept) / cfg.slope), -32768, 32767)
    hu = raw * cfg.slope + cfg.intercept
    return CtStudy(study_id, hu, labels, cfg.slope, cfg.intercept)


def stored_pixels(study: CtStudy) -> np.ndarray:
    return np.round((study.hu - study.intercept) / study.slope).astype(np.int16)


def study_seeds(cfg: PhantomConfig, n_studies: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(cfg.seed).spawn(n_studies)


def generate_studies(cfg: PhantomConfig, n_studies: int, prefix: str = "study") -> list[CtStudy]:
    return [
        generate_study(np.random.default_rng(ss), cfg, f"{prefix}{k:04d}")
        for k, ss in enumerate(study_seeds(cfg, n_studies))
    ]


def split_counts(n: int, fractions) -> list[int]:
    f = np.asarray(fractions, dtype=float)
    if f.size == 0 or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {list(fractions)}")
    raw = f * n
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def split_names(k: int) -> list[str]:
    return {1: ["train"], 2: ["train", "test"], 3: ["train", "val", "test"]}.get(k, [f"split{i}" for i in range(k)])


def labels_by_id(studies) -> dict[str, np.ndarray]:
    rows = {}
    for st in studies:
        for z in range(st.n_slices):
            rows[slice_id(st.study_id, z)] = st.labels[z]
    return rows


def generate_dataset(cfg: PhantomConfig, n_studies: int, fractions=(0.8, 0.2), out_dir=".") -> dict:
    """Write CTV1 volumes, one manifest and one labels CSV per split.

    Returns a summary ``{split: {"manifest", "labels", "studies", "slices"}}``.
    """
    out = Path(out_dir)
    counts = split_counts(n_studies, fractions)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    studies = generate_studies(cfg, n_studies)
    summary, start = {}, 0
    for name, count in zip(split_names(len(counts)), counts):
        part = studies[start : start + count]
        start += count
        rows = []
        for st in part:
            rel = f"volumes/{st.study_id}.ctv"
            write_volume(out / rel, stored_pixels(st))
            rows.append(
                {
                    "study_id": st.study_id,
                    "volume_file": rel,
                    "slope": st.slope,
                    "intercept": st.intercept,
                    "labels": st.labels.astype(int).tolist(),
                }
            )
        manifest = out / f"manifest_{name}.json"
        labels_csv = out / f"labels_{name}.csv"
        write_manifest(manifest, rows)
        write_predictions_csv(labels_csv, {k: v.astype(int) for k, v in labels_by_id(part).items()})
        summary[name] = {
            "manifest": str(manifest),
            "labels": str(labels_csv),
            "studies": len(part),
            "slices": int(sum(s.n_slices for s in part)),
        }
    (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return summary


# ---------------------------------------------------------------- descriptor-level synthetic data


@dataclass(frozen=True)
class NeighborConsistencyConfig:
    """Descriptor dataset whose labels are the block majority of a sticky latent sequence."""

    n_studies: int = 60
    slices: tuple[int, int] = (20, 40)
    onset_p: float = 0.08  # per-slice chance a lesion run starts
    mean_run: float = 6.0
    logit_scale: float = 2.0
    noise: float = 1.5  # std of independent logit noise per descriptor entry
    seed: int = 0


def neighbor_consistency_dataset(cfg: NeighborConsistencyConfig, seed: int | None = None):
    """``(descriptors, labels)`` dicts keyed by study id.

    Each sub-type has a latent on/off sequence with runs; the slice label is the
    majority of the latent over its 7-slice block and "any" is the OR of the
    sub-types. Descriptors are the latent pushed through noisy logits, so the
    centre descriptor alone is a corrupted guess that neighbours can correct.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    descriptors, labels = {}, {}
    for k in range(cfg.n_studies):
        n = int(rng.integers(cfg.slices[0], cfg.slices[1] + 1))
        latent = np.zeros((n, NUM_CLASSES))
        for c in range(1, NUM_CLASSES):
            on = False
            for z in range(n):
                on = (rng.random() >= 1.0 / cfg.mean_run) if on else (rng.random() < cfg.onset_p)
                latent[z, c] = on
        latent[:, 0] = latent[:, 1:].max(axis=1)
        lab = np.zeros_like(latent)
        for z in range(n):
            idx = list(block_indices(n, z))
            lab[z, 1:] = latent[idx, 1:].sum(axis=0) >= 4
        lab[:, 0] = lab[:, 1:].max(axis=1)
        logits = cfg.logit_scale * (2.0 * latent - 1.0) + rng.normal(0.0, cfg.noise, size=latent.shape)
        descriptors[f"nc{k:04d}"] = 1.0 / (1.0 + np.exp(-logits))
        labels[f"nc{k:04d}"] = lab
    return descriptors, labels
