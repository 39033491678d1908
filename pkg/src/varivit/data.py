"""Synthetic tumor-crop volumes, size bins and on-disk datasets.

Each volume is a 4-channel cube with an ellipsoid "tumor" centered in the
crop over a noisy background. Classes differ in the ellipsoid's axis ratio
and in the radial frequency of its interior texture.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng, read_tensor, write_tensor

IN_CHANNELS = 4
DEFAULT_EDGES = (64, 80, 96)
DEFAULT_THRESHOLDS = (67, 87)
TINY_EDGES = (16, 24, 32)
TINY_PATCH = 8

# per-class ellipsoid axis ratio and texture frequency (cycles per voxel),
# interpolated between these endpoints for more than two classes
ANISOTROPY = (1.0, 1.8)
TEXTURE_FREQ = (0.06, 0.22)
CHANNEL_CONTRAST = (1.0, 0.8, -0.6, 0.5)
BACKGROUND_NOISE = 0.05


@dataclass
class Volume:
    voxels: np.ndarray  # [C, D, H, W]
    label: int
    sample_id: int
    tumor_extent: tuple[int, int, int] | None = None

    @property
    def edge(self) -> int:
        return self.voxels.shape[1]

    @property
    def spatial(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape[1:])


@dataclass(frozen=True)
class SizeBins:
    """Crop edges and the thresholds on the largest tumor dimension.

    A tumor of size ``t`` goes to bin 0 if ``t < thresholds[0]``, to the
    middle bins for ``thresholds[k-1] <= t <= thresholds[k]`` and to the last
    bin above the last threshold.
    """

    edges: tuple[int, ...]
    thresholds: tuple[int, ...]

    def __post_init__(self):
        if len(self.thresholds) != len(self.edges) - 1:
            raise ValueError("need exactly one threshold between consecutive edges")
        if list(self.edges) != sorted(set(self.edges)):
            raise ValueError(f"edges must be strictly increasing: {self.edges}")

    @classmethod
    def for_edges(cls, edges) -> "SizeBins":
        edges = tuple(int(e) for e in edges)
        if edges == DEFAULT_EDGES:
            return DEFAULT_BINS
        # keep every bin's tumors strictly inside its crop
        th = tuple([edges[0] - 1] + [e - 2 for e in edges[1:-1]])
        return cls(edges, th)

    def sample_range(self, k: int) -> tuple[int, int]:
        """Inclusive range of tumor sizes drawn for bin ``k``."""
        hi = self.edges[k] - 2
        if k == 0:
            lo = math.ceil(0.6 * self.edges[0])
        elif k == 1:
            lo = self.thresholds[0]
        else:
            lo = self.thresholds[k - 1] + 1
        return lo, hi


DEFAULT_BINS = SizeBins(DEFAULT_EDGES, DEFAULT_THRESHOLDS)
TINY_BINS = SizeBins.for_edges(TINY_EDGES)


def assign_bin(max_tumor_dim: int, bins: SizeBins = DEFAULT_BINS) -> int:
    """Crop edge for a tumor whose largest dimension is ``max_tumor_dim``."""
    if max_tumor_dim < 1:
        raise ValueError("tumor dimension must be >= 1")
    th = bins.thresholds
    if not th or max_tumor_dim < th[0]:
        return bins.edges[0]
    k = 1
    while k < len(th) and max_tumor_dim > th[k]:
        k += 1
    return bins.edges[k]


def rescale_intensity(v: np.ndarray) -> np.ndarray:
    """Linear map of ``v`` onto [0, 1]; constant input gives zeros."""
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _class_params(label: int, num_classes: int) -> tuple[float, float]:
    t = label / (num_classes - 1) if num_classes > 1 else 0.0
    ratio = ANISOTROPY[0] + t * (ANISOTROPY[1] - ANISOTROPY[0])
    freq = TEXTURE_FREQ[0] + t * (TEXTURE_FREQ[1] - TEXTURE_FREQ[0])
    return ratio, freq


def generate_volume(rng: Rng, label: int, crop_edge: int, patch_size: int = 16,
                    num_classes: int = 2, max_dim: int | None = None,
                    sample_id: int = 0) -> Volume:
    if crop_edge % patch_size:
        raise ValueError(f"crop edge {crop_edge} is not a multiple of patch size {patch_size}")
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} out of range for {num_classes} classes")
    g = rng.gen
    if max_dim is None:
        max_dim = int(g.integers(math.ceil(0.6 * crop_edge), crop_edge - 1))
    max_dim = min(int(max_dim), crop_edge)
    ratio, freq = _class_params(label, num_classes)

    # semi-axes; the long axis is drawn at random for anisotropic classes
    semi = np.full(3, max_dim / 2.0)
    long_axis = int(g.integers(3))
    short = np.ones(3, bool)
    short[long_axis] = False
    semi[short] /= ratio
    extent = tuple(max(1, min(crop_edge, int(round(2 * s)))) for s in semi)

    c = (crop_edge - 1) / 2.0
    ax = np.arange(crop_edge, dtype=np.float32) - c
    zl, zh, zw = np.meshgrid(ax, ax, ax, indexing="ij", sparse=True)
    rho2 = (zl / semi[0]) ** 2 + (zh / semi[1]) ** 2 + (zw / semi[2]) ** 2
    inside = rho2 <= 1.0
    r = np.sqrt(zl * zl + zh * zh + zw * zw)
    texture = 0.3 * np.cos(2 * np.pi * freq * r)
    tumor = np.where(inside, 1.0 + texture, 0.0).astype(np.float32)

    shape = (crop_edge,) * 3
    out = np.empty((IN_CHANNELS,) + shape, np.float32)
    for ch, contrast in enumerate(CHANNEL_CONTRAST):
        bg = 0.3 + BACKGROUND_NOISE * g.standard_normal(shape, dtype=np.float32)
        out[ch] = rescale_intensity(bg + contrast * tumor)
    return Volume(out, int(label), int(sample_id), extent)


def augment(v: Volume, rng: Rng, flip_p: float = 0.5, noise_std: float = 0.01) -> Volume:
    """Random flips of each spatial axis and additive noise, clamped to [0, 1]."""
    g = rng.gen
    x = v.voxels
    flips = tuple(ax for ax in (1, 2, 3) if g.random() < flip_p)
    if flips:
        x = np.flip(x, axis=flips)
    if noise_std > 0:
        x = x + noise_std * g.standard_normal(x.shape, dtype=np.float32)
        np.clip(x, 0.0, 1.0, out=x)
    else:
        x = np.ascontiguousarray(x)
    return Volume(x, v.label, v.sample_id, v.tumor_extent)


def generate_dataset(seed: int, per_bin, bins: SizeBins = DEFAULT_BINS, num_classes: int = 2,
                     patch_size: int = 16, first_id: int = 0) -> list[Volume]:
    """Volumes with ``per_bin[k]`` samples in bin ``k``.

    Labels cycle over the whole sequence so the classes stay balanced. Each
    sample draws from its own stream keyed by its id.
    """
    if isinstance(per_bin, int):
        per_bin = [per_bin] * len(bins.edges)
    if len(per_bin) != len(bins.edges):
        raise ValueError("per_bin length must match the number of bins")
    root = Rng(seed)
    vols = []
    sid = first_id
    for k, count in enumerate(per_bin):
        lo, hi = bins.sample_range(k)
        for _ in range(count):
            rng = root.child(sid)
            tumor = int(rng.gen.integers(lo, hi + 1))
            edge = assign_bin(tumor, bins)
            vols.append(generate_volume(rng, sid % num_classes, edge, patch_size,
                                        num_classes, max_dim=tumor, sample_id=sid))
            sid += 1
    return vols


# ---------------------------------------------------------------------------
# manifest + files


@dataclass
class ManifestRecord:
    sample_id: int
    path: str
    label: int
    crop_edge: int


@dataclass
class DatasetManifest:
    samples: list[ManifestRecord]
    seed: int
    root: Path = field(default=Path("."))

    @property
    def class_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(r.label for r in self.samples).items()))

    @property
    def edges(self) -> list[int]:
        return [r.crop_edge for r in self.samples]

    def __len__(self):
        return len(self.samples)


MANIFEST_NAME = "manifest.tsv"


def write_dataset(volumes, out_dir, seed: int) -> DatasetManifest:
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    records = []
    for v in volumes:
        rel = f"volumes/{v.sample_id:06d}.vvt"
        write_tensor(out_dir / rel, v.voxels)
        records.append(ManifestRecord(v.sample_id, rel, v.label, v.edge))
    if len({r.path for r in records}) != len(records):
        raise ValueError("duplicate sample ids")
    lines = [f"seed={seed}"]
    lines += [f"{r.sample_id}\t{r.path}\t{r.label}\t{r.crop_edge}" for r in records]
    (out_dir / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return DatasetManifest(records, seed, out_dir)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("seed="):
        raise ValueError(f"{path}: missing seed header")
    seed = int(lines[0][5:])
    records = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{n}: expected 4 tab-separated fields")
        sid, rel, label, edge = parts
        records.append(ManifestRecord(int(sid), rel, int(label), int(edge)))
    return DatasetManifest(records, seed, path.parent)


def read_dataset(path) -> tuple[DatasetManifest, list[Volume]]:
    """Load a manifest and all of its volumes (tumor extents are not stored)."""
    man = read_manifest(path)
    vols = []
    for r in man.samples:
        x = read_tensor(man.root / r.path)
        if x.ndim != 4 or x.shape[1:] != (r.crop_edge,) * 3:
            raise ValueError(f"{r.path}: shape {x.shape} does not match crop edge {r.crop_edge}")
        vols.append(Volume(x, r.label, r.sample_id))
    return man, vols
