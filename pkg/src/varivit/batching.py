"""Epoch plans for variable-size data.

``plan_cbs`` groups same-size samples into batches and shuffles the batch
order; ``plan_ga`` yields singleton mini-batches and updates every ``B`` of
them; ``plan_pad_to_max`` is the fixed-size baseline where every volume is
zero-padded to the largest crop.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Rng
from .patchify import num_patches

CBS = "cbs"
GA = "ga"
PAD = "pad_to_max"
MODES = (CBS, GA, PAD)
MODE_ALIASES = {"cbs": CBS, "ga": GA, "pad": PAD, "pad_to_max": PAD}


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[tuple[int, ...], ...]
    mode: str
    batch_size: int
    update_interval: int = 1
    seed: int = 0

    def update_groups(self) -> list[list[tuple[int, ...]]]:
        """Mini-batches between consecutive optimizer steps."""
        k = self.update_interval
        return [list(self.batches[i:i + k]) for i in range(0, len(self.batches), k)]

    def indices(self) -> list[int]:
        return [i for b in self.batches for i in b]

    def to_text(self) -> str:
        head = f"# mode={self.mode} batch_size={self.batch_size} update_interval={self.update_interval} seed={self.seed}\n"
        return head + "".join(" ".join(map(str, b)) + "\n" for b in self.batches)

    @classmethod
    def from_text(cls, text: str) -> "BatchPlan":
        meta, batches = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                meta.update(kv.split("=", 1) for kv in line[1:].split())
            elif line.strip():
                batches.append(tuple(int(i) for i in line.split()))
        return cls(tuple(batches), meta.get("mode", CBS), int(meta.get("batch_size", 1)),
                   int(meta.get("update_interval", 1)), int(meta.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _edges(manifest) -> list[int]:
    if hasattr(manifest, "edges"):
        return list(manifest.edges)
    return [v.edge if hasattr(v, "edge") else int(v) for v in manifest]


def _check(edges, batch_size):
    if not edges:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")


def plan_cbs(manifest, batch_size: int, rng: Rng) -> BatchPlan:
    """Size-homogeneous batches in random order.

    ``manifest`` is anything exposing per-sample crop edges: a
    :class:`~varivit.data.DatasetManifest`, a list of volumes, or a list of
    edges. Remainders of each size group form smaller batches.
    """
    edges = _edges(manifest)
    _check(edges, batch_size)
    groups = defaultdict(list)
    for i, e in enumerate(edges):
        groups[e].append(i)
    batches = []
    for e in sorted(groups):
        idx = rng.gen.permutation(groups[e])
        batches += [tuple(int(i) for i in idx[s:s + batch_size]) for s in range(0, len(idx), batch_size)]
    order = rng.gen.permutation(len(batches))
    return BatchPlan(tuple(batches[o] for o in order), CBS, batch_size, 1, rng.seed)


def plan_ga(manifest, batch_size: int, rng: Rng) -> BatchPlan:
    """Shuffled singleton mini-batches; one update per ``batch_size`` of them."""
    edges = _edges(manifest)
    _check(edges, batch_size)
    order = rng.gen.permutation(len(edges))
    return BatchPlan(tuple((int(i),) for i in order), GA, batch_size, batch_size, rng.seed)


def plan_pad_to_max(manifest, batch_size: int, rng: Rng) -> BatchPlan:
    edges = _edges(manifest)
    _check(edges, batch_size)
    order = [int(i) for i in rng.gen.permutation(len(edges))]
    batches = tuple(tuple(order[s:s + batch_size]) for s in range(0, len(order), batch_size))
    return BatchPlan(batches, PAD, batch_size, 1, rng.seed)


PLANNERS = {CBS: plan_cbs, GA: plan_ga, PAD: plan_pad_to_max}


def make_plan(mode: str, manifest, batch_size: int, rng: Rng) -> BatchPlan:
    return PLANNERS[MODE_ALIASES[mode]](manifest, batch_size, rng)


def pad_to_edge(voxels: np.ndarray, edge: int) -> np.ndarray:
    """Zero-pad ``[C, D, H, W]`` symmetrically to ``edge`` per spatial axis.

    Odd padding puts the extra voxel after the volume.
    """
    spatial = voxels.shape[1:]
    if any(s > edge for s in spatial):
        raise ValueError(f"volume {spatial} larger than pad target {edge}")
    if all(s == edge for s in spatial):
        return voxels
    pads = [(0, 0)] + [((edge - s) // 2, edge - s - (edge - s) // 2) for s in spatial]
    return np.pad(voxels, pads)


def token_cost(plan: BatchPlan, manifest, patch_size: int) -> tuple[int, int]:
    """Patch tokens and attention pairs per layer summed over the plan.

    CLS is not counted. Pad-to-max plans cost every sample at the largest edge.
    """
    edges = _edges(manifest)
    emax = max(edges)
    tokens = pairs = 0
    for i in plan.indices():
        n = num_patches(emax if plan.mode == PAD else edges[i], patch_size)
        tokens += n
        pairs += n * n
    return tokens, pairs
