"""Positional embeddings for variable-size patch grids.

A master grid is built once for the largest image. Smaller grids get their
embeddings either by selecting the centered sub-block of the master
(:func:`center_and_select`), by trilinear resizing (:func:`interp_resize`),
or from a grid built for their own size (:func:`build_independent`).
:class:`RelPosBias` is the relative alternative: a learnable table of
per-head attention biases indexed by the 3D offset between two patches.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Rng, write_tensor

SINUSOIDAL = "sinusoidal_fixed"
LEARNED = "learned"


@dataclass
class PosEmbedGrid:
    grid: np.ndarray  # [G_l, G_h, G_w, d]
    kind: str = SINUSOIDAL

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.grid.shape[:3])

    @property
    def dim(self) -> int:
        return self.grid.shape[3]

    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1, self.dim)


def sinusoidal_1d(pos: int, d_axis: int) -> np.ndarray:
    """1D sinusoidal code of length ``d_axis``.

    Even slots hold ``sin(pos / 10000**(2i/d))``; odd slots hold
    ``cos(pos / 10000**((2i+1)/d))``.
    """
    if d_axis % 2:
        raise ValueError(f"d_axis must be even, got {d_axis}")
    return _sinusoid_table(np.array([pos]), d_axis)[0]


def _sinusoid_table(pos: np.ndarray, d_axis: int) -> np.ndarray:
    half = np.arange(d_axis // 2, dtype=np.float64)
    even = 2 * half
    p = pos.astype(np.float64)[:, None]
    out = np.empty((len(pos), d_axis), np.float64)
    out[:, 0::2] = np.sin(p / 10000.0 ** (even / d_axis))
    out[:, 1::2] = np.cos(p / 10000.0 ** ((even + 1) / d_axis))
    return out


def build_sinusoidal_3d(grid, d: int, dtype=np.float32) -> PosEmbedGrid:
    """Concatenate per-axis codes of width ``d/3`` for every (l, h, w)."""
    if d % 6:
        raise ValueError(f"embedding dim must be divisible by 6, got {d}")
    gl, gh, gw = grid
    da = d // 3
    tl = _sinusoid_table(np.arange(gl), da)
    th = _sinusoid_table(np.arange(gh), da)
    tw = _sinusoid_table(np.arange(gw), da)
    out = np.empty((gl, gh, gw, d), np.float64)
    out[..., :da] = tl[:, None, None, :]
    out[..., da:2 * da] = th[None, :, None, :]
    out[..., 2 * da:] = tw[None, None, :, :]
    return PosEmbedGrid(out.astype(dtype), SINUSOIDAL)


def build_learned(grid, d: int, rng: Rng, dtype=np.float32) -> PosEmbedGrid:
    return PosEmbedGrid(rng.trunc_normal(tuple(grid) + (d,), 0.02, dtype), LEARNED)


def center(grid) -> tuple[int, int, int]:
    return tuple(g // 2 for g in grid)


def select_ranges(master_shape, sub) -> list[tuple[int, int]]:
    """Per-axis ``[start, end)`` of the centered sub-block."""
    if len(sub) != len(master_shape):
        raise ValueError("sub grid rank differs from master")
    out = []
    for g, gs, c in zip(master_shape, sub, center(master_shape)):
        if gs > g or gs < 1:
            raise ValueError(f"sub grid {tuple(sub)} does not fit in master {tuple(master_shape)}")
        start = c - gs // 2
        out.append((start, start + gs))
    return out


def center_and_select(master: PosEmbedGrid | np.ndarray, sub) -> np.ndarray:
    """Centered sub-block of the master grid, flattened to ``[N', d]``.

    Pure indexing: every returned row is a row of the master.
    """
    g = master.grid if isinstance(master, PosEmbedGrid) else master
    (a, b), (c, e), (f, h) = select_ranges(g.shape[:3], sub)
    return g[a:b, c:e, f:h].reshape(-1, g.shape[3])


def select_backward(dpos: np.ndarray, master_shape, sub) -> np.ndarray:
    """Scatter a ``[N', d]`` gradient back into a zero master-shaped array."""
    out = np.zeros(tuple(master_shape[:3]) + (dpos.shape[-1],), dpos.dtype)
    (a, b), (c, e), (f, h) = select_ranges(master_shape[:3], sub)
    out[a:b, c:e, f:h] = dpos.reshape(b - a, e - c, h - f, -1)
    return out


def linear_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` weights of 1D linear interpolation, endpoints aligned."""
    m = np.zeros((n_out, n_in), np.float64)
    if n_out == 1 or n_in == 1:
        # a single sample sits at the first coordinate
        m[:, 0] = 1.0
        return m
    x = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(x).astype(int), n_in - 2)
    t = x - i0
    m[np.arange(n_out), i0] = 1.0 - t
    m[np.arange(n_out), i0 + 1] += t
    return m


def _resize_mats(master_shape, sub, dtype):
    return [linear_resize_matrix(g, s).astype(dtype) for g, s in zip(master_shape[:3], sub)]


def interp_resize(master: PosEmbedGrid | np.ndarray, sub) -> np.ndarray:
    """Trilinear resize of the master grid to ``sub``, flattened to ``[N', d]``."""
    g = master.grid if isinstance(master, PosEmbedGrid) else master
    if any(s < 1 for s in sub):
        raise ValueError(f"sub grid extents must be >= 1: {tuple(sub)}")
    if tuple(sub) == g.shape[:3]:
        return g.reshape(-1, g.shape[3]).copy()
    ml, mh, mw = _resize_mats(g.shape, sub, g.dtype)
    out = np.einsum("al,lhwd->ahwd", ml, g)
    out = np.einsum("bh,ahwd->abwd", mh, out)
    out = np.einsum("cw,abwd->abcd", mw, out)
    return out.reshape(-1, g.shape[3])


def interp_backward(dpos: np.ndarray, master_shape, sub) -> np.ndarray:
    """Gradient of :func:`interp_resize` with respect to the master grid."""
    d = dpos.shape[-1]
    if tuple(sub) == tuple(master_shape[:3]):
        return dpos.reshape(tuple(sub) + (d,)).copy()
    ml, mh, mw = _resize_mats(master_shape, sub, dpos.dtype)
    g = dpos.reshape(tuple(sub) + (d,))
    g = np.einsum("cw,abcd->abwd", mw, g)
    g = np.einsum("bh,abwd->ahwd", mh, g)
    return np.einsum("al,ahwd->lhwd", ml, g)


def build_independent(grids, d: int, dtype=np.float32) -> dict[tuple[int, int, int], PosEmbedGrid]:
    return {tuple(g): build_sinusoidal_3d(g, d, dtype) for g in dict.fromkeys(map(tuple, grids))}


# ---------------------------------------------------------------------------
# relative bias


@dataclass
class RelPosBias:
    table: np.ndarray  # [heads, (2M_l-1)(2M_h-1)(2M_w-1)]
    max_grid: tuple[int, int, int]

    @classmethod
    def zeros(cls, heads, max_grid, dtype=np.float32):
        return cls(np.zeros((heads, table_size(max_grid)), dtype), tuple(max_grid))

    @classmethod
    def init(cls, heads, max_grid, rng: Rng, dtype=np.float32):
        return cls(rng.trunc_normal((heads, table_size(max_grid)), 0.02, dtype), tuple(max_grid))


def table_size(max_grid) -> int:
    return int(np.prod([2 * m - 1 for m in max_grid]))


def rel_index(grid, max_grid) -> np.ndarray:
    """``[N, N]`` table index of the offset from patch q to patch p."""
    if any(g > m for g, m in zip(grid, max_grid)):
        raise ValueError(f"grid {tuple(grid)} exceeds bias table capacity {tuple(max_grid)}")
    coords = np.stack(np.meshgrid(*[np.arange(g) for g in grid], indexing="ij"), -1).reshape(-1, 3)
    off = coords[:, None, :] - coords[None, :, :] + (np.asarray(max_grid) - 1)
    span = 2 * np.asarray(max_grid) - 1
    return (off[..., 0] * span[1] + off[..., 1]) * span[2] + off[..., 2]


def rel_bias_lookup(bias: RelPosBias | np.ndarray, grid, max_grid=None) -> np.ndarray:
    """``[heads, N, N]`` bias for patch pairs of ``grid`` (CLS not included)."""
    if isinstance(bias, RelPosBias):
        table, max_grid = bias.table, bias.max_grid
    else:
        table = bias
    idx = rel_index(grid, max_grid)
    return table[:, idx]


def rel_bias_backward(dbias: np.ndarray, grid, max_grid, table_len: int) -> np.ndarray:
    """Accumulate a ``[heads, N, N]`` gradient into table slots."""
    idx = rel_index(grid, max_grid).ravel()
    heads = dbias.shape[0]
    out = np.zeros((heads, table_len), dbias.dtype)
    for h in range(heads):
        out[h] = np.bincount(idx, weights=dbias[h].ravel(), minlength=table_len)
    return out


# ---------------------------------------------------------------------------
# similarity maps


def cosine_similarity_map(grid: PosEmbedGrid | np.ndarray, anchor) -> np.ndarray:
    g = grid.grid if isinstance(grid, PosEmbedGrid) else grid
    a = g[tuple(anchor)].astype(np.float64)
    flat = g.reshape(-1, g.shape[-1]).astype(np.float64)
    sim = flat @ a / (np.linalg.norm(flat, axis=1) * np.linalg.norm(a))
    sim = np.clip(sim, -1.0, 1.0).reshape(g.shape[:3])
    sim[tuple(anchor)] = 1.0
    return sim


def export_similarity(grid: PosEmbedGrid | np.ndarray, anchor, out_prefix) -> np.ndarray:
    """Write the similarity map as ``<prefix>.vvt`` and ``<prefix>.csv``."""
    sim = cosine_similarity_map(grid, anchor)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(out_prefix.with_suffix(".vvt"), sim)
    with open(out_prefix.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["l", "h", "w", "value"])
        for (l, h, x), v in np.ndenumerate(sim):
            w.writerow([l, h, x, repr(float(v))])
    return sim
