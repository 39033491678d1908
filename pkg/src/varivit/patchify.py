"""Fixed-size patch extraction and the linear patch embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int = 16
    embed_dim: int = 384
    in_channels: int = 4

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch size must be >= 1")
        if self.embed_dim % 6:
            raise ValueError("embed_dim must be divisible by 6")

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 3


@dataclass
class TokenSequence:
    tokens: np.ndarray  # [N + 1, d], CLS first
    grid: tuple[int, int, int]
    sample_id: int = -1

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[0] - 1


def grid_shape(spatial, patch_size: int) -> tuple[int, int, int]:
    bad = [s for s in spatial if s % patch_size]
    if bad:
        raise ValueError(f"spatial dims {tuple(spatial)} not divisible by patch size {patch_size}")
    return tuple(s // patch_size for s in spatial)


def num_patches(edge: int, patch_size: int) -> int:
    return grid_shape((edge,) * 3, patch_size)[0] ** 3


def extract_patches(voxels: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``[C, D, H, W]`` into ``[N, C*P^3]`` non-overlapping patches.

    Patches run row-major over the (l, h, w) patch grid; each row is
    channel-major, then voxel row-major within the patch.
    """
    c = voxels.shape[0]
    gl, gh, gw = grid_shape(voxels.shape[1:], patch_size)
    p = patch_size
    x = voxels.reshape(c, gl, p, gh, p, gw, p)
    x = x.transpose(1, 3, 5, 0, 2, 4, 6)
    return x.reshape(gl * gh * gw, c * p ** 3)


def reassemble(patches: np.ndarray, grid, patch_size: int, in_channels: int) -> np.ndarray:
    """Inverse of :func:`extract_patches`."""
    gl, gh, gw = grid
    p = patch_size
    x = patches.reshape(gl, gh, gw, in_channels, p, p, p)
    x = x.transpose(3, 0, 4, 1, 5, 2, 6)
    return x.reshape(in_channels, gl * p, gh * p, gw * p)


def embed(patches, w, b, cls, grid=None, sample_id=-1) -> TokenSequence:
    """Project patches and prepend the CLS token."""
    if patches.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0] or cls.shape != b.shape:
        raise ValueError(f"embed: shapes disagree {patches.shape}, {w.shape}, {b.shape}, {cls.shape}")
    tok = patches @ w + b
    tokens = np.concatenate([cls[None, :].astype(tok.dtype), tok], axis=0)
    return TokenSequence(tokens, tuple(grid) if grid is not None else (len(patches), 1, 1), sample_id)


def embed_backward(dtokens, patches, w):
    """Gradients of :func:`embed` (works on batched ``[..., N+1, d]`` inputs).

    Returns ``(dpatches, dw, db, dcls)``.
    """
    dtok = dtokens[..., 1:, :]
    d = w.shape[1]
    dcls = dtokens[..., 0, :].reshape(-1, d).sum(axis=0)
    db = dtok.reshape(-1, d).sum(axis=0)
    dw = patches.reshape(-1, w.shape[0]).T @ dtok.reshape(-1, d)
    dpatches = dtok @ w.T
    return dpatches, dw, db, dcls
