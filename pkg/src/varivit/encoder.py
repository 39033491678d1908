"""Pre-norm transformer encoder over variable-length patch sequences.

One parameter set serves every grid size: only activation shapes depend on
the number of patches. The backward pass is written out by hand, layer by
layer, against the cache returned by :meth:`VariViT.forward`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import posemb
from .numerics import (
    Rng,
    gelu,
    gelu_backward,
    layernorm,
    layernorm_backward,
    read_tensor,
    softmax_backward,
    softmax_rows,
    write_tensor,
)
from .patchify import embed_backward

CENTER_SELECT = "center_select"
INDEP_FIXED = "indep_fixed"
INTERP_FIXED = "interp_fixed"
INTERP_LEARNED = "interp_learned"
RELATIVE = "relative"
STRATEGIES = (CENTER_SELECT, INDEP_FIXED, INTERP_FIXED, INTERP_LEARNED, RELATIVE)
ABSOLUTE_STRATEGIES = STRATEGIES[:4]


@dataclass
class ModelConfig:
    depth: int = 12
    embed_dim: int = 384
    heads: int = 6
    mlp_ratio: int = 4
    num_classes: int = 2
    patch_size: int = 16
    in_channels: int = 4
    max_image_edge: int = 96
    posemb: str = CENTER_SELECT

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.posemb != RELATIVE and self.embed_dim % 6:
            raise ValueError("embed_dim must be divisible by 6 for 3D sinusoids")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.posemb not in STRATEGIES:
            raise ValueError(f"unknown positional strategy {self.posemb!r}; choose from {STRATEGIES}")
        if self.max_image_edge % self.patch_size:
            raise ValueError("max_image_edge must be a multiple of patch_size")

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        return cls(**{**dict(depth=12, embed_dim=384, heads=6, patch_size=16, max_image_edge=96), **kw})

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        return cls(**{**dict(depth=2, embed_dim=24, heads=2, patch_size=8, max_image_edge=32), **kw})

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def max_grid(self) -> tuple[int, int, int]:
        return (self.max_image_edge // self.patch_size,) * 3

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 3

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            k = k.strip()
            if k not in types:
                raise ValueError(f"unknown config key {k!r}")
            kw[k] = v.strip() if types[k] in ("str", str) else int(v)
        return cls(**kw)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hid = cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim
    shapes = {"patch.w": (cfg.patch_dim, d), "patch.b": (d,), "cls": (d,)}
    if cfg.posemb == INTERP_LEARNED:
        shapes["pos"] = cfg.max_grid + (d,)
    if cfg.posemb == RELATIVE:
        shapes["rel.table"] = (cfg.heads, posemb.table_size(cfg.max_grid))
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "w1": (d, hid), p + "b1": (hid,),
            p + "w2": (hid, d), p + "b2": (d,),
        })
    shapes["head.w"] = (d, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, rng: Rng, dtype=np.float32) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape, dtype)
        elif len(shape) == 1 and name != "cls":
            params[name] = np.zeros(shape, dtype)
        else:
            params[name] = rng.child(len(params)).trunc_normal(shape, 0.02, dtype)
    return params


class VariViT:
    """Encoder plus linear head on the final CLS token.

    ``forward`` takes a batch of same-size samples as ``[B, N, C*P^3]``
    patches together with their patch grid.
    """

    def __init__(self, cfg: ModelConfig, params=None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, Rng(seed), dtype)
        self.dtype = self.params["cls"].dtype
        if cfg.posemb in (CENTER_SELECT, INTERP_FIXED):
            self.master = posemb.build_sinusoidal_3d(cfg.max_grid, cfg.embed_dim, self.dtype)
        self._indep: dict = {}

    # -- positions -----------------------------------------------------------

    def positions(self, grid) -> np.ndarray | None:
        """Absolute ``[N, d]`` embedding for ``grid`` (None for relative)."""
        s = self.cfg.posemb
        grid = tuple(grid)
        if s == CENTER_SELECT:
            return posemb.center_and_select(self.master, grid)
        if s == INTERP_FIXED:
            return posemb.interp_resize(self.master, grid)
        if s == INTERP_LEARNED:
            return posemb.interp_resize(self.params["pos"], grid)
        if s == INDEP_FIXED:
            if grid not in self._indep:
                self._indep.update(posemb.build_independent([grid], self.cfg.embed_dim, self.dtype))
            return self._indep[grid].flat()
        return None

    def relative_bias(self, grid) -> np.ndarray:
        """``[heads, N+1, N+1]`` bias with zeros on CLS rows and columns."""
        n = int(np.prod(grid))
        out = np.zeros((self.cfg.heads, n + 1, n + 1), self.dtype)
        out[:, 1:, 1:] = posemb.rel_bias_lookup(self.params["rel.table"], grid, self.cfg.max_grid)
        return out

    # -- forward ---------------------------------------------------------------

    def forward(self, patches: np.ndarray, grid):
        cfg, p = self.cfg, self.params
        if patches.ndim == 2:
            patches = patches[None]
        patches = patches.astype(self.dtype, copy=False)
        bsz, n, _ = patches.shape
        grid = tuple(grid)
        if n != int(np.prod(grid)):
            raise ValueError(f"{n} patches do not match grid {grid}")
        d, nh, dh = cfg.embed_dim, cfg.heads, cfg.head_dim
        t = n + 1

        tok = patches @ p["patch.w"] + p["patch.b"]
        pos = self.positions(grid)
        if pos is not None:
            if pos.shape[0] != n:
                raise ValueError("positional embedding length does not match sequence")
            tok = tok + pos
        x = np.concatenate([np.broadcast_to(p["cls"], (bsz, 1, d)), tok], axis=1)
        bias = self.relative_bias(grid) if cfg.posemb == RELATIVE else None
        scale = 1.0 / np.sqrt(dh)

        blocks = []
        for i in range(cfg.depth):
            q_ = f"blocks.{i}."
            h, ln1 = layernorm(x, p[q_ + "ln1.g"], p[q_ + "ln1.b"])
            q = (h @ p[q_ + "wq"] + p[q_ + "bq"]).reshape(bsz, t, nh, dh).transpose(0, 2, 1, 3)
            k = (h @ p[q_ + "wk"] + p[q_ + "bk"]).reshape(bsz, t, nh, dh).transpose(0, 2, 1, 3)
            v = (h @ p[q_ + "wv"] + p[q_ + "bv"]).reshape(bsz, t, nh, dh).transpose(0, 2, 1, 3)
            s = (q @ k.transpose(0, 1, 3, 2)) * scale
            if bias is not None:
                s = s + bias
            a = softmax_rows(s)
            o = (a @ v).transpose(0, 2, 1, 3).reshape(bsz, t, d)
            x = x + o @ p[q_ + "wo"] + p[q_ + "bo"]
            h2, ln2 = layernorm(x, p[q_ + "ln2.g"], p[q_ + "ln2.b"])
            u = h2 @ p[q_ + "w1"] + p[q_ + "b1"]
            g = gelu(u)
            x = x + g @ p[q_ + "w2"] + p[q_ + "b2"]
            blocks.append(dict(h=h, ln1=ln1, q=q, k=k, v=v, a=a, o=o, h2=h2, ln2=ln2, u=u, g=g))

        feat = x[:, 0]
        logits = feat @ p["head.w"] + p["head.b"]
        cache = dict(patches=patches, grid=grid, blocks=blocks, feat=feat, scale=scale)
        return logits, cache

    def features(self, patches, grid) -> np.ndarray:
        """Final CLS vectors, ``[B, d]``."""
        return self.forward(patches, grid)[1]["feat"]

    # -- backward --------------------------------------------------------------

    def backward(self, cache, dlogits) -> dict[str, np.ndarray]:
        if cache is None or "blocks" not in cache:
            raise ValueError("backward needs the cache from forward")
        cfg, p = self.cfg, self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        dlogits = np.asarray(dlogits, self.dtype)
        if dlogits.ndim == 1:
            dlogits = dlogits[None]
        feat = cache["feat"]
        bsz, d = feat.shape
        nh, dh = cfg.heads, cfg.head_dim
        grid = cache["grid"]
        t = int(np.prod(grid)) + 1
        scale = cache["scale"]

        grads["head.w"] = feat.T @ dlogits
        grads["head.b"] = dlogits.sum(0)
        dx = np.zeros((bsz, t, d), self.dtype)
        dx[:, 0] = dlogits @ p["head.w"].T
        dbias = None
        if cfg.posemb == RELATIVE:
            dbias = np.zeros((nh, t, t), self.dtype)

        for i in reversed(range(cfg.depth)):
            q_ = f"blocks.{i}."
            c = cache["blocks"][i]
            # mlp
            dm = dx
            grads[q_ + "b2"] = dm.reshape(-1, d).sum(0)
            grads[q_ + "w2"] = c["g"].reshape(-1, c["g"].shape[-1]).T @ dm.reshape(-1, d)
            dg = dm @ p[q_ + "w2"].T
            du = gelu_backward(dg, c["u"])
            grads[q_ + "b1"] = du.reshape(-1, du.shape[-1]).sum(0)
            grads[q_ + "w1"] = c["h2"].reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
            dh2 = du @ p[q_ + "w1"].T
            dln, grads[q_ + "ln2.g"], grads[q_ + "ln2.b"] = layernorm_backward(dh2, c["ln2"])
            dx = dx + dln
            # attention
            dy = dx
            grads[q_ + "bo"] = dy.reshape(-1, d).sum(0)
            grads[q_ + "wo"] = c["o"].reshape(-1, d).T @ dy.reshape(-1, d)
            do = (dy @ p[q_ + "wo"].T).reshape(bsz, t, nh, dh).transpose(0, 2, 1, 3)
            da = do @ c["v"].transpose(0, 1, 3, 2)
            dv = c["a"].transpose(0, 1, 3, 2) @ do
            ds = softmax_backward(da, c["a"])
            if dbias is not None:
                dbias += ds.sum(0)
            ds = ds * scale
            dq = ds @ c["k"]
            dk = ds.transpose(0, 1, 3, 2) @ c["q"]
            dhid = np.zeros((bsz, t, d), self.dtype)
            hflat = c["h"].reshape(-1, d)
            for name, dz in (("q", dq), ("k", dk), ("v", dv)):
                dz = dz.transpose(0, 2, 1, 3).reshape(bsz, t, d)
                grads[q_ + "b" + name] = dz.reshape(-1, d).sum(0)
                grads[q_ + "w" + name] = hflat.T @ dz.reshape(-1, d)
                dhid += dz @ p[q_ + "w" + name].T
            dln, grads[q_ + "ln1.g"], grads[q_ + "ln1.b"] = layernorm_backward(dhid, c["ln1"])
            dx = dx + dln

        _, grads["patch.w"], grads["patch.b"], grads["cls"] = embed_backward(
            dx, cache["patches"], p["patch.w"])
        if cfg.posemb == INTERP_LEARNED:
            dpos = dx[:, 1:].sum(0)
            grads["pos"] = posemb.interp_backward(dpos, cfg.max_grid, grid).astype(self.dtype)
        if dbias is not None:
            table = p["rel.table"]
            grads["rel.table"] = posemb.rel_bias_backward(
                dbias[:, 1:, 1:], grid, cfg.max_grid, table.shape[1]).astype(self.dtype)
        return grads

    # -- attention export ------------------------------------------------------

    def attention_map(self, cache, layer: int, head: int, sample: int = 0) -> np.ndarray:
        return cache["blocks"][layer]["a"][sample, head]

    def cls_attention(self, cache, layer: int, sample: int = 0) -> np.ndarray:
        """Head-averaged CLS-to-patch attention reshaped to the patch grid."""
        a = cache["blocks"][layer]["a"][sample].mean(axis=0)
        return a[0, 1:].reshape(cache["grid"])

    # -- checkpoints -----------------------------------------------------------

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(self.cfg.to_text())
        for name, arr in self.params.items():
            write_tensor(out_dir / f"{name}.vvt", arr)

    @classmethod
    def load(cls, ckpt_dir, dtype=np.float32) -> "VariViT":
        ckpt_dir = Path(ckpt_dir)
        cfg = ModelConfig.from_text((ckpt_dir / "config.txt").read_text())
        params = {}
        for name, shape in param_shapes(cfg).items():
            arr = read_tensor(ckpt_dir / f"{name}.vvt")
            if arr.shape != shape:
                raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {shape}")
            params[name] = arr.astype(dtype)
        return cls(cfg, params)


def cache_nbytes(cache) -> int:
    """Bytes held by the arrays in a forward cache."""
    total = cache["patches"].nbytes + cache["feat"].nbytes
    for blk in cache["blocks"]:
        for v in blk.values():
            if isinstance(v, np.ndarray):
                total += v.nbytes
            elif isinstance(v, tuple):
                total += sum(a.nbytes for a in v if isinstance(a, np.ndarray))
    return total
