"""Optimizer, learning-rate schedule, weighted loss, metrics and the epoch loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import batching
from .data import Volume, augment
from .encoder import VariViT
from .numerics import Rng, softmax_rows
from .patchify import extract_patches, grid_shape

NO_DECAY_NAMES = ("cls", "pos", "rel.table")


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 40
    total_epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    noise_std: float = 0.01
    flip_p: float = 0.5

    def __post_init__(self):
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")
        if self.total_epochs < 1 or self.batch_size < 1 or self.base_lr <= 0:
            raise ValueError("total_epochs, batch_size and base_lr must be positive")


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to zero at ``total_epochs``."""
    w, total, base = cfg.warmup_epochs, cfg.total_epochs, cfg.base_lr
    if epoch < w:
        return base * epoch / w
    if total == w:
        return base
    t = min(1.0, (epoch - w) / (total - w))
    return base * 0.5 * (1.0 + math.cos(math.pi * t))


def decays(name: str, value: np.ndarray) -> bool:
    return value.ndim > 1 and name not in NO_DECAY_NAMES


class AdamW:
    """Adam with decoupled weight decay.

    Biases, layernorm affines, the CLS token and positional tables are not
    decayed.
    """

    def __init__(self, params, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr: float) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {k}")
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            if self.m[k].shape != p.shape:
                raise ValueError(f"optimizer state for {k} has shape {self.m[k].shape}, param {p.shape}")
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and decays(k, p):
                p *= 1.0 - lr * self.wd
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# loss


def class_weights(labels, num_classes: int) -> np.ndarray:
    """``total / (K * n_k)`` per class; absent classes get weight 0."""
    counts = np.bincount(np.asarray(labels, int), minlength=num_classes).astype(np.float64)
    w = np.zeros(num_classes)
    nz = counts > 0
    w[nz] = counts.sum() / (num_classes * counts[nz])
    return w


def weighted_ce(logits, label, weights):
    """Weighted cross-entropy and its gradient with respect to the logits.

    Works on one sample (``[K]``, int label) or a batch (``[B, K]``, label
    array); batched losses are returned per sample, unreduced.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(label, int))
    k = lg.shape[1]
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"label out of range for {k} classes")
    w = np.asarray(weights, lg.dtype)[y]
    z = lg - lg.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(y))
    loss = -w * logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad *= w[:, None]
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


# ---------------------------------------------------------------------------
# metrics


def roc_auc(scores, labels) -> float:
    """Binary AUC from the rank-sum statistic, ties get average ranks."""
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels, int)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC is undefined when only one class is present")
    r = rankdata(scores)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def confusion(labels, preds, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), np.int64)
    np.add.at(cm, (np.asarray(labels, int), np.asarray(preds, int)), 1)
    return cm


def f1_from_confusion(cm: np.ndarray) -> float:
    """Positive-class F1 for 2x2 tables, macro F1 otherwise."""
    def f1(k):
        tp = cm[k, k]
        fp = cm[:, k].sum() - tp
        fn = cm[k, :].sum() - tp
        den = 2 * tp + fp + fn
        return 2 * tp / den if den else 0.0
    if cm.shape[0] == 2:
        return float(f1(1))
    return float(np.mean([f1(k) for k in range(cm.shape[0])]))


def mcc_from_confusion(cm: np.ndarray) -> float:
    """Matthews correlation; the K-class form reduces to the usual 2x2 one."""
    cm = cm.astype(np.float64)
    s = cm.sum()
    c = np.trace(cm)
    t = cm.sum(axis=1)
    p = cm.sum(axis=0)
    num = c * s - t @ p
    den = math.sqrt((s * s - p @ p) * (s * s - t @ t))
    return float(num / den) if den else 0.0


def metrics(scores, labels, num_classes: int | None = None) -> dict[str, float]:
    """AUC, F1 and MCC.

    ``scores`` is a 1D array of positive-class probabilities (binary,
    threshold 0.5) or ``[n, K]`` class probabilities (argmax predictions,
    macro one-vs-rest AUC, macro F1, multi-class MCC).
    """
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels, int)
    if scores.ndim == 2 and scores.shape[1] == 2:
        scores = scores[:, 1]
    if scores.ndim == 1:
        preds = (scores >= 0.5).astype(int)
        cm = confusion(labels, preds, 2)
        auc = roc_auc(scores, labels)
    else:
        k = scores.shape[1]
        preds = scores.argmax(axis=1)
        cm = confusion(labels, preds, k)
        auc = float(np.mean([roc_auc(scores[:, j], labels == j) for j in range(k)]))
    return {"auc": auc, "f1": f1_from_confusion(cm), "mcc": mcc_from_confusion(cm),
            "accuracy": float(np.trace(cm) / cm.sum())}


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    auc: float
    f1: float
    mcc: float
    seconds: float
    accuracy: float = float("nan")

    CSV_HEADER = ("epoch", "split", "loss", "auc", "f1", "mcc", "seconds")

    def row(self):
        return [self.epoch, self.split, f"{self.loss:.6f}", f"{self.auc:.6f}",
                f"{self.f1:.6f}", f"{self.mcc:.6f}", f"{self.seconds:.4f}"]


def write_metrics_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsRecord.CSV_HEADER)
        for r in records:
            w.writerow(r.row())


def _summarize(epoch, split, losses, probs, labels, seconds, num_classes) -> MetricsRecord:
    probs = np.concatenate(probs)
    labels = np.asarray(labels)
    try:
        m = metrics(probs, labels, num_classes)
    except ValueError:
        # single-class split: AUC undefined
        preds = probs.argmax(axis=1)
        cm = confusion(labels, preds, probs.shape[1])
        m = {"auc": float("nan"), "f1": f1_from_confusion(cm), "mcc": mcc_from_confusion(cm),
             "accuracy": float(np.trace(cm) / cm.sum())}
    return MetricsRecord(epoch, split, float(np.sum(losses) / len(labels)), m["auc"], m["f1"],
                         m["mcc"], seconds, m["accuracy"])


# ---------------------------------------------------------------------------
# data loading


def load_batch(volumes, idxs, model: VariViT, mode: str, rng: Rng | None = None,
               tcfg: TrainConfig | None = None, pad_edge: int | None = None):
    """Patches ``[B, N, C*P^3]``, grid and labels for one mini-batch.

    With ``rng`` set, each sample is augmented from a stream keyed by its
    sample id. Pad-to-max volumes are padded before augmentation, so the
    baseline processes full-size volumes throughout.
    """
    P = model.cfg.patch_size
    out, labels, grid = [], [], None
    for i in idxs:
        v: Volume = volumes[i]
        if mode == batching.PAD:
            v = Volume(batching.pad_to_edge(v.voxels, pad_edge), v.label, v.sample_id, v.tumor_extent)
        if rng is not None:
            v = augment(v, rng.child(v.sample_id), tcfg.flip_p, tcfg.noise_std)
        g = grid_shape(v.spatial, P)
        if grid is not None and g != grid:
            raise ValueError(f"mixed grid sizes {grid} and {g} in one batch")
        grid = g
        out.append(extract_patches(v.voxels, P))
        labels.append(v.label)
    return np.stack(out), grid, np.asarray(labels)


def evaluate(model: VariViT, volumes, weights, mode: str = batching.CBS, batch_size: int = 32,
             epoch: int = 0, split: str = "test", pad_edge: int | None = None) -> MetricsRecord:
    """Clean (unaugmented) pass; native sizes unless ``mode`` is pad-to-max."""
    t0 = time.perf_counter()
    if pad_edge is None:
        pad_edge = max(v.edge for v in volumes)
    plan = batching.plan_cbs(volumes, batch_size, Rng(0)) if mode != batching.PAD else \
        batching.plan_pad_to_max(volumes, batch_size, Rng(0))
    losses, probs, labels = [], [], []
    for idxs in plan.batches:
        x, grid, y = load_batch(volumes, idxs, model, mode, pad_edge=pad_edge)
        logits, _ = model.forward(x, grid)
        loss, _ = weighted_ce(logits, y, weights)
        losses.append(loss)
        probs.append(softmax_rows(logits.astype(np.float64)))
        labels.extend(y)
    return _summarize(epoch, split, np.concatenate(losses), probs, labels,
                      time.perf_counter() - t0, model.cfg.num_classes)


def predict_features(model: VariViT, volumes, batch_size: int = 32) -> np.ndarray:
    """Final CLS vectors in the order of ``volumes``."""
    out = np.zeros((len(volumes), model.cfg.embed_dim), np.float32)
    plan = batching.plan_cbs(volumes, batch_size, Rng(0))
    for idxs in plan.batches:
        x, grid, _ = load_batch(volumes, idxs, model, batching.CBS)
        out[list(idxs)] = model.features(x, grid)
    return out


# ---------------------------------------------------------------------------
# epoch loop


@dataclass
class StepStats:
    losses: list = field(default_factory=list)
    probs: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    peak_cache_bytes: int = 0


def train_epoch(model: VariViT, opt: AdamW, volumes, plan: batching.BatchPlan, lr: float,
                weights, tcfg: TrainConfig, aug_rng: Rng | None, pad_edge: int) -> StepStats:
    """One pass over ``plan``; optimizer steps follow the plan's update groups.

    The loss of each update is the weighted per-sample loss summed over the
    group and divided by the number of samples in the group, so accumulated
    singleton gradients equal the joint-batch gradient.
    """
    from .encoder import cache_nbytes

    stats = StepStats()
    for group in plan.update_groups():
        count = sum(len(b) for b in group)
        acc = None
        for idxs in group:
            x, grid, y = load_batch(volumes, idxs, model, plan.mode, aug_rng, tcfg, pad_edge)
            logits, cache = model.forward(x, grid)
            stats.peak_cache_bytes = max(stats.peak_cache_bytes, cache_nbytes(cache))
            loss, dlogits = weighted_ce(logits, y, weights)
            g = model.backward(cache, dlogits / count)
            if acc is None:
                acc = g
            else:
                for k in acc:
                    acc[k] += g[k]
            stats.losses.append(loss)
            stats.probs.append(softmax_rows(logits.astype(np.float64)))
            stats.labels.extend(y)
        opt.step(model.params, acc, lr)
    return stats


def train_loop(model: VariViT, train_vols, tcfg: TrainConfig, mode: str = batching.CBS,
               test_vols=None, out_dir=None, log=None) -> list[MetricsRecord]:
    """Train for ``tcfg.total_epochs`` epochs and return per-epoch records.

    Each epoch re-plans batches from an epoch-keyed stream. The learning rate
    is constant within an epoch and read from the schedule at the epoch
    midpoint. Train rows report the running loss and metrics of the training
    pass; their ``seconds`` is the epoch's wall clock including data loading.
    """
    mode = batching.MODE_ALIASES[mode]
    root = Rng(tcfg.seed)
    weights = class_weights([v.label for v in train_vols], model.cfg.num_classes)
    pad_edge = model.cfg.max_image_edge
    opt = AdamW(model.params, tcfg.weight_decay, tcfg.betas, tcfg.eps)
    records = []
    for epoch in range(tcfg.total_epochs):
        t0 = time.perf_counter()
        plan = batching.make_plan(mode, train_vols, tcfg.batch_size, root.child(0, epoch))
        lr = lr_at(epoch + 0.5, tcfg)
        st = train_epoch(model, opt, train_vols, plan, lr, weights, tcfg, root.child(1, epoch), pad_edge)
        rec = _summarize(epoch, "train", np.concatenate(st.losses), st.probs, st.labels,
                         time.perf_counter() - t0, model.cfg.num_classes)
        records.append(rec)
        if test_vols:
            records.append(evaluate(model, test_vols, weights, mode, epoch=epoch, pad_edge=pad_edge))
        if log:
            log(records[-1] if not test_vols else (records[-2], records[-1]))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(records, out_dir / "metrics.csv")
        model.save(out_dir / "checkpoint")
    return records


ABLATION_HEADER = ("strategy", "mode", "split", "accuracy", "auc", "f1", "mcc")


def run_ablation(train_vols, test_vols, mcfg, tcfg: TrainConfig, strategies, mode=batching.CBS,
                 out_csv=None) -> list[tuple]:
    """Train one model per positional strategy and tabulate final test metrics."""
    from dataclasses import replace

    rows = []
    for s in strategies:
        model = VariViT(replace(mcfg, posemb=s), seed=tcfg.seed)
        recs = train_loop(model, train_vols, tcfg, mode, test_vols)
        final = recs[-1]
        rows.append((s, batching.MODE_ALIASES[mode], final.split, final.accuracy, final.auc,
                     final.f1, final.mcc))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ABLATION_HEADER)
            for r in rows:
                w.writerow([r[0], r[1], r[2]] + [f"{x:.6f}" for x in r[3:]])
    return rows
