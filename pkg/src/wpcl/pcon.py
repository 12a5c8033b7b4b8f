"""Partial InfoNCE on the object segment of the head output.

For an item with anchor ``i``, positive ``j`` and negatives ``k_1..k_K``::

    loss = -log( Q(i, j) / (Q(i, j) + sum_k Q(i, k)) ),
    Q(a, b) = exp(cos(h_objs[a], h_objs[b]) / tau)

averaged over items.  Gradients are analytic; the cosine matrix over all
referenced rows is formed once per call.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .optim import SGD, check_finite, grad_norm
from .representation import HeadParams, head_backward, head_forward
from .weaksup import PairSet

log = logging.getLogger(__name__)

EPS = 1e-12


@dataclass(frozen=True)
class PconConfig:
    tau: float = 0.07
    K: int = 8
    learning_rate: float = 0.05
    steps: int = 500
    momentum: float = 0.0
    symmetric: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.K < 0:
            raise ValueError("K must be >= 0")


@dataclass(frozen=True)
class ContrastItem:
    anchor: int
    positive: int
    negatives: tuple[int, ...]

    @property
    def k_eff(self) -> int:
        return len(self.negatives)


@dataclass(frozen=True)
class ContrastBatch:
    items: tuple[ContrastItem, ...]
    K: int = 8


@dataclass
class LossReport:
    loss: float
    grad_norm: float
    pos_cos_mean: float
    neg_cos_mean: float
    n_items: int


def cosine_q(h1: np.ndarray, h2: np.ndarray, tau: float) -> float:
    n1, n2 = float(np.linalg.norm(h1)), float(np.linalg.norm(h2))
    if n1 == 0.0 or n2 == 0.0:
        log.warning("cosine_q on a zero vector; similarity defaults to 0")
    return math.exp(float(np.dot(h1, h2)) / (tau * max(n1, EPS) * max(n2, EPS)))


def _unit_rows(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.maximum(np.linalg.norm(F, axis=1), EPS)
    return F / n[:, None], n


def _index_arrays(batch: ContrastBatch, n_rows: int, symmetric: bool):
    items = list(batch.items)
    if symmetric:
        items += [ContrastItem(it.positive, it.anchor, it.negatives) for it in batch.items]
    kmax = max((it.k_eff for it in items), default=0)
    a = np.array([it.anchor for it in items], dtype=np.int64)
    p = np.array([it.positive for it in items], dtype=np.int64)
    negs = np.zeros((len(items), kmax), dtype=np.int64)
    mask = np.zeros((len(items), kmax), dtype=bool)
    for r, it in enumerate(items):
        negs[r, : it.k_eff] = it.negatives
        mask[r, : it.k_eff] = True
    for arr in (a, p, negs[mask]):
        if arr.size and (arr.min() < 0 or arr.max() >= n_rows):
            raise IndexError(f"batch references a row outside 0..{n_rows - 1}")
    return a, p, negs, mask


def _infonce(batch: ContrastBatch, feats: np.ndarray, tau: float, symmetric: bool, need_grad: bool):
    feats = np.asarray(feats, dtype=float)
    a, p, negs, mask = _index_arrays(batch, len(feats), symmetric)
    B = len(a)
    if B == 0:
        return 0.0, np.zeros_like(feats), (float("nan"), float("nan"))
    U, n = _unit_rows(feats)
    pos_cos = np.einsum("bd,bd->b", U[a], U[p])
    neg_cos = np.einsum("bd,bkd->bk", U[a], U[negs]) if negs.shape[1] else np.zeros((B, 0))
    logits = np.concatenate([pos_cos[:, None], np.where(mask, neg_cos, -np.inf)], axis=1) / tau
    mx = logits.max(axis=1, keepdims=True)
    shifted = np.exp(logits - mx)
    den = shifted.sum(1)
    # logsumexp - s_pos; exactly 0 for items without negatives
    per_item = (mx[:, 0] - logits[:, 0]) + np.log(den)
    loss = float(per_item.mean())
    stats = (float(pos_cos.mean()), float(neg_cos[mask].mean()) if mask.any() else float("nan"))
    if not need_grad:
        return loss, None, stats
    P = shifted / den[:, None]
    d_logits = P / (B * tau)
    d_logits[:, 0] -= 1.0 / (B * tau)
    # gradient w.r.t. unit vectors; the cosine is symmetric in its arguments
    dU = np.zeros_like(U)
    np.add.at(dU, a, d_logits[:, :1] * U[p])
    np.add.at(dU, p, d_logits[:, :1] * U[a])
    if negs.shape[1]:
        dn = np.where(mask, d_logits[:, 1:], 0.0)
        np.add.at(dU, a, np.einsum("bk,bkd->bd", dn, U[negs]))
        np.add.at(dU, negs.ravel(), (dn[..., None] * U[a][:, None, :]).reshape(-1, U.shape[1]))
    radial = np.einsum("nd,nd->n", U, dU)
    big = n > EPS
    dF = np.where(big[:, None], (dU - U * radial[:, None]) / n[:, None], dU / EPS)
    return loss, dF, stats


def partial_infonce(batch: ContrastBatch, features: np.ndarray, tau: float, symmetric: bool = False) -> LossReport:
    loss, dF, (pc, nc) = _infonce(batch, features, tau, symmetric, need_grad=True)
    return LossReport(loss, float(np.linalg.norm(dF)), pc, nc, len(batch.items))


def partial_infonce_backward(batch: ContrastBatch, features: np.ndarray, tau: float, symmetric: bool = False) -> np.ndarray:
    """Gradient of :func:`partial_infonce` w.r.t. every feature row (zero for unreferenced rows)."""
    return _infonce(batch, features, tau, symmetric, need_grad=True)[1]


def pcon_head_grad(head: HeadParams, Z: np.ndarray, batch: ContrastBatch, cfg: PconConfig):
    """Loss on ``h_objs`` of ``head(Z)`` and its gradient w.r.t. the head parameters."""
    H, cache = head_forward(head, Z)
    k = head.obj_dim
    loss, dF, (pc, nc) = _infonce(batch, H[:, :k], cfg.tau, cfg.symmetric, need_grad=True)
    dH = np.zeros_like(H)
    dH[:, :k] = dF
    grads = head_backward(head, cache, dH)
    return LossReport(loss, grad_norm(grads), pc, nc, len(batch.items)), grads


def sample_batch(pairs: PairSet, K: int, rng: np.random.Generator) -> ContrastBatch:
    if K < 0:
        raise ValueError("K must be >= 0")
    items = []
    for (i, j), negs in zip(pairs.positives, pairs.negatives):
        if len(negs) <= K:
            chosen = tuple(negs)
        else:
            chosen = tuple(int(negs[t]) for t in rng.choice(len(negs), size=K, replace=False))
        items.append(ContrastItem(i, j, chosen))
    return ContrastBatch(tuple(items), K)


def pcon_train_step(head: HeadParams, Z: np.ndarray, batch: ContrastBatch, cfg: PconConfig, opt=None):
    opt = opt or SGD(cfg.learning_rate, cfg.momentum)
    report, grads = pcon_head_grad(head, Z, batch, cfg)
    check_finite(report.loss, grads, "in pcon step")
    return head.with_arrays(opt.step(head.arrays(), grads)), report


def train_pcon(head: HeadParams, Z: np.ndarray, pairs: PairSet, cfg: PconConfig, rng: np.random.Generator):
    """Standalone contrastive training; a fresh negative sample every step."""
    opt = SGD(cfg.learning_rate, cfg.momentum)
    reports = []
    for _ in range(cfg.steps):
        head, rep = pcon_train_step(head, Z, sample_batch(pairs, cfg.K, rng), cfg, opt)
        reports.append(rep)
    return head, reports


def alignment_gap(obj_feats: np.ndarray, pairs: PairSet) -> tuple[float, float]:
    """Mean positive-pair cosine and mean anchor-negative cosine over all licensed negatives."""
    U, _ = _unit_rows(np.asarray(obj_feats, dtype=float))
    pos, neg = [], []
    for (i, j), negs in zip(pairs.positives, pairs.negatives):
        pos.append(U[i] @ U[j])
        neg.extend(U[list(negs)] @ U[i])
    return float(np.mean(pos)) if pos else float("nan"), float(np.mean(neg)) if neg else float("nan")


def write_loss_log(path, reports: Sequence[LossReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "grad_norm", "pos_cos_mean", "neg_cos_mean"])
        for s, r in enumerate(reports):
            w.writerow([s, repr(r.loss), repr(r.grad_norm), repr(r.pos_cos_mean), repr(r.neg_cos_mean)])
