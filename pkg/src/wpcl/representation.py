"""Viewpoint-entangled backbone surrogate and the trainable projection head.

The surrogate renders a raw feature for a pose as

    z = M[heading] @ sum_o decay**dist(o) * e[label(o)]  +  scale * B @ u(pose)  +  noise

where ``M`` are fixed orthogonal mixers (one per heading), ``e`` are fixed
unit label embeddings, ``B`` spans a low-rank "viewpoint appearance"
subspace and ``u(pose)`` is a seeded unit vector per pose.  With
``decay=1`` and ``scale=0`` this is the plain mixed-sum surrogate.

The head maps ``z`` to ``h = [h_objs; h_flex]``; only ``h_objs`` is touched
by the contrastive loss.
"""

from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .envsim import HEADINGS, ObservationSpec, GridEnvironment, Observation, Pose, visible_objects

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _seeded_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in key])


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))  # Haar-distributed, spectral norm 1


@dataclass(frozen=True)
class BackboneConfig:
    d0: int = 64
    noise_sigma: float = 0.05
    viewpoint_rank: int = 8
    viewpoint_scale: float = 3.0
    distance_decay: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 <= self.viewpoint_rank <= self.d0:
            raise ConfigError("viewpoint_rank must lie in [0, d0]")


class Backbone:
    """Fixed random materials derived from a :class:`BackboneConfig`."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        rng = _seeded_rng(cfg.seed, 101)
        self.mixers = np.stack([_orthogonal(rng, cfg.d0) for _ in HEADINGS])
        self.mixers.flags.writeable = False
        if cfg.viewpoint_rank:
            self.viewpoint_basis = _orthogonal(rng, cfg.d0)[:, : cfg.viewpoint_rank]
        else:
            self.viewpoint_basis = np.zeros((cfg.d0, 0))
        self.viewpoint_basis.flags.writeable = False

    def mixer(self, heading: int) -> np.ndarray:
        return self.mixers[heading // 90]

    def nuisance(self, env_seed: int, pose: Pose, stream: int = 0) -> np.ndarray:
        cfg = self.cfg
        rng = _seeded_rng(cfg.seed, env_seed, pose.cell[0], pose.cell[1], pose.heading, stream)
        out = np.zeros(cfg.d0)
        if cfg.viewpoint_rank and cfg.viewpoint_scale:
            u = rng.standard_normal(cfg.viewpoint_rank)
            out += cfg.viewpoint_scale * (self.viewpoint_basis @ (u / np.linalg.norm(u)))
        if cfg.noise_sigma:
            out += rng.normal(0.0, cfg.noise_sigma, cfg.d0)
        return out


class ObjectEmbeddingTable:
    def __init__(self, vocab: Sequence[str], d0: int, seed: int = 0):
        rng = _seeded_rng(seed, 202)
        v = rng.standard_normal((len(vocab), d0))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v.flags.writeable = False
        self.vocab = tuple(vocab)
        self.vectors = v
        self._row = {lab: i for i, lab in enumerate(self.vocab)}

    def __getitem__(self, label: str) -> np.ndarray:
        return self.vectors[self._row[label]]


def _object_sum(env: GridEnvironment, pose: Pose, ids, table: ObjectEmbeddingTable, decay: float) -> np.ndarray:
    s = np.zeros(table.vectors.shape[1])
    for oid in sorted(ids):
        o = env.object(oid)
        dist = max(abs(o.cell[0] - pose.cell[0]), abs(o.cell[1] - pose.cell[1]))
        s += decay**dist * table[o.label]
    return s


def render_raw_feature(env: GridEnvironment, obs: Observation, backbone: Backbone, table: ObjectEmbeddingTable) -> np.ndarray:
    s = _object_sum(env, obs.pose, obs.visible_ids, table, backbone.cfg.distance_decay)
    return backbone.mixer(obs.pose.heading) @ s + backbone.nuisance(env.seed, obs.pose)


def render_object_crop(env: GridEnvironment, pose: Pose, object_id: int, backbone: Backbone, table: ObjectEmbeddingTable) -> np.ndarray:
    """Raw feature of a single object as seen from ``pose`` (used for grounding)."""
    e = table[env.object(object_id).label]
    return backbone.mixer(pose.heading) @ e + backbone.nuisance(env.seed, pose, stream=1 + object_id)


def viewpoint_index(env: GridEnvironment, pose: Pose) -> int:
    return (pose.cell[1] * env.width + pose.cell[0]) * 4 + pose.heading // 90


class Perception:
    """Observation spec plus backbone, with per-environment render caches."""

    def __init__(self, spec: ObservationSpec, backbone_cfg: BackboneConfig, vocab: Sequence[str]):
        self.spec = spec
        self.backbone = Backbone(backbone_cfg)
        self.table = ObjectEmbeddingTable(vocab, backbone_cfg.d0, backbone_cfg.seed)
        self._cache: dict[int, tuple[GridEnvironment, np.ndarray, list]] = {}

    @property
    def d0(self) -> int:
        return self.backbone.cfg.d0

    def _materialize(self, env: GridEnvironment):
        hit = self._cache.get(env.seed)
        if hit is not None and (hit[0] is env or hit[0] == env):
            return hit
        n = env.width * env.height * 4
        Z = np.zeros((n, self.d0))
        vis: list = [frozenset()] * n
        for pose in env.poses():
            k = viewpoint_index(env, pose)
            ids = visible_objects(env, pose, self.spec)
            vis[k] = ids
            Z[k] = render_raw_feature(env, Observation(k, pose, ids), self.backbone, self.table)
        Z.flags.writeable = False
        hit = (env, Z, vis)
        self._cache[env.seed] = hit
        return hit

    def raw_all(self, env: GridEnvironment) -> np.ndarray:
        """Raw features for every pose, rows indexed by :func:`viewpoint_index`."""
        return self._materialize(env)[1]

    def visible(self, env: GridEnvironment, pose: Pose) -> frozenset[int]:
        return self._materialize(env)[2][viewpoint_index(env, pose)]

    def raw(self, env: GridEnvironment, pose: Pose) -> np.ndarray:
        return self.raw_all(env)[viewpoint_index(env, pose)]

    def crop(self, env: GridEnvironment, pose: Pose, object_id: int) -> np.ndarray:
        return render_object_crop(env, pose, object_id, self.backbone, self.table)


# --------------------------------------------------------------------------- head


@functools.lru_cache(maxsize=256)
def object_dim(d: int, lam: float) -> int:
    """``round(lam * d)`` with halves rounded up, clamped so both segments are non-empty."""
    if not 0 < lam < 1:
        raise ConfigError(f"lambda must lie in (0, 1), got {lam}")
    if d < 2:
        raise ConfigError(f"d={d} cannot be split into two non-empty segments")
    k = math.floor(lam * d + 0.5)
    if not 1 <= k <= d - 1:
        k = min(max(k, 1), d - 1)
        log.warning("lambda=%s with d=%d rounds to an empty segment; obj_dim clamped to %d", lam, d, k)
    return k


@dataclass
class VisualFeature:
    values: np.ndarray
    lam: float = 0.2

    @property
    def obj_dim(self) -> int:
        return object_dim(len(self.values), self.lam)


def split_features(h: VisualFeature) -> tuple[np.ndarray, np.ndarray]:
    k = h.obj_dim
    return h.values[:k], h.values[k:]


@dataclass
class HeadParams:
    """``h = W1 z + b1`` or, with a hidden layer, ``h = W2 tanh(W1 z + b1) + b2``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray | None = None
    b2: np.ndarray | None = None
    lam: float = 0.2

    def __post_init__(self):
        if self.W1.shape[0] != self.b1.shape[0]:
            raise ConfigError("W1/b1 shape mismatch")
        if (self.W2 is None) != (self.b2 is None):
            raise ConfigError("W2 and b2 must be given together")
        if self.W2 is not None and (self.W2.shape[1] != self.W1.shape[0] or self.W2.shape[0] != self.b2.shape[0]):
            raise ConfigError("second-layer shapes inconsistent with first layer")
        object_dim(self.d, self.lam)

    @property
    def d0(self) -> int:
        return self.W1.shape[1]

    @property
    def d(self) -> int:
        return (self.W2 if self.W2 is not None else self.W1).shape[0]

    @property
    def obj_dim(self) -> int:
        return object_dim(self.d, self.lam)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"W1": self.W1, "b1": self.b1}
        if self.W2 is not None:
            out.update(W2=self.W2, b2=self.b2)
        return out

    def copy(self) -> "HeadParams":
        return HeadParams(**{k: v.copy() for k, v in self.arrays().items()}, lam=self.lam)

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "HeadParams":
        return HeadParams(**arrays, lam=self.lam)

    @classmethod
    def init(cls, d0: int, d: int, lam: float = 0.2, hidden: int | None = None, seed: int = 0) -> "HeadParams":
        rng = _seeded_rng(seed, 303)

        def glorot(fan_out, fan_in):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, (fan_out, fan_in))

        if hidden is None:
            return cls(glorot(d, d0), np.zeros(d), lam=lam)
        return cls(glorot(hidden, d0), np.zeros(hidden), glorot(d, hidden), np.zeros(d), lam=lam)

    @classmethod
    def identity(cls, d: int, lam: float = 0.2) -> "HeadParams":
        return cls(np.eye(d), np.zeros(d), lam=lam)

    @classmethod
    def zeros(cls, d0: int, d: int, lam: float = 0.2) -> "HeadParams":
        return cls(np.zeros((d, d0)), np.zeros(d), lam=lam)


def head_forward(head: HeadParams, Z: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Batched forward over rows of ``Z``; returns ``(H, cache)``."""
    Z = np.atleast_2d(Z)
    if Z.shape[1] != head.d0:
        raise ConfigError(f"raw feature has dim {Z.shape[1]}, head expects {head.d0}")
    A1 = Z @ head.W1.T + head.b1
    if head.W2 is None:
        return A1, (Z, None)
    T = np.tanh(A1)
    return T @ head.W2.T + head.b2, (Z, T)


def head_backward(head: HeadParams, cache: tuple, dH: np.ndarray) -> dict[str, np.ndarray]:
    Z, T = cache
    if T is None:
        return {"W1": dH.T @ Z, "b1": dH.sum(0)}
    dT = dH @ head.W2
    dA1 = dT * (1.0 - T * T)
    return {"W1": dA1.T @ Z, "b1": dA1.sum(0), "W2": dH.T @ T, "b2": dH.sum(0)}


def encode(head: HeadParams, z: np.ndarray) -> VisualFeature:
    z = np.asarray(z, dtype=float)
    if z.ndim != 1:
        raise ConfigError("encode takes a single raw feature vector")
    H, _ = head_forward(head, z[None, :])
    return VisualFeature(H[0], head.lam)


# --------------------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def arrays_to_json(kind: str, arrays: dict[str, np.ndarray], **meta) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        **meta,
        "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in arrays.items()},
    }


def arrays_from_json(doc: dict, kind: str) -> dict[str, np.ndarray]:
    if doc.get("version") != CHECKPOINT_VERSION or doc.get("kind") != kind:
        raise ConfigError(f"expected {kind} checkpoint v{CHECKPOINT_VERSION}, got {doc.get('kind')} v{doc.get('version')}")
    return {k: np.array(t["data"], dtype=float).reshape(t["shape"]) for k, t in doc["tensors"].items()}


def save_head(head: HeadParams, path) -> None:
    Path(path).write_text(json.dumps(arrays_to_json("head", head.arrays(), lam=head.lam)))


def load_head(path) -> HeadParams:
    doc = json.loads(Path(path).read_text())
    return HeadParams(**arrays_from_json(doc, "head"), lam=doc["lam"])
