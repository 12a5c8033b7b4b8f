"""Per-observation object-label reports.

Two backends produce the same :class:`DetectionReport`: a noisy ground-truth
oracle standing in for the VLM, and a real VLM whose comma-separated answer
is parsed by :func:`parse_object_list`.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .envsim import GridEnvironment, Observation

_WS = re.compile(r"\s+")


def normalize_label(text: str) -> str:
    return _WS.sub(" ", text.strip().lower())


# Replaceable hook: synonym merging ("couch" vs "sofa") would go here.
label_normalizer: Callable[[str], str] = normalize_label


class DetectionError(RuntimeError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"detection failed for observation {index}: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True)
class DetectionReport:
    observation_index: int
    labels: frozenset[str]

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, "index": self.observation_index, "labels": sorted(self.labels)})

    @classmethod
    def from_json(cls, line: str) -> "DetectionReport":
        d = json.loads(line)
        return cls(d["index"], frozenset(d["labels"]))


@dataclass(frozen=True)
class OracleConfig:
    miss_rate: float = 0.05
    spurious_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("miss_rate", "spurious_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def parse_object_list(text: str) -> frozenset[str]:
    out = set()
    for frag in text.split(","):
        lab = label_normalizer(frag)
        if lab:
            out.add(lab)
    return frozenset(out)


def ground_truth_labels(env: GridEnvironment, obs: Observation) -> frozenset[str]:
    return frozenset(label_normalizer(env.object(i).label) for i in obs.visible_ids)


def oracle_detect(env: GridEnvironment, obs: Observation, cfg: OracleConfig, stream: int = 0) -> DetectionReport:
    """Ground-truth labels with independent misses and at most one spurious label.

    Randomness is keyed on ``(cfg.seed, stream, obs.index)``; ``stream`` lets
    callers separate histories that reuse the same indices.
    """
    rng = np.random.default_rng([cfg.seed, stream, obs.index])
    truth = sorted(ground_truth_labels(env, obs))
    keep = rng.random(len(truth)) >= cfg.miss_rate
    labels = {lab for lab, k in zip(truth, keep) if k}
    if rng.random() < cfg.spurious_rate:
        pool = sorted({label_normalizer(v) for v in env.vocab} - set(truth))
        if pool:
            labels.add(pool[rng.integers(len(pool))])
    return DetectionReport(obs.index, frozenset(labels))


def detect_history(
    history: Sequence[Observation],
    env: GridEnvironment,
    backend: str = "oracle",
    cfg: OracleConfig | None = None,
    vlm=None,
    stream: int = 0,
    max_workers: int = 1,
) -> list[DetectionReport]:
    """One report per observation, in history order.

    ``vlm`` must expose ``describe(env, obs) -> str`` (see
    :class:`wpcl.vlmclient.VlmDetector`).  Failures are re-raised as
    :class:`DetectionError` carrying the observation index.
    """
    if backend == "oracle":
        cfg = cfg or OracleConfig()
        return [oracle_detect(env, o, cfg, stream) for o in history]
    if backend != "vlm":
        raise ValueError(f"unknown detector backend {backend!r}")
    if vlm is None:
        raise ValueError("vlm backend requires a configured VlmDetector")

    def one(obs: Observation) -> DetectionReport:
        try:
            return DetectionReport(obs.index, parse_object_list(vlm.describe(env, obs)))
        except Exception as exc:
            raise DetectionError(obs.index, exc) from exc

    if max_workers <= 1:
        return [one(o) for o in history]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        # map preserves input order
        return list(pool.map(one, history))


def write_reports(path, reports: Iterable[DetectionReport], **extra) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json(**extra) + "\n")
