"""Sample selection matrix and the positive / negative pairs it licenses."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detector import DetectionReport


@dataclass(frozen=True)
class SelectionMatrix:
    n: int
    bits: np.ndarray  # (n, n) uint8, read-only

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8)
        if b.shape != (self.n, self.n):
            raise ValueError(f"bits has shape {b.shape}, expected ({self.n}, {self.n})")
        if not np.array_equal(b, b.T):
            raise ValueError("selection matrix must be symmetric")
        if b.size and b.diagonal().any():
            raise ValueError("selection matrix must have a zero diagonal")
        if ((b != 0) & (b != 1)).any():
            raise ValueError("selection matrix entries must be 0 or 1")
        b = b.copy()
        b.flags.writeable = False
        object.__setattr__(self, "bits", b)

    def __getitem__(self, ij) -> int:
        return int(self.bits[ij])

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "rows": self.bits.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "SelectionMatrix":
        d = json.loads(text)
        return cls(d["n"], np.array(d["rows"], dtype=np.uint8).reshape(d["n"], d["n"]))


@dataclass(frozen=True)
class PairSet:
    positives: tuple[tuple[int, int], ...]
    negatives: tuple[tuple[int, ...], ...]  # aligned with positives


def intersection_count(r1: DetectionReport, r2: DetectionReport) -> int:
    return len(r1.labels & r2.labels)


def build_selection_matrix(reports: Sequence[DetectionReport], m: int = 1) -> SelectionMatrix:
    """``A[i, j] = 1`` iff ``i != j`` and reports i, j share at least ``m`` labels."""
    if m < 1:
        raise ValueError("m must be >= 1; m=0 would mark every pair positive")
    n = len(reports)
    for pos, r in enumerate(reports):
        if r.observation_index != pos:
            raise ValueError(f"report at position {pos} has index {r.observation_index}")
    vocab = sorted(set().union(*(r.labels for r in reports))) if reports else []
    col = {lab: c for c, lab in enumerate(vocab)}
    incidence = np.zeros((n, len(vocab)), dtype=np.int64)
    for i, r in enumerate(reports):
        incidence[i, [col[lab] for lab in r.labels]] = 1
    bits = (incidence @ incidence.T >= m).astype(np.uint8)
    np.fill_diagonal(bits, 0)
    return SelectionMatrix(n, bits)


def positive_pairs(A: SelectionMatrix) -> list[tuple[int, int]]:
    i, j = np.nonzero(np.triu(A.bits, k=1))
    return [(int(a), int(b)) for a, b in zip(i, j)]


def negatives_for(A: SelectionMatrix, i: int, j: int) -> list[int]:
    if A[i, j] != 1:
        raise ValueError(f"({i}, {j}) is not a positive pair")
    ok = (A.bits[i] == 0) & (A.bits[j] == 0)
    ok[[i, j]] = False
    return [int(k) for k in np.nonzero(ok)[0]]


def pair_set(A: SelectionMatrix) -> PairSet:
    pos = positive_pairs(A)
    return PairSet(tuple(pos), tuple(tuple(negatives_for(A, i, j)) for i, j in pos))
