import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wpcl.detector import DetectionReport
from wpcl.weaksup import (
    PairSet,
    SelectionMatrix,
    build_selection_matrix,
    intersection_count,
    negatives_for,
    pair_set,
    positive_pairs,
)

VOCAB = [f"obj{i}" for i in range(10)]


def reports_of(label_sets):
    return [DetectionReport(i, frozenset(s)) for i, s in enumerate(label_sets)]


def merge_count(a, b):
    a, b = sorted(a), sorted(b)
    i = j = n = 0
    while i < len(a) and j < len(b):
        if a[i] == b[j]:
            n += 1
            i += 1
            j += 1
        elif a[i] < b[j]:
            i += 1
        else:
            j += 1
    return n


def brute_matrix(reps, m):
    n = len(reps)
    return [[int(i != j and merge_count(reps[i].labels, reps[j].labels) >= m) for j in range(n)] for i in range(n)]


label_sets = st.lists(st.frozensets(st.sampled_from(VOCAB), max_size=5), max_size=12)


def test_intersection_examples():
    assert intersection_count(*reports_of([{"desk", "chair"}, {"chair", "sofa"}])) == 1
    assert intersection_count(*reports_of([{"lamp"}, {"desk"}])) == 0


def test_intersection_matches_merge_oracle(rng):
    for _ in range(1000):
        a, b = (set(rng.choice(VOCAB, size=rng.integers(0, 7), replace=False)) for _ in range(2))
        assert intersection_count(*reports_of([a, b])) == merge_count(a, b)


def test_three_report_example():
    A = build_selection_matrix(reports_of([{"desk", "chair"}, {"chair", "sofa"}, {"lamp"}]), m=1)
    assert A.bits.tolist() == [[0, 1, 0], [1, 0, 0], [0, 0, 0]]
    assert positive_pairs(A) == [(0, 1)]
    assert negatives_for(A, 0, 1) == [2]


def test_identical_reports():
    assert build_selection_matrix(reports_of([{"desk"}, {"desk"}])).bits.tolist() == [[0, 1], [1, 0]]


def test_m_zero_rejected():
    with pytest.raises(ValueError):
        build_selection_matrix(reports_of([{"a"}]), m=0)


def test_misaligned_indices_rejected():
    with pytest.raises(ValueError):
        build_selection_matrix([DetectionReport(1, frozenset({"a"}))])


@pytest.mark.parametrize("m", [1, 2, 3])
def test_random_reports_match_brute_force(m, rng):
    sets = [set(rng.choice(VOCAB, size=rng.integers(0, 6), replace=False)) for _ in range(20)]
    reps = reports_of(sets)
    assert build_selection_matrix(reps, m).bits.tolist() == brute_matrix(reps, m)


@settings(max_examples=200)
@given(label_sets)
def test_matrix_properties(sets):
    reps = reports_of(sets)
    prev = None
    for m in (1, 2, 3):
        A = build_selection_matrix(reps, m).bits
        assert (A == A.T).all() and not A.diagonal().any()
        if prev is not None:
            assert (A <= prev).all()  # raising m never adds a pair
        prev = A


@settings(max_examples=200)
@given(label_sets, st.integers(1, 3))
def test_pairs_and_negatives_consistent(sets, m):
    reps = reports_of(sets)
    A = build_selection_matrix(reps, m)
    ps = pair_set(A)
    assert len(ps.positives) == int(A.bits.sum()) // 2
    assert list(ps.positives) == sorted(ps.positives)
    n = len(reps)
    for (i, j), negs in zip(ps.positives, ps.negatives):
        assert i < j and A[i, j] == 1
        brute = [k for k in range(n) if k not in (i, j) and A[i, k] == 0 and A[j, k] == 0]
        assert list(negs) == brute
        for k in negs:
            assert intersection_count(reps[i], reps[k]) < m and intersection_count(reps[j], reps[k]) < m


def test_zero_and_full_matrices():
    Z = SelectionMatrix(4, np.zeros((4, 4), dtype=np.uint8))
    assert positive_pairs(Z) == []
    F = SelectionMatrix(4, 1 - np.eye(4, dtype=np.uint8))
    assert all(negatives_for(F, i, j) == [] for i, j in positive_pairs(F))


def test_negatives_require_positive_pair():
    with pytest.raises(ValueError):
        negatives_for(SelectionMatrix(3, np.zeros((3, 3), dtype=np.uint8)), 0, 1)


def test_matrix_validation_and_json():
    with pytest.raises(ValueError):
        SelectionMatrix(2, np.array([[0, 1], [0, 0]]))
    with pytest.raises(ValueError):
        SelectionMatrix(2, np.eye(2))
    A = build_selection_matrix(reports_of([{"a"}, {"a", "b"}, {"b"}]))
    assert SelectionMatrix.from_json(A.to_json()).bits.tolist() == A.bits.tolist()
    assert A.to_json() == '{"n": 3, "rows": [[0, 1, 0], [1, 0, 1], [0, 1, 0]]}'
    with pytest.raises(ValueError):
        A.bits[0, 1] = 0


def test_empty_history():
    A = build_selection_matrix([])
    assert A.n == 0 and pair_set(A) == PairSet((), ())
