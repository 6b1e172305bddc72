import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualrr.metrics import auc, distribution_profile, mean_rfr, ptar_from_logits, rfr, sequence_consistency
from dualrr.models import _prefix_mask
from dualrr.numkit import DTYPE, masked_fill


def test_rfr_identity_and_negation():
    t = [0.3, 2.0, -1.0, 0.7]
    assert rfr(t, t) == 0.0
    assert rfr(t, [-v for v in t]) == 1.0


def test_rfr_one_flip_of_three():
    # pairs (3,2) ok, (3,1) ok, (2,1) flipped
    assert rfr([3, 2, 1], [3, 1, 2]) == pytest.approx(1 / 3, abs=1e-15)


def test_rfr_student_ties_count_half():
    assert rfr([2, 1], [5, 5]) == 0.5


def test_rfr_all_tied_teacher_raises():
    with pytest.raises(ValueError, match="no ordered pairs"):
        rfr([1, 1, 1], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=2, max_size=8, unique=True))
def test_rfr_monotone_invariance(scores):
    s = np.asarray(scores) / 10.0
    assert rfr(s, np.exp(s) * 3 + 1) == 0.0


def test_auc_examples():
    assert auc([3, 2, 1, 0], [1, 1, 0, 0]) == 1.0
    assert auc([0.4] * 4, [1, 0, 1, 0]) == 0.5
    # positives 0.9, 0.1 vs negative 0.8: (1 + 0) / 2
    assert auc([0.9, 0.8, 0.1], [1, 0, 1]) == 0.5


def test_auc_single_class_raises():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    tot = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return tot / (len(pos) * len(neg))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=2, max_size=12))
def test_auc_matches_pair_enumeration(rows):
    scores = [float(s) for s, _ in rows]
    labels = [int(y) for _, y in rows]
    if 0 < sum(labels) < len(labels):
        assert auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)


def test_distribution_profile_examples():
    assert distribution_profile([0, 1, 0]) == (1.0, 1.0)
    assert distribution_profile([0.25] * 4) == (0.25, 4.0)
    assert distribution_profile([0.5, 0.5, 0, 0]) == (0.5, 2.0)


@pytest.mark.parametrize("n", [2, 3, 5, 7, 10, 16])
def test_branching_factor_uniform(n):
    assert distribution_profile([1 / n] * n)[1] == pytest.approx(n, rel=1e-12)


def test_distribution_profile_unnormalized_raises():
    with pytest.raises(ValueError):
        distribution_profile([0.5, 0.6])


def test_sequence_consistency_examples():
    assert sequence_consistency([1, 2, 3], [3, 2, 1]) == 1.0
    assert sequence_consistency([1, 2], [3, 4]) == 0.0
    a = list(range(10))
    b = list(range(4, 14))  # 6 shared, union 14
    assert sequence_consistency(a, b) == pytest.approx(6 / 14)


def test_ptar_copy_and_adversarial_students():
    g = torch.Generator().manual_seed(0)
    B, L, N = 5, 3, 6
    raw = torch.randn(B, L, N, generator=g, dtype=DTYPE)
    prefixes = torch.stack([torch.randperm(N, generator=g)[:L] for _ in range(B)])
    teacher = masked_fill(raw, _prefix_mask(prefixes, N))  # as teacher forcing returns them
    assert ptar_from_logits(teacher, raw.clone(), prefixes) == 1.0
    # argmin student over the same unmasked support
    assert ptar_from_logits(teacher, -raw, prefixes) == 0.0


def test_mean_rfr_skips_tied_rows():
    t = torch.tensor([[1.0, 1.0], [2.0, 1.0]])
    s = torch.tensor([[0.0, 1.0], [1.0, 2.0]])
    assert mean_rfr(t, s) == 1.0
    assert math.isnan(mean_rfr(torch.ones(1, 3), torch.ones(1, 3)))
