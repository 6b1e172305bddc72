import math

import numpy as np
import pytest
import torch

from dualrr.numkit import DTYPE
from dualrr.sampler import gumbel_sample_group, masked_argmax_fill, sequence_log_prob


def cube(L, N, seed=0, scale=1.0):
    return torch.randn(L, N, generator=torch.Generator().manual_seed(seed), dtype=DTYPE) * scale


def test_single_candidate_forced():
    for seed in range(5):
        assert gumbel_sample_group(torch.zeros(1, 1, dtype=DTYPE), 3, 0.8, seed).slates.tolist() == [[0]] * 3


def test_tiny_tau_gives_greedy():
    c = cube(4, 7, seed=1)
    greedy = masked_argmax_fill(c, 4)
    got = gumbel_sample_group(c, 5, 1e-6, seed=9).slates
    assert all(torch.equal(s, greedy) for s in got)


def test_slates_are_distinct_permutations():
    c = cube(5, 6, seed=2)
    s = gumbel_sample_group(c.expand(20, 5, 6), 5000, 1.0, seed=3).slates.reshape(-1, 5)
    assert s.shape[0] == 100_000
    assert (s.sort(dim=1).values.diff(dim=1) > 0).all()


def test_reproducible_and_prefix_stable():
    c = cube(3, 5, seed=4)
    a = gumbel_sample_group(c, 4, 0.8, seed=11, step=2)
    b = gumbel_sample_group(c, 16, 0.8, seed=11, step=2)
    assert torch.equal(a.slates, gumbel_sample_group(c, 4, 0.8, seed=11, step=2).slates)
    assert torch.equal(a.slates, b.slates[:4])


def test_errors():
    with pytest.raises(ValueError):
        gumbel_sample_group(cube(3, 2), 1, 1.0, 0)
    with pytest.raises(ValueError):
        gumbel_sample_group(cube(2, 3), 1, 0.0, 0)
    with pytest.raises(ValueError):
        gumbel_sample_group(cube(2, 3), 0, 1.0, 0)


def test_sampling_costs_no_model_forward():
    from dualrr.models import ModelConfig, RerankModel

    model = RerankModel(ModelConfig(n_cand=5, l_out=3, d_model=8, d_ffn=8), seed=0)
    enc = model.encode(torch.zeros(1, 24), torch.zeros(1, 5, 8))
    c = model.student(enc)[0]
    before = model.student.forward_count
    gumbel_sample_group(c, 64, 0.8, 0)
    assert model.student.forward_count == before


def test_sequence_log_prob_examples():
    assert sequence_log_prob(torch.zeros(1, 4, dtype=DTYPE), [2]).item() == pytest.approx(math.log(0.25))
    det = torch.full((3, 4), -50.0, dtype=DTYPE)
    det[0, 1] = det[1, 3] = det[2, 0] = 50.0
    assert sequence_log_prob(det, [1, 3, 0]).item() == pytest.approx(0.0, abs=1e-12)
    for seed in range(10):
        assert sequence_log_prob(cube(3, 5, seed), [4, 0, 2]).item() <= 0.0


def test_sequence_log_prob_uses_duplicate_mask():
    # after picking item 0, position 2 renormalizes over the remaining two items
    lp = sequence_log_prob(torch.zeros(2, 3, dtype=DTYPE), [0, 1]).item()
    assert lp == pytest.approx(math.log(1 / 3) + math.log(1 / 2))


def test_exact_slate_distribution_small_case():
    # enumerate the sequential-masking law for L=2, N=3 and compare to frequencies
    c = cube(2, 3, seed=5)
    tau = 0.7
    logp = torch.log_softmax(c, -1) / tau
    probs = {}
    for a in range(3):
        p1 = torch.softmax(logp[0], -1)[a]
        rest = [i for i in range(3) if i != a]
        p2 = torch.softmax(logp[1, rest], -1)
        for j, b in enumerate(rest):
            probs[(a, b)] = float(p1 * p2[j])
    s = gumbel_sample_group(c, 200_000, tau, seed=6).slates.numpy()
    keys, counts = np.unique(s, axis=0, return_counts=True)
    freq = {tuple(k): v / len(s) for k, v in zip(keys.tolist(), counts)}
    tv = 0.5 * sum(abs(freq.get(k, 0) - p) for k, p in probs.items())
    assert tv < 0.01
