import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualrr.theory import (
    Categorical,
    DiscreteEnv,
    FlipStats,
    cmi_exact,
    cmi_sweep,
    conditional_entropy,
    flip_bound,
    kl,
    mix_to_radius,
    simplex_grid,
    total_variation,
    verify_flip_bound,
)


def brute_cmi(table, t):
    """I(y_t ; y_<t | x) by explicit loops over outcomes."""
    X, V, L = table.shape[0], table.shape[1], table.ndim - 1
    joint, pa, pb, px = {}, {}, {}, {}
    for x in range(X):
        for ys in itertools.product(range(V), repeat=L):
            p = table[(x, *ys)]
            a, b = ys[: t - 1], ys[t - 1]
            joint[(x, a, b)] = joint.get((x, a, b), 0.0) + p
            pa[(x, a)] = pa.get((x, a), 0.0) + p
            pb[(x, b)] = pb.get((x, b), 0.0) + p
            px[x] = px.get(x, 0.0) + p
    return sum(p * math.log(p * px[x] / (pa[(x, a)] * pb[(x, b)])) for (x, a, b), p in joint.items() if p > 0)


def test_categorical_validation():
    Categorical(np.array([0.2, 0.8]))
    with pytest.raises(ValueError):
        Categorical(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        Categorical(np.ones(17) / 17)


def test_flip_bound_value():
    assert flip_bound(0.02, 0.5) == pytest.approx(0.4, abs=1e-15)
    with pytest.raises(ValueError):
        flip_bound(0.1, 0.0)


def test_kl_edge_cases():
    p = np.array([0.5, 0.5, 0.0])
    assert kl(p, p) == 0.0
    assert kl(p, np.array([1.0, 0.0, 0.0])) == math.inf
    assert kl(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(math.log(2))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_pinsker_holds(V, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(V)), rng.dirichlet(np.ones(V))
    assert total_variation(p, q) <= math.sqrt(kl(p, q) / 2) + 1e-12


def test_mix_hits_target_radius():
    rng = np.random.default_rng(0)
    pt, q = rng.dirichlet(np.ones(3), 50), rng.dirichlet(np.ones(3), 50)
    eps = np.full(50, 0.01)
    ps = mix_to_radius(pt, q, eps)
    d = kl(pt, ps)
    # the mixture cannot reach radii beyond KL(pt || q)
    reach = kl(pt, q) >= 0.01
    np.testing.assert_allclose(d[reach], 0.01, rtol=1e-9)
    np.testing.assert_allclose(ps.sum(1), 1.0)


def test_identical_distributions_never_flip():
    rng = np.random.default_rng(1)
    pt = rng.dirichlet(np.ones(4), 1000)
    stats = FlipStats(deltas=(0.05, 0.2))
    stats.update(pt, pt.copy())
    assert stats.violations == 0 and stats.pinsker_violations == 0 and stats.covered.sum() > 0


def test_flip_counting_on_a_known_pair():
    pt = np.array([[0.7, 0.3]])
    ps = np.array([[0.4, 0.6]])
    stats = FlipStats(deltas=(0.3,))
    stats.update(pt, ps, np.array([0.1]))
    assert stats.flips[(0.1, 0.3)] == 1 and stats.eligible[(0.1, 0.3)] == 1
    # KL is about 0.18, so delta 0.3 < sqrt(2 eps) and the pair is not in the sufficient region
    assert stats.violations == 0


def test_simplex_grid():
    g = simplex_grid(3, 0.5)
    assert len(g) == 6
    np.testing.assert_allclose(g.sum(1), 1.0)


def test_verify_small_run():
    rep = verify_flip_bound(trials=20_000, seed=3, grid_resolution=0.1)
    assert rep.ok and rep.pairs == 20_000 + rep.grid_pairs == 20_000 + 66 * 66
    assert rep.covered_item_pairs > 0
    for row in rep.table:
        assert row["observed"] <= row["bound"] + 1e-12 or row["bound"] >= 1.0


def test_deterministic_env_has_zero_cmi():
    table = np.zeros((3, 3, 3, 3))
    for x in range(3):
        table[x, x, (x + 1) % 3, 2] = 1 / 3
    env = DiscreteEnv(table)
    assert cmi_exact(env, 2) == 0.0 and cmi_exact(env, 3) == 0.0


def test_independent_env_has_zero_cmi():
    rng = np.random.default_rng(4)
    px = rng.dirichlet(np.ones(4))
    table = np.stack([
        np.einsum("i,j,k->ijk", *(rng.dirichlet(np.ones(3)) for _ in range(3))) * px[x] for x in range(4)
    ])
    env = DiscreteEnv(table / table.sum())
    assert abs(cmi_exact(env, 2)) < 1e-12 and abs(cmi_exact(env, 3)) < 1e-12


@pytest.mark.parametrize("gamma", [0.3, 1.0, 4.0])
def test_cmi_matches_brute_force_and_entropy_bounds(gamma):
    env = DiscreteEnv.random(gamma, n_ctx=3, V=3, L=3, seed=7)
    for t in (2, 3):
        c = cmi_exact(env, t)
        assert c == pytest.approx(brute_cmi(env.table, t), abs=1e-12)
        h_t = conditional_entropy(env, [t])
        h_prefix = conditional_entropy(env, list(range(1, t)))
        assert c <= min(h_t, h_prefix) + 1e-12


def test_env_bounds_and_position_checks():
    with pytest.raises(ValueError):
        DiscreteEnv(np.ones((9, 2, 2)) / 36)
    env = DiscreteEnv.random(1.0, L=2)
    with pytest.raises(ValueError):
        cmi_exact(env, 3)


def test_cmi_sweep_decays():
    vals = [c for _, c in cmi_sweep(seed=0)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-3
