"""Exact checks of the ranking-stability bound and of vanishing sequential dependency."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

DEFAULT_EPS_GRID = (0.001, 0.005, 0.02, 0.05, 0.1, 0.2)
DEFAULT_DELTA_GRID = (0.05, 0.1, 0.2, 0.3, 0.5, 0.7)
PINSKER_TOL = 1e-12
CMI_TOL = 1e-12  # float64 summation noise floor for exact CMI


@dataclass(frozen=True)
class Categorical:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or not 1 <= p.size <= 16:
            raise ValueError("Categorical needs 1 to 16 outcomes")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)


def kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis; inf where q = 0 < p."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = xlogy(p, p) - xlogy(p, q)
    terms = np.where(p > 0, terms, 0.0)
    return terms.sum(axis=-1)


def total_variation(p, q) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def flip_bound(eps: float, delta: float) -> float:
    """The stability bound sqrt(2 eps) / delta on flip probability."""
    if delta <= 0 or eps < 0:
        raise ValueError("need eps >= 0 and delta > 0")
    return math.sqrt(2.0 * eps) / delta


def mix_to_radius(pt: np.ndarray, q: np.ndarray, eps: np.ndarray, iters: int = 60) -> np.ndarray:
    """Rows ``(1-w) pt + w q`` with KL(pt || .) = eps, w found by bisection (w <= 1)."""
    lo = np.zeros(len(pt))
    hi = np.ones(len(pt))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        d = kl(pt, (1 - mid[:, None]) * pt + mid[:, None] * q)
        above = d > eps
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return (1 - lo[:, None]) * pt + lo[:, None] * q


@dataclass
class FlipStats:
    """Counts accumulated over (P_T, P_S) pairs."""

    deltas: tuple
    pairs: int = 0
    violations: int = 0
    pinsker_violations: int = 0
    max_pinsker_excess: float = -math.inf
    covered: np.ndarray = None  # ordered item pairs past the sufficient threshold, per delta
    eligible: dict = field(default_factory=dict)  # (eps, delta) -> margin-qualified item pairs
    flips: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.covered is None:
            self.covered = np.zeros(len(self.deltas), dtype=np.int64)

    def update(self, pt: np.ndarray, ps: np.ndarray, eps_labels=None) -> None:
        eps_hat = kl(pt, ps)
        tv = total_variation(pt, ps)
        finite = np.isfinite(eps_hat)
        excess = np.where(finite, tv - np.sqrt(np.maximum(eps_hat, 0) / 2.0), -np.inf)
        self.pairs += len(pt)
        self.pinsker_violations += int((excess > PINSKER_TOL).sum())
        if excess.size:
            self.max_pinsker_excess = max(self.max_pinsker_excess, float(excess.max()))
        margin = pt[:, :, None] - pt[:, None, :]  # P_T(i) - P_T(j)
        flipped = ps[:, None, :] > ps[:, :, None]  # student strictly prefers j
        threshold = np.sqrt(2.0 * eps_hat)
        for k, delta in enumerate(self.deltas):
            qual = margin >= delta
            flips = (qual & flipped).sum(axis=(1, 2))
            sufficient = delta > threshold
            self.covered[k] += int(qual[sufficient].sum())
            self.violations += int(flips[sufficient].sum())
            if eps_labels is not None:
                n_qual = qual.sum(axis=(1, 2))
                for e in np.unique(eps_labels):
                    sel = eps_labels == e
                    key = (float(e), float(delta))
                    self.eligible[key] = self.eligible.get(key, 0) + int(n_qual[sel].sum())
                    self.flips[key] = self.flips.get(key, 0) + int(flips[sel].sum())


@dataclass
class FlipReport:
    pairs: int
    random_pairs: int
    grid_pairs: int
    violations: int
    pinsker_violations: int
    max_pinsker_excess: float
    covered_item_pairs: int
    table: list  # rows: eps, delta, bound, observed, eligible

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.pinsker_violations == 0

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["ok"] = self.ok
        return json.dumps(d, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"pairs checked: {self.pairs} ({self.random_pairs} random, {self.grid_pairs} grid)",
            f"sufficient-condition violations: {self.violations} over {self.covered_item_pairs} covered item pairs",
            f"Pinsker violations: {self.pinsker_violations} (max excess {self.max_pinsker_excess:.3e})",
            "",
            f"{'eps':>8} {'delta':>6} {'bound':>8} {'observed':>9} {'eligible':>9}",
        ]
        for r in self.table:
            lines.append(f"{r['eps']:>8.3f} {r['delta']:>6.2f} {r['bound']:>8.4f} {r['observed']:>9.5f} {r['eligible']:>9d}")
        return "\n".join(lines)


def simplex_grid(V: int, resolution: float) -> np.ndarray:
    """Every point of the V-simplex whose coordinates are multiples of ``resolution``."""
    n = int(round(1.0 / resolution))
    pts = [c + (n - sum(c),) for c in itertools.product(range(n + 1), repeat=V - 1) if sum(c) <= n]
    return np.asarray(pts, dtype=np.float64) / n


def verify_flip_bound(
    trials: int = 1_000_000,
    V=(2, 3, 4),
    eps_grid=DEFAULT_EPS_GRID,
    delta_grid=DEFAULT_DELTA_GRID,
    seed: int = 0,
    grid_resolution: float | None = 0.02,
    chunk: int = 50_000,
) -> FlipReport:
    """Random Dirichlet pairs at controlled KL radii, plus every pair of a V=3 simplex grid."""
    if min(eps_grid) <= 0 or min(delta_grid) <= 0:
        raise ValueError("grids must be positive")
    vs = (V,) if isinstance(V, int) else tuple(V)
    if max(vs) > 16 or min(vs) < 2:
        raise ValueError("V must lie in [2, 16]")
    rng = np.random.default_rng(seed)
    stats = FlipStats(deltas=tuple(float(d) for d in delta_grid))
    eps_arr = np.asarray(eps_grid, dtype=np.float64)
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        v = vs[(done // chunk) % len(vs)]
        pt = rng.dirichlet(np.ones(v), size=n)
        q = rng.dirichlet(np.ones(v), size=n)
        labels = eps_arr[rng.integers(len(eps_arr), size=n)]
        ps = mix_to_radius(pt, q, labels)
        stats.update(pt, ps, labels)
        done += n
    grid_pairs = 0
    if grid_resolution:
        pts = simplex_grid(3, grid_resolution)
        for a in range(0, len(pts), 64):
            pt = np.repeat(pts[a : a + 64], len(pts), axis=0)
            ps = np.tile(pts, (len(pts[a : a + 64]), 1))
            stats.update(pt, ps)
            grid_pairs += len(pt)
    table = []
    for (e, d), m in sorted(stats.eligible.items()):
        table.append({
            "eps": e, "delta": d, "bound": min(1.0, flip_bound(e, d)),
            "observed": stats.flips[(e, d)] / m if m else 0.0, "eligible": m,
        })
    return FlipReport(
        pairs=stats.pairs, random_pairs=trials, grid_pairs=grid_pairs,
        violations=stats.violations, pinsker_violations=stats.pinsker_violations,
        max_pinsker_excess=stats.max_pinsker_excess, covered_item_pairs=int(stats.covered.sum()),
        table=table,
    )


# ------------------------------------------------------------------ CMI


@dataclass
class DiscreteEnv:
    """Exact joint table ``P(x, y_1..y_L)`` with sequence scores tilted by ``gamma``.

    ``P(y | x) ∝ exp(gamma * score(x, y))`` where the score is minus the Hamming
    distance to a per-context target sequence plus a non-factorizing
    perturbation; larger gamma concentrates each context on its target.
    """

    table: np.ndarray  # [X, V, ..., V]

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim < 2 or (t < 0).any() or abs(t.sum() - 1.0) > 1e-12:
            raise ValueError("table must be a non-negative joint distribution")
        X, L, V = t.shape[0], t.ndim - 1, t.shape[1]
        if X > 8 or V > 6 or L > 3:
            raise ValueError("DiscreteEnv bounds: |X| <= 8, V <= 6, L <= 3")
        self.table = t

    @property
    def length(self) -> int:
        return self.table.ndim - 1

    @classmethod
    def random(cls, gamma: float, n_ctx: int = 4, V: int = 3, L: int = 3, margin: float = 3.0, coupling: float = 0.5, seed: int = 0) -> "DiscreteEnv":
        rng = np.random.default_rng(seed)
        px = rng.dirichlet(np.ones(n_ctx))
        target = rng.integers(V, size=(n_ctx, L))
        noise = rng.standard_normal((n_ctx,) + (V,) * L)
        seqs = np.indices((V,) * L).reshape(L, -1).T  # [V^L, L]
        ham = (seqs[None, :, :] != target[:, None, :]).sum(-1).reshape((n_ctx,) + (V,) * L)
        score = -margin * ham + coupling * noise
        logits = gamma * score
        flat = logits.reshape(n_ctx, -1)
        flat = np.exp(flat - flat.max(axis=1, keepdims=True))
        cond = flat / flat.sum(axis=1, keepdims=True)
        joint = (px[:, None] * cond).reshape(score.shape)
        return cls(joint / joint.sum())


def cmi_exact(env: DiscreteEnv, t: int) -> float:
    """I(y_t ; y_<t | x) in nats by exact summation (t is 1-based, t >= 2)."""
    if not 2 <= t <= env.length:
        raise ValueError(f"t must be in [2, {env.length}]")
    tab = env.table
    # marginalize positions after t, then flatten the prefix
    p = tab.sum(axis=tuple(range(t + 1, tab.ndim))) if t < env.length else tab
    X, V = p.shape[0], p.shape[-1]
    p = p.reshape(X, -1, V)  # [x, prefix, y_t]
    px = p.sum(axis=(1, 2))[:, None, None]
    pxa = p.sum(axis=2, keepdims=True)
    pxb = p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = xlogy(p, p * px) - xlogy(p, pxa * pxb)
    val = float(np.where(p > 0, terms, 0.0).sum())
    return max(val, 0.0)  # rounding can leave about -1e-17 at independence


def conditional_entropy(env: DiscreteEnv, positions) -> float:
    """H(y_positions | x) in nats, positions 1-based."""
    tab = env.table
    keep = {0, *positions}
    p = tab.sum(axis=tuple(i for i in range(tab.ndim) if i not in keep))
    X = p.shape[0]
    p = p.reshape(X, -1)
    px = p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(-np.where(p > 0, xlogy(p, p) - xlogy(p, px), 0.0).sum())


def cmi_sweep(gammas=(1, 2, 4, 8), t: int | None = None, **env_kwargs) -> list[tuple[float, float]]:
    """(gamma, CMI at position t) for one fixed random environment."""
    out = []
    for g in gammas:
        env = DiscreteEnv.random(float(g), **env_kwargs)
        out.append((float(g), cmi_exact(env, t or env.length)))
    return out
