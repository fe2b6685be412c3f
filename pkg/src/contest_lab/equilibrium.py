"""Nash equilibria of weighted single-task and budgeted multi-task Tullock contests.

Single-task equilibria come from bisection on the aggregate condition
``sum_k y / ((E/w_k)**2 c_k + y) = 1``; multi-task equilibria from damped
best-response dynamics with a waterfilling inner solve.  ``brute_force_oracle``
is an independent discrete check that shares none of that machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from contest_lab.core import (
    ContestError,
    ContestSpec,
    EffortProfile,
    EquilibriumSolution,
    InvalidPrize,
    Regime,
    SpecError,
    utility_vector,
    win_prob_matrix,
)


class SolverFailure(ContestError, RuntimeError):
    def __init__(self, message: str, residual: float = math.nan, profile: np.ndarray | None = None):
        super().__init__(message)
        self.residual = residual
        self.profile = profile


class DegeneracyError(ContestError, RuntimeError):
    """Some task has no rival effort at all, so a best response does not exist."""


class CycleError(ContestError, RuntimeError):
    def __init__(self, message: str, orbit: list[np.ndarray]):
        super().__init__(message)
        self.orbit = orbit


@dataclass(frozen=True)
class SolverSettings:
    tolerance: float = 1e-10
    max_iterations: int = 10_000
    damping: float = 0.5
    grid_resolution: float = 1e-3

    def __post_init__(self):
        if not self.tolerance > 0:
            raise SpecError("tolerance must be positive", "tolerance", self.tolerance)
        if self.max_iterations < 1:
            raise SpecError("max_iterations must be >= 1", "max_iterations", self.max_iterations)
        if not 0 < self.damping <= 1:
            raise SpecError("damping must lie in (0, 1]", "damping", self.damping)
        if not self.grid_resolution > 0:
            raise SpecError("grid_resolution must be positive", "grid_resolution", self.grid_resolution)


DEFAULT_SETTINGS = SolverSettings()


def _bisect(f, lo: float, hi: float, max_iter: int = 400) -> float:
    """Root of a decreasing function on [lo, hi], to machine precision."""
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# --------------------------------------------------------------------------
# single task


def equilibrium_effort(prize, aggregate, cost, weight):
    """Equilibrium effort given the weighted aggregate, ``y (E/w) / ((E/w)^2 c + y)``."""
    x = np.asarray(aggregate) / np.asarray(weight)
    return prize * x / (x**2 * cost + prize)


def _check_single(spec: ContestSpec) -> tuple[float, np.ndarray, np.ndarray]:
    if not spec.regime.single_task or spec.m != 1:
        raise SpecError("single-task solver needs m=1 and a single-task regime", "regime", spec.regime.value)
    y = float(spec.prizes[0])
    if y <= 0:
        raise InvalidPrize(f"prize must be positive, got {y}", "prizes", y)
    return y, spec.costs[:, 0], spec.weights


def solve_single_task(spec: ContestSpec, settings: SolverSettings = DEFAULT_SETTINGS) -> EquilibriumSolution:
    y, c, w = _check_single(spec)

    def excess(E):
        return np.sum(y / ((E / w) ** 2 * c + y)) - 1.0

    hi = 1.0
    while excess(hi) > 0:
        hi *= 2.0
        if hi > 1e300:
            raise SolverFailure("could not bracket the aggregate effort", residual=float(excess(hi)))
    lo = 0.0
    iterations = 0
    while iterations < settings.max_iterations:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
        iterations += 1
    E = 0.5 * (lo + hi)
    residual = abs(excess(E))
    if residual > settings.tolerance:
        raise SolverFailure(f"aggregate condition residual {residual:.3g} above tolerance", residual)

    e = equilibrium_effort(y, E, c, w)
    efforts = e[:, None]
    P = win_prob_matrix(spec.csf_weights(), efforts)
    return EquilibriumSolution(
        efforts=EffortProfile(efforts),
        win_probs=P,
        aggregate=float(E),
        utilities=utility_vector(spec, efforts),
        weighted_efforts=w * e,
        iterations=iterations,
        residual=float(residual),
        solver="single-task-bisection",
    )


def free_competition_two_player(c1: float, c2: float, y: float = 1.0) -> tuple[float, float, float]:
    """Closed-form efforts of a two-player unweighted lottery contest."""
    if c1 <= 0 or c2 <= 0 or y <= 0:
        raise SpecError("costs and prize must be positive", "costs", (c1, c2, y))
    denom = math.sqrt(c1) + math.sqrt(c2)
    e1 = (c2 / c1) ** 0.25 / denom * math.sqrt(y)
    e2 = (c1 / c2) ** 0.25 / denom * math.sqrt(y)
    return e1, e2, e1 + e2


class BestResponse(NamedTuple):
    effort: float
    degenerate: bool


def best_response_single(spec: ContestSpec, others_weighted_sum: float, contestant: int) -> BestResponse:
    """Maximizer of ``w e / (w e + S) y - c e^2 / 2`` for one contestant.

    With ``S == 0`` there is no maximizer (any positive effort wins outright),
    so zero is returned with ``degenerate=True``.
    """
    y = float(spec.prizes[0])
    if not 0 <= contestant < spec.n:
        raise SpecError(f"contestant index {contestant} out of range", "contestant", contestant)
    S = float(others_weighted_sum)
    if S < 0:
        raise SpecError("others_weighted_sum must be non-negative", "others_weighted_sum", S)
    if S == 0:
        return BestResponse(0.0, True)
    c = float(spec.costs[contestant, 0])
    w = float(spec.weights[contestant]) if spec.weights is not None else 1.0
    hi = w * y / (S * c)
    e = _bisect(lambda e: w * S * y / (w * e + S) ** 2 - c * e, 0.0, hi)
    return BestResponse(e, False)


# --------------------------------------------------------------------------
# multi task


def _task_responses(S: np.ndarray, y: np.ndarray, c: np.ndarray, lam: np.ndarray, n_iter: int = 64) -> np.ndarray:
    """Per-task responses solving ``S y / (e + S)^2 = c e + lam``, clamped at zero.

    All arguments broadcast to ``(n, m)``; ``S`` must be positive wherever ``y`` is.
    """
    active = y > 0
    S = np.where(active, S, 1.0)
    slope0 = np.where(active, y / S, 0.0) - lam
    # g(e) = S y/(e+S)^2 - c e - lam is convex and decreasing, so Newton from
    # e = 0 (where g > 0) climbs monotonically to the root without overshoot
    e = np.zeros(np.broadcast(S, y, c, lam).shape)
    for _ in range(n_iter):
        d = e + S
        g = S * y / d**2 - c * e - lam
        step = g / (2 * S * y / d**3 + c)
        e = np.where(slope0 > 0, e + step, 0.0)
        if np.all(np.abs(step) <= 1e-15 * (1.0 + e)):
            break
    return e


def multi_task_best_response(spec: ContestSpec, efforts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Simultaneous best responses of every contestant to ``efforts``.

    Returns the response profile and each contestant's budget multiplier.
    """
    y = np.broadcast_to(spec.prizes[None, :], efforts.shape)
    c = spec.costs
    S = efforts.sum(axis=0, keepdims=True) - efforts
    if np.any((S <= 0) & (y > 0)):
        k, i = map(int, np.argwhere((S <= 0) & (y > 0))[0])
        raise DegeneracyError(f"contestant {k + 1} faces zero rival effort on task {i + 1}")
    cap = spec.budget_cap
    zero = np.zeros((efforts.shape[0], 1))
    free = _task_responses(S, y, c, zero)
    binding = free.sum(axis=1) > cap
    lam = zero.copy()
    resp = free
    if np.any(binding):
        idx = np.flatnonzero(binding)
        Sb, yb, cb = S[idx], y[idx], c[idx]
        with np.errstate(divide="ignore"):
            lam_hi = np.max(np.where(yb > 0, yb / Sb, 0.0), axis=1, keepdims=True)
        lam_lo = np.zeros_like(lam_hi)
        for _ in range(64):
            mid = 0.5 * (lam_lo + lam_hi)
            over = _task_responses(Sb, yb, cb, mid).sum(axis=1, keepdims=True) > cap
            lam_lo = np.where(over, mid, lam_lo)
            lam_hi = np.where(over, lam_hi, mid)
        lam_b = 0.5 * (lam_lo + lam_hi)
        rb = _task_responses(Sb, yb, cb, lam_b)
        # bisection leaves the bundle a hair off the cap; rescale onto it
        tot = rb.sum(axis=1, keepdims=True)
        rb = np.where(tot > 0, rb * cap / np.where(tot > 0, tot, 1.0), rb)
        resp = free.copy()
        resp[idx] = rb
        lam[idx] = lam_b
    return resp, lam[:, 0]


def _default_start(spec: ContestSpec) -> np.ndarray:
    y = spec.prizes[None, :]
    base = 0.5 * np.minimum(spec.budget_cap / spec.m, np.sqrt(y / spec.costs))
    return np.broadcast_to(base, spec.costs.shape).copy()


def _multi_solution(spec: ContestSpec, e: np.ndarray, lam: np.ndarray, iterations: int, residual: float,
                    solver: str, flags=()) -> EquilibriumSolution:
    P = win_prob_matrix(np.ones_like(e), e)
    return EquilibriumSolution(
        efforts=EffortProfile(e),
        win_probs=P,
        aggregate=e.sum(axis=0),
        utilities=utility_vector(spec, e),
        shadow_costs=lam,
        iterations=iterations,
        residual=residual,
        solver=solver,
        flags=list(flags),
    )


def solve_multi_task(spec: ContestSpec, settings: SolverSettings = DEFAULT_SETTINGS,
                     start: np.ndarray | None = None) -> EquilibriumSolution:
    if spec.regime is not Regime.MULTI:
        raise SpecError("multi-task solver needs the MultiTask regime", "regime", spec.regime.value)
    e = _default_start(spec) if start is None else np.array(start, dtype=float)
    if e.shape != spec.costs.shape:
        raise SpecError("start profile has the wrong shape", "start", e.shape)
    d = settings.damping
    residual = math.inf
    for it in range(1, settings.max_iterations + 1):
        br, lam = multi_task_best_response(spec, e)
        residual = float(np.max(np.abs(br - e)))
        if residual < settings.tolerance:
            # report the undamped response so the budget and slackness hold exactly
            return _multi_solution(spec, br, lam, it, residual, "multi-task-damped-br")
        e = (1 - d) * e + d * br
    raise SolverFailure(f"best-response iteration did not converge in {settings.max_iterations} steps "
                        f"(residual {residual:.3g})", residual, e)


def kkt_residuals(spec: ContestSpec, sol: EquilibriumSolution) -> dict[str, float]:
    """Largest violations of stationarity, dual feasibility and complementary slackness."""
    e = sol.e
    lam = sol.shadow_costs if sol.shadow_costs is not None else np.zeros(e.shape[0])
    E = e.sum(axis=0, keepdims=True)
    y = spec.prizes[None, :]
    grad = (E - e) / E**2 * y - spec.costs * e - lam[:, None]
    interior = e > 1e-12
    stat = np.max(np.abs(np.where(interior, grad, 0.0)))
    dual = max(0.0, float(np.max(np.where(interior, -np.inf, grad))))
    slack = spec.budget_cap - e.sum(axis=1)
    return {
        "stationarity": float(stat),
        "dual_feasibility": dual,
        "complementary_slackness": float(np.max(np.abs(lam * slack))),
        "primal_feasibility": float(max(0.0, -slack.min())),
    }


def multistart_multi_task(spec: ContestSpec, settings: SolverSettings = DEFAULT_SETTINGS, starts: int = 10,
                          seed: int = 0, atol: float = 1e-6) -> dict:
    """Solve from random starting profiles and report any distinct equilibria found."""
    rng = np.random.default_rng(seed)
    found: list[EquilibriumSolution] = []
    failures = 0
    for _ in range(starts):
        raw = rng.uniform(0.05, 1.0, size=spec.costs.shape)
        start = raw / raw.sum(axis=1, keepdims=True) * spec.budget_cap * rng.uniform(0.2, 1.0)
        try:
            sol = solve_multi_task(spec, settings, start=start)
        except (SolverFailure, DegeneracyError):
            failures += 1
            continue
        if not any(np.max(np.abs(sol.e - f.e)) < atol for f in found):
            found.append(sol)
    return {"distinct": found, "failures": failures, "unique": len(found) == 1}


def solve(spec: ContestSpec, settings: SolverSettings = DEFAULT_SETTINGS) -> EquilibriumSolution:
    """Dispatch on regime.  OptimalWeights designs the weights first."""
    if spec.regime is Regime.MULTI:
        return solve_multi_task(spec, settings)
    if spec.regime is Regime.OPTIMAL:
        from contest_lab.design import optimal_weights

        design = optimal_weights(spec.costs[:, 0], float(spec.prizes[0]))
        spec = spec.with_weights(design.weights)
    return solve_single_task(spec, settings)


# --------------------------------------------------------------------------
# discrete oracle


class _Grid:
    """Integer effort grid; effort = index * delta."""

    def __init__(self, spec: ContestSpec, delta: float):
        self.spec = spec
        self.delta = delta
        self.w = spec.csf_weights()
        y = spec.prizes[None, :]
        # above sqrt(2y/c) a task's payoff is negative, below the zero-effort payoff
        upper = np.sqrt(2 * y / spec.costs)
        if spec.regime is Regime.MULTI:
            self.budget = int(math.floor(spec.budget_cap / delta + 1e-9))
            upper = np.minimum(upper, self.budget * delta)
        else:
            self.budget = None
        self.top = np.floor(upper / delta + 1e-9).astype(int)

    def task_payoffs(self, idx: np.ndarray, k: int, i: int) -> np.ndarray:
        spec = self.spec
        e = np.arange(self.top[k, i] + 1) * self.delta
        others = np.delete(np.arange(spec.n), k)
        S = float(np.sum(self.w[others, i] * idx[others, i] * self.delta))
        wk = self.w[k, i]
        with np.errstate(divide="ignore", invalid="ignore"):
            P = wk * e / (wk * e + S)
        if S == 0:
            P[0] = wk / self.w[:, i].sum()
        return P * spec.prizes[i] - 0.5 * spec.costs[k, i] * e**2

    def best_response(self, idx: np.ndarray, k: int) -> tuple[np.ndarray, float]:
        """Exact discrete best response of contestant k; ties go to lower effort."""
        m = self.spec.m
        f = [self.task_payoffs(idx, k, i) for i in range(m)]
        choice = np.array([int(np.argmax(fi)) for fi in f])
        if self.budget is None or choice.sum() <= self.budget:
            return choice, float(sum(fi[j] for fi, j in zip(f, choice)))
        # budget binds: max-plus knapsack over budget units
        B = self.budget
        b = np.arange(B + 1)
        first = np.full(B + 1, -np.inf)
        first[: len(f[0])] = f[0]
        G = np.maximum.accumulate(first)
        tables = []
        for fi in f[1:]:
            j = np.arange(len(fi))
            rem = b[:, None] - j[None, :]
            M = np.where(rem >= 0, fi[None, :] + G[np.clip(rem, 0, None)], -np.inf)
            arg = np.argmax(M, axis=1)
            tables.append(arg)
            G = M[b, arg]
        out = np.zeros(m, dtype=int)
        left = B
        for t in range(m - 1, 0, -1):
            out[t] = tables[t - 1][left]
            left -= out[t]
        out[0] = int(np.argmax(f[0][: min(left, len(f[0]) - 1) + 1]))
        return out, float(G[B])

    def payoff(self, idx: np.ndarray, k: int) -> float:
        return float(utility_vector(self.spec, idx * self.delta)[k])


def brute_force_oracle(spec: ContestSpec, settings: SolverSettings = DEFAULT_SETTINGS) -> EquilibriumSolution:
    """Discrete Nash profile on the grid ``{0, delta, 2 delta, ...}`` by round-robin exact best responses."""
    if spec.n > 3 or spec.m > 3:
        raise SpecError("brute-force oracle is limited to n <= 3 and m <= 3", "n", (spec.n, spec.m))
    grid = _Grid(spec, settings.grid_resolution)
    idx = np.zeros(spec.costs.shape, dtype=int)
    seen: dict[bytes, int] = {}
    history: list[np.ndarray] = []
    for rnd in range(1, settings.max_iterations + 1):
        key = idx.tobytes()
        if key in seen:
            orbit = history[seen[key]:]
            raise CycleError(f"discrete best responses cycle with period {len(orbit)}", orbit)
        seen[key] = len(history)
        history.append(idx.copy())
        changed = False
        for k in range(spec.n):
            br, _ = grid.best_response(idx, k)
            if np.any(br != idx[k]):
                idx[k] = br
                changed = True
        if not changed:
            break
    else:
        raise SolverFailure("discrete best responses did not settle", profile=idx * grid.delta)

    e = idx * grid.delta
    w = spec.csf_weights()
    P = win_prob_matrix(w, e)
    single = spec.regime.single_task
    return EquilibriumSolution(
        efforts=EffortProfile(e),
        win_probs=P,
        aggregate=float((w * e).sum()) if single else e.sum(axis=0),
        utilities=utility_vector(spec, e),
        weighted_efforts=(w * e)[:, 0] if single else None,
        iterations=rnd,
        residual=0.0,
        solver="discrete-oracle",
    )


def deviation_gains(spec: ContestSpec, efforts, delta: float = 1e-3) -> np.ndarray:
    """Best gain each contestant can get by a unilateral move to any grid point.

    The current profile itself need not lie on the grid.
    """
    e = np.asarray(efforts.efforts if isinstance(efforts, EffortProfile) else efforts, dtype=float)
    if e.ndim == 1:
        e = e[:, None]
    grid = _Grid(spec, delta)
    base = utility_vector(spec, e)
    gains = np.empty(spec.n)
    w = spec.csf_weights()
    for k in range(spec.n):
        # rivals stay off-grid: evaluate payoffs directly against their true efforts
        others = np.delete(np.arange(spec.n), k)
        f = []
        for i in range(spec.m):
            x = np.arange(grid.top[k, i] + 1) * delta
            S = float(np.sum(w[others, i] * e[others, i]))
            with np.errstate(divide="ignore", invalid="ignore"):
                P = w[k, i] * x / (w[k, i] * x + S)
            if S == 0:
                P[0] = w[k, i] / w[:, i].sum()
            f.append(P * spec.prizes[i] - 0.5 * spec.costs[k, i] * x**2)
        best = _best_bundle(f, grid.budget)
        gains[k] = best - base[k]
    return gains


def _best_bundle(f: list[np.ndarray], budget: int | None) -> float:
    choice = [int(np.argmax(fi)) for fi in f]
    if budget is None or sum(choice) <= budget:
        return float(sum(fi[j] for fi, j in zip(f, choice)))
    G = np.full(budget + 1, -np.inf)
    G[: len(f[0])] = f[0][: budget + 1]
    G = np.maximum.accumulate(G)
    b = np.arange(budget + 1)
    for fi in f[1:]:
        j = np.arange(len(fi))
        rem = b[:, None] - j[None, :]
        M = np.where(rem >= 0, fi[None, :] + G[np.clip(rem, 0, None)], -np.inf)
        G = M.max(axis=1)
    return float(G[budget])
