"""Designer-side problems: optimal discriminatory weights, cost classification,
task-count comparison and the three-regime specialization comparison."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from contest_lab.core import (
    ClassificationScheme,
    ContestError,
    ContestSpec,
    InvalidPrize,
    Regime,
    SpecError,
)
from contest_lab.equilibrium import (
    DEFAULT_SETTINGS,
    EquilibriumSolution,
    SolverSettings,
    solve,
    solve_multi_task,
    solve_single_task,
)


class InvalidClassCount(SpecError):
    pass


class AdvantageOrderingError(SpecError):
    pass


@dataclass(eq=False)
class DesignSolution:
    win_probs: np.ndarray
    weights: np.ndarray
    multiplier: float
    total_effort: float
    efforts: np.ndarray
    objective: float

    def to_dict(self) -> dict:
        return {
            "win_probs": self.win_probs.tolist(),
            "weights": self.weights.tolist(),
            "multiplier": self.multiplier,
            "total_effort": self.total_effort,
            "efforts": self.efforts.tolist(),
            "objective": self.objective,
        }

    def rows(self) -> list[dict]:
        return [
            {"contestant": k + 1, "win_prob": float(p), "weight": float(w), "effort": float(e)}
            for k, (p, w, e) in enumerate(zip(self.win_probs, self.weights, self.efforts))
        ]


def designed_win_probs(costs: np.ndarray, y: float, lam: float) -> np.ndarray:
    """Win probabilities on the FOC's lower branch for multiplier ``lam``."""
    t = lam**2 * costs
    return 0.5 * (1.0 - np.sqrt(t / (y + t)))


def effort_objective(P, costs, y: float) -> float:
    """Total raw effort implied by a win-probability vector, ``sum sqrt(y P (1-P) / c)``."""
    P = np.asarray(P, dtype=float)
    return float(np.sum(np.sqrt(y * P * (1 - P) / np.asarray(costs, dtype=float))))


def optimal_weights(costs, y: float = 1.0, settings: SolverSettings = DEFAULT_SETTINGS) -> DesignSolution:
    c = np.asarray(costs, dtype=float).ravel()
    if c.size < 2:
        from contest_lab.core import DegenerateContest

        raise DegenerateContest(f"need at least 2 contestants, got n={c.size}", "n", c.size)
    if y <= 0:
        raise InvalidPrize(f"prize must be positive, got {y}", "prizes", y)
    if np.any(c <= 0):
        raise SpecError("costs must be positive", "costs", float(c.min()))

    if c.size == 2:
        lam = 0.0
    else:
        hi = 1.0
        while designed_win_probs(c, y, hi).sum() > 1.0:
            hi *= 2.0
        lo = 0.0
        for _ in range(400):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if designed_win_probs(c, y, mid).sum() > 1.0:
                lo = mid
            else:
                hi = mid
        lam = 0.5 * (lo + hi)
    P = designed_win_probs(c, y, lam)
    P = P / P.sum()

    w = np.sqrt(c / (y / P - y))
    w = w / w.sum()
    sol = solve_single_task(ContestSpec(c, [y], Regime.OPTIMAL, weights=w), settings)
    e = sol.e[:, 0]
    return DesignSolution(
        win_probs=P,
        weights=w,
        multiplier=float(lam),
        total_effort=float(e.sum()),
        efforts=e,
        objective=effort_objective(P, c, y),
    )


# --------------------------------------------------------------------------
# classification


def kmeans_1d(values, n_classes: int) -> tuple[list[np.ndarray], float]:
    """Exact 1-D k-means by dynamic programming over sorted prefix sums.

    Returns the index groups (into ``values``, sorted ascending by value) and
    the total within-class sum of squares.  Equal values are never split.
    """
    x = np.asarray(values, dtype=float).ravel()
    n = x.size
    order = np.argsort(x, kind="stable")
    xs = x[order]
    s1 = np.concatenate([[0.0], np.cumsum(xs)])
    s2 = np.concatenate([[0.0], np.cumsum(xs**2)])

    def sse(i, j):  # points i..j-1
        cnt = j - i
        tot = s1[j] - s1[i]
        return max(0.0, (s2[j] - s2[i]) - tot * tot / cnt)

    can_cut = np.ones(n + 1, dtype=bool)
    can_cut[1:n] = xs[1:] > xs[:-1]

    inf = math.inf
    D = np.full((n_classes + 1, n + 1), inf)
    back = np.zeros((n_classes + 1, n + 1), dtype=int)
    D[0, 0] = 0.0
    for q in range(1, n_classes + 1):
        for j in range(q, n + 1):
            if not can_cut[j]:
                continue
            best, arg = inf, -1
            for i in range(q - 1, j):
                if not can_cut[i] or D[q - 1, i] == inf:
                    continue
                v = D[q - 1, i] + sse(i, j)
                if v < best:
                    best, arg = v, i
            D[q, j] = best
            back[q, j] = arg
    if D[n_classes, n] == inf:
        raise InvalidClassCount(f"cannot form {n_classes} classes from {np.unique(xs).size} distinct costs",
                                "N", n_classes)
    cuts = [n]
    for q in range(n_classes, 0, -1):
        cuts.append(back[q, cuts[-1]])
    cuts = cuts[::-1]
    groups = [order[cuts[q]:cuts[q + 1]] for q in range(n_classes)]
    return groups, float(D[n_classes, n])


def classify_costs(costs, n_classes: int, y: float = 1.0) -> ClassificationScheme:
    c = np.asarray(costs, dtype=float).ravel()
    if not 1 <= n_classes <= c.size:
        raise InvalidClassCount(f"class count must lie in [1, {c.size}], got {n_classes}", "N", n_classes)
    groups, sse = kmeans_1d(c, n_classes)
    means = np.array([c[g].mean() for g in groups])
    bounds = tuple(float(0.5 * (c[groups[q]].max() + c[groups[q + 1]].min())) for q in range(n_classes - 1))

    rep = np.empty_like(c)
    for q, g in enumerate(groups):
        rep[g] = means[q]
    if c.size >= 2:
        w = optimal_weights(rep, y).weights
        class_w = tuple(float(w[g[0]]) for g in groups)
    else:
        class_w = (1.0,)
    return ClassificationScheme(bounds, class_w, tuple(float(v) for v in means), sse=sse)


# --------------------------------------------------------------------------
# candidate comparison


@dataclass
class CandidateResult:
    index: int
    label: str
    total_effort: float
    task_totals: list[float]
    error: str | None = None
    solution: EquilibriumSolution | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"index": self.index, "label": self.label, "total_effort": self.total_effort,
                "task_totals": self.task_totals, "error": self.error}


def compare_task_counts(specs, labels=None, settings: SolverSettings = DEFAULT_SETTINGS) -> list[CandidateResult]:
    """Solve every candidate and rank by total raw equilibrium effort.

    Failed candidates are kept, carrying their error, and ranked last.
    """
    specs = list(specs)
    labels = list(labels) if labels is not None else [f"candidate-{i + 1}" for i in range(len(specs))]
    results = []
    for i, (spec, label) in enumerate(zip(specs, labels)):
        try:
            sol = solve(spec, settings)
        except ContestError as exc:
            results.append(CandidateResult(i, label, math.nan, [], f"{type(exc).__name__}: {exc}"))
            continue
        results.append(CandidateResult(i, label, sol.total_effort, sol.task_totals.tolist(), solution=sol))
    return sorted(results, key=lambda r: (r.error is not None, -r.total_effort if r.error is None else 0, r.index))


# --------------------------------------------------------------------------
# specialization report


def closed_form_free_total(c1: float, c2: float) -> float:
    return ((c1 / c2) ** 0.25 + (c2 / c1) ** 0.25) / (math.sqrt(c1) + math.sqrt(c2))


def closed_form_classified_total(c1: float, c2: float) -> float:
    return 0.5 / math.sqrt(c1) + 0.5 / math.sqrt(c2)


def closed_form_multitask_totals(costs) -> tuple[float, float]:
    """Candidate closed-form task totals for the two-player, two-task contest.

    Square-rooted costs in the denominators; ``c_ab`` is contestant a's cost on
    task b.  These do not agree with the equilibrium solver, which is why the
    report carries both.
    """
    c = np.asarray(costs, dtype=float)
    c11, c12, c21, c22 = c[0, 0], c[0, 1], c[1, 0], c[1, 1]
    e1 = 0.5 / math.sqrt(c11) + (c12 / c22) ** 0.25 / (4 * (math.sqrt(c22) + math.sqrt(c11)))
    e2 = 0.5 / math.sqrt(c12) + (c11 / c21) ** 0.25 / (4 * (math.sqrt(c11) + math.sqrt(c21)))
    return e1, e2


@dataclass(eq=False)
class SpecializationReport:
    costs: np.ndarray
    prize: float
    free: EquilibriumSolution
    classified: EquilibriumSolution
    multi: EquilibriumSolution
    margins: dict[str, float]
    closed_forms: dict[str, dict[str, float]]

    @property
    def verdicts(self) -> dict[str, bool]:
        out = {}
        for name, margin in self.margins.items():
            out[name] = margin >= -1e-12 if name == "classification_gain" else margin > 0
        return out

    @property
    def totals(self) -> dict[str, float]:
        return {
            "free": self.free.total_effort,
            "classified": self.classified.total_effort,
            "multi_task_1": float(self.multi.task_totals[0]),
            "multi_task_2": float(self.multi.task_totals[1]),
        }

    @property
    def effort_deltas(self) -> np.ndarray:
        """Multi-task minus free-competition efforts, per contestant and task."""
        base = np.zeros_like(self.multi.e)
        base[:, 0] = self.free.e[:, 0]
        return self.multi.e - base

    @property
    def closed_form_discrepancy(self) -> bool:
        return any(abs(v["closed_form"] - v["equilibrium"]) > 1e-6 for v in self.closed_forms.values())

    def to_dict(self) -> dict:
        return {
            "costs": self.costs.tolist(),
            "prize": self.prize,
            "totals": self.totals,
            "efforts": {"free": self.free.e[:, 0].tolist(), "classified": self.classified.e[:, 0].tolist(),
                        "multi": self.multi.e.tolist()},
            "effort_deltas": self.effort_deltas.tolist(),
            "margins": self.margins,
            "verdicts": self.verdicts,
            "closed_forms": self.closed_forms,
            "closed_form_discrepancy": self.closed_form_discrepancy,
        }

    def rows(self) -> list[dict]:
        rows = []
        for regime, sol in (("free", self.free), ("classified", self.classified), ("multi", self.multi)):
            for k in range(sol.e.shape[0]):
                for i in range(sol.e.shape[1]):
                    rows.append({"regime": regime, "contestant": k + 1, "task": i + 1,
                                 "effort": float(sol.e[k, i])})
        return rows


def specialization_report(costs_2task, y: float = 1.0, budget_cap: float = 1.0,
                          settings: SolverSettings = DEFAULT_SETTINGS) -> SpecializationReport:
    c = np.asarray(costs_2task, dtype=float)
    if c.shape != (2, 2):
        raise SpecError(f"expected a 2x2 cost matrix, got shape {c.shape}", "costs", c.shape)
    if not (c[0, 0] < c[1, 0] and c[1, 1] < c[0, 1]):
        raise AdvantageOrderingError(
            "contestant 1 must be cheaper on task 1 and contestant 2 cheaper on task 2", "costs", c.tolist())

    free = solve_single_task(ContestSpec(c[:, 0], [y]), settings)
    scheme = classify_costs(c[:, 0], 2, y)
    classified = solve_single_task(ContestSpec(c[:, 0], [y], Regime.CLASSIFIED, scheme=scheme), settings)
    multi = solve_multi_task(ContestSpec(c, [y, y], Regime.MULTI, budget_cap=budget_cap), settings)

    e = multi.e
    E1, E2 = multi.task_totals
    margins = {
        "classification_gain": classified.total_effort - free.total_effort,
        "task1_total_positive": float(E1),
        "task2_total_positive": float(E2),
        "tilt_contestant_1": float(e[0, 0] - e[0, 1]),
        "tilt_contestant_2": float(e[1, 1] - e[1, 0]),
        "leader_original_task_vs_grouped": float(e[0, 0] - classified.e[0, 0]),
    }

    scale = math.sqrt(y)
    p1, p2 = closed_form_multitask_totals(c)
    closed_forms = {
        "free_task_1": {"closed_form": scale * closed_form_free_total(c[0, 0], c[1, 0]), "equilibrium": free.total_effort},
        "classified_task_1": {"closed_form": scale * closed_form_classified_total(c[0, 0], c[1, 0]),
                             "equilibrium": classified.total_effort},
        "multi_task_1": {"closed_form": scale * p1, "equilibrium": float(E1)},
        "multi_task_2": {"closed_form": scale * p2, "equilibrium": float(E2)},
    }
    return SpecializationReport(c, float(y), free, classified, multi, margins, closed_forms)
