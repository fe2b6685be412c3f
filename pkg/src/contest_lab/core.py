"""Contest primitives: specs, effort profiles, the lottery CSF and payoffs.

Costs are stored contestant-major: ``costs[k, i]`` is contestant ``k``'s
marginal cost coefficient on task ``i``, so an ``n x m`` matrix.  Efforts
use the same layout.
"""

from __future__ import annotations

import enum
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib


class ContestError(Exception):
    """Base class for every error raised by contest_lab."""


class SpecError(ContestError, ValueError):
    """A ContestSpec (or scenario document) violates an invariant."""

    def __init__(self, message: str, field: str | None = None, value: Any = None):
        super().__init__(message)
        self.field = field
        self.value = value


class DimensionError(ContestError, ValueError):
    def __init__(self, message: str, axis: str):
        super().__init__(message)
        self.axis = axis


class DegenerateContest(SpecError):
    """Fewer than two contestants: a lone entrant wins with zero effort."""


class InvalidPrize(SpecError):
    pass


class ScenarioParseError(ContestError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class Regime(str, enum.Enum):
    FREE = "FreeCompetition"
    CLASSIFIED = "Classified"
    OPTIMAL = "OptimalWeights"
    MULTI = "MultiTask"

    @property
    def single_task(self) -> bool:
        return self is not Regime.MULTI

    @classmethod
    def parse(cls, name: str) -> "Regime":
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "freecompetition": cls.FREE,
            "free": cls.FREE,
            "classified": cls.CLASSIFIED,
            "classification": cls.CLASSIFIED,
            "optimalweights": cls.OPTIMAL,
            "optimal": cls.OPTIMAL,
            "multitask": cls.MULTI,
            "multi": cls.MULTI,
        }
        try:
            return aliases[key]
        except KeyError:
            raise SpecError(f"unknown regime {name!r}", "regime", name) from None


@dataclass(frozen=True)
class ClassificationScheme:
    """Piecewise cost-bin weights: class ``j`` covers ``[b_{j-1}, b_j)``."""

    boundaries: tuple[float, ...]
    class_weights: tuple[float, ...]
    representative_costs: tuple[float, ...]
    sse: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if len(self.class_weights) < 1:
            raise SpecError("a classification needs at least one class", "class_weights")
        if len(b) != len(self.class_weights) - 1:
            raise SpecError(
                f"{len(self.class_weights)} classes need {len(self.class_weights) - 1} boundaries, "
                f"got {len(b)}",
                "boundaries",
                self.boundaries,
            )
        if np.any(np.diff(b) <= 0):
            raise SpecError("boundaries must be strictly ascending", "boundaries", self.boundaries)
        if any(a <= 0 for a in self.class_weights):
            raise SpecError("class weights must be positive", "class_weights", self.class_weights)

    @property
    def n_classes(self) -> int:
        return len(self.class_weights)

    def assign(self, costs) -> np.ndarray:
        """Class index of every cost."""
        return np.searchsorted(np.asarray(self.boundaries, dtype=float), np.asarray(costs, dtype=float),
                               side="right")

    def weights_for(self, costs) -> np.ndarray:
        """Per-contestant weights, normalized to sum to one."""
        w = np.asarray(self.class_weights, dtype=float)[self.assign(costs)]
        return w / w.sum()


@dataclass(frozen=True, eq=False)
class ContestSpec:
    costs: np.ndarray
    prizes: np.ndarray
    regime: Regime = Regime.FREE
    weights: np.ndarray | None = None
    scheme: ClassificationScheme | None = None
    budget_cap: float = 1.0

    def __post_init__(self):
        costs = np.array(self.costs, dtype=float)
        if costs.ndim == 1:
            costs = costs[:, None]
        prizes = np.atleast_1d(np.array(self.prizes, dtype=float))
        regime = self.regime if isinstance(self.regime, Regime) else Regime.parse(self.regime)
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "prizes", prizes)
        object.__setattr__(self, "regime", regime)
        object.__setattr__(self, "budget_cap", float(self.budget_cap))

        if costs.ndim != 2:
            raise DimensionError(f"costs must be an n x m matrix, got shape {costs.shape}", "costs")
        n, m = costs.shape
        if n < 2:
            raise DegenerateContest(f"need at least 2 contestants, got n={n}", "n", n)
        if prizes.shape != (m,):
            raise DimensionError(f"prizes has length {prizes.size}, expected m={m}", "task")
        if not np.all(np.isfinite(costs)) or np.any(costs <= 0):
            raise SpecError("all costs must be positive and finite", "costs", costs.min())
        if np.any(prizes < 0):
            raise SpecError("prizes must be non-negative", "prizes", prizes.min())
        if np.any(np.diff(prizes) > 0):
            raise SpecError("prizes must be sorted non-increasing", "prizes", prizes.tolist())
        if regime.single_task and m != 1:
            raise SpecError(f"regime {regime.value} requires m=1, got m={m}", "m", m)
        if self.budget_cap <= 0:
            raise SpecError("budget_cap must be positive", "budget_cap", self.budget_cap)

        weights = self.weights
        if regime is Regime.CLASSIFIED and weights is None:
            if self.scheme is None:
                raise SpecError("Classified regime needs a classification scheme", "scheme")
            weights = self.scheme.weights_for(costs[:, 0])
        if regime is Regime.MULTI:
            if weights is not None:
                raise SpecError("weights are single-task only", "weights")
            return
        if weights is None:
            weights = np.full(n, 1.0 / n)
        weights = np.array(weights, dtype=float)
        if weights.shape != (n,):
            raise DimensionError(f"weights has length {weights.size}, expected n={n}", "contestant")
        total = weights.sum()
        if abs(total - 1.0) > 1e-9:
            raise SpecError(f"weights must sum to 1, got sum={total:.12g}", "weights", total)
        if np.any(weights <= 0) or np.any(weights >= 1):
            raise SpecError("each weight must lie in (0, 1)", "weights", weights.tolist())
        object.__setattr__(self, "weights", weights)

    @property
    def n(self) -> int:
        return self.costs.shape[0]

    @property
    def m(self) -> int:
        return self.costs.shape[1]

    def csf_weights(self) -> np.ndarray:
        """``n x m`` weight matrix used inside the CSF (unit weights for multi-task)."""
        if self.regime is Regime.MULTI:
            return np.ones_like(self.costs)
        return self.weights[:, None] * np.ones((1, self.m))

    def with_weights(self, weights, regime: Regime | None = None) -> "ContestSpec":
        return ContestSpec(self.costs, self.prizes, regime or self.regime, weights=weights,
                           scheme=self.scheme, budget_cap=self.budget_cap)

    def to_dict(self) -> dict:
        d = {
            "contest": {"n": self.n, "m": self.m, "regime": self.regime.value,
                        "budget_cap": self.budget_cap},
            "costs": self.costs.tolist(),
            "prizes": self.prizes.tolist(),
        }
        if self.weights is not None:
            d["weights"] = self.weights.tolist()
        return d


@dataclass(frozen=True, eq=False)
class EffortProfile:
    efforts: np.ndarray

    def __post_init__(self):
        e = np.array(self.efforts, dtype=float)
        if e.ndim == 1:
            e = e[:, None]
        if np.any(e < 0):
            raise SpecError("efforts must be non-negative", "efforts", float(e.min()))
        object.__setattr__(self, "efforts", e)

    def check(self, spec: ContestSpec, tol: float = 1e-9) -> None:
        if self.efforts.shape[0] != spec.n:
            raise DimensionError(
                f"profile has {self.efforts.shape[0]} contestants, spec has {spec.n}", "contestant")
        if self.efforts.shape[1] != spec.m:
            raise DimensionError(f"profile has {self.efforts.shape[1]} tasks, spec has {spec.m}", "task")
        if spec.regime is Regime.MULTI:
            over = self.efforts.sum(axis=1) - spec.budget_cap
            if np.any(over > tol):
                raise SpecError("a contestant's total effort exceeds budget_cap", "efforts",
                                float(over.max()))


@dataclass(eq=False)
class EquilibriumSolution:
    efforts: EffortProfile
    win_probs: np.ndarray
    aggregate: float | np.ndarray
    utilities: np.ndarray
    weighted_efforts: np.ndarray | None = None
    shadow_costs: np.ndarray | None = None
    iterations: int = 0
    residual: float = 0.0
    solver: str = ""
    flags: list[str] = field(default_factory=list)

    @property
    def e(self) -> np.ndarray:
        return self.efforts.efforts

    @property
    def task_totals(self) -> np.ndarray:
        """Raw effort summed over contestants, per task."""
        return self.e.sum(axis=0)

    @property
    def total_effort(self) -> float:
        return float(self.e.sum())

    def to_dict(self) -> dict:
        agg = self.aggregate
        return {
            "solver": self.solver,
            "efforts": self.e.tolist(),
            "win_probs": self.win_probs.tolist(),
            "weighted_efforts": None if self.weighted_efforts is None else self.weighted_efforts.tolist(),
            "aggregate": agg.tolist() if isinstance(agg, np.ndarray) else float(agg),
            "task_totals": self.task_totals.tolist(),
            "total_effort": self.total_effort,
            "shadow_costs": None if self.shadow_costs is None else self.shadow_costs.tolist(),
            "utilities": self.utilities.tolist(),
            "diagnostics": {"iterations": self.iterations, "residual": self.residual,
                            "flags": list(self.flags)},
        }

    def rows(self) -> list[dict]:
        """One row per contestant x task, for CSV export."""
        out = []
        for k in range(self.e.shape[0]):
            for i in range(self.e.shape[1]):
                out.append({
                    "contestant": k + 1,
                    "task": i + 1,
                    "effort": float(self.e[k, i]),
                    "win_prob": float(self.win_probs[k, i]),
                    "utility": float(self.utilities[k]),
                    "shadow_cost": 0.0 if self.shadow_costs is None else float(self.shadow_costs[k]),
                })
        return out


def _as_matrix(spec: ContestSpec, profile) -> np.ndarray:
    if not isinstance(profile, EffortProfile):
        profile = EffortProfile(profile)
    profile.check(spec, tol=np.inf)
    return profile.efforts


def win_prob_matrix(weights: np.ndarray, efforts: np.ndarray) -> np.ndarray:
    """Lottery CSF applied task by task; the zero-effort branch splits by weight."""
    weights = np.asarray(weights, dtype=float)
    efforts = np.asarray(efforts, dtype=float)
    we = weights * efforts
    tot = we.sum(axis=0)
    P = np.empty_like(we)
    live = tot > 0
    P[:, live] = we[:, live] / tot[live]
    P[:, ~live] = weights[:, ~live] / weights[:, ~live].sum(axis=0)
    return P


def win_probability(spec: ContestSpec, profile, task: int, contestant: int) -> float:
    e = _as_matrix(spec, profile)
    if not 0 <= task < spec.m:
        raise DimensionError(f"task index {task} out of range for m={spec.m}", "task")
    if not 0 <= contestant < spec.n:
        raise DimensionError(f"contestant index {contestant} out of range for n={spec.n}", "contestant")
    return float(win_prob_matrix(spec.csf_weights(), e)[contestant, task])


def utility_vector(spec: ContestSpec, efforts: np.ndarray) -> np.ndarray:
    P = win_prob_matrix(spec.csf_weights(), efforts)
    return (P * spec.prizes[None, :] - 0.5 * spec.costs * efforts**2).sum(axis=1)


def expected_utility(spec: ContestSpec, profile, contestant: int) -> float:
    """Sum over tasks of ``P_ik * y_i - c_ik * e_ik**2 / 2``."""
    e = _as_matrix(spec, profile)
    if not 0 <= contestant < spec.n:
        raise DimensionError(f"contestant index {contestant} out of range for n={spec.n}", "contestant")
    return float(utility_vector(spec, e)[contestant])


# --------------------------------------------------------------------------
# scenario documents


def _require(doc: Mapping, key: str, where: str):
    if key not in doc:
        raise SpecError(f"missing field {where}{key}", f"{where}{key}")
    return doc[key]


def parse_scenario(text: str, fmt: str = "toml") -> dict:
    if fmt == "json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioParseError(f"JSON parse error at line {exc.lineno}: {exc.msg}", exc.lineno) from exc
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # tomli reports "(at line L, column C)" in the message
        line = None
        msg = str(exc)
        if "line " in msg:
            try:
                line = int(msg.split("line ")[1].split(",")[0].rstrip(")"))
            except ValueError:
                pass
        raise ScenarioParseError(f"TOML parse error: {msg}", line) from exc


def _section(doc: Mapping, key: str, default=None):
    """A matrix/vector section, written either as a bare array or as a table with ``values``."""
    val = doc.get(key, default)
    if isinstance(val, Mapping):
        val = _require(val, "values", f"{key}.")
    if val is None:
        return None
    try:
        return np.array(val, dtype=float)
    except (TypeError, ValueError):
        raise SpecError(f"{key} must be a rectangular numeric array", key, val) from None


def spec_from_dict(doc: Mapping) -> ContestSpec:
    contest = doc.get("contest", {})
    if not isinstance(contest, Mapping):
        raise SpecError("section 'contest' must be a table", "contest")
    regime = Regime.parse(contest.get("regime", "FreeCompetition"))
    _require(doc, "costs", "")
    costs = _section(doc, "costs")
    if costs.ndim == 1:
        costs = costs[:, None]
    if costs.ndim != 2:
        raise SpecError("costs must be a rectangular matrix", "costs")
    prizes = np.atleast_1d(_section(doc, "prizes", [1.0] * costs.shape[1]))
    for key, actual in (("n", costs.shape[0]), ("m", costs.shape[1])):
        if key in contest and int(contest[key]) != actual:
            if key == "m" and regime.single_task and int(contest[key]) != 1:
                raise SpecError(f"regime {regime.value} requires m=1, got m={contest[key]}", "m",
                                contest[key])
            raise SpecError(f"contest.{key}={contest[key]} disagrees with costs matrix ({actual})",
                            f"contest.{key}", contest[key])

    scheme = None
    if regime is Regime.CLASSIFIED:
        cls = doc.get("classification", {})
        if "class_weights" in cls:
            scheme = ClassificationScheme(
                tuple(float(b) for b in cls.get("boundaries", [])),
                tuple(float(a) for a in cls["class_weights"]),
                tuple(float(r) for r in cls.get("representative_costs", [])),
            )
        else:
            from contest_lab.design import classify_costs

            scheme = classify_costs(costs[:, 0], int(cls.get("classes", costs.shape[0])))

    return ContestSpec(
        costs=costs,
        prizes=prizes,
        regime=regime,
        weights=_section(doc, "weights"),
        scheme=scheme,
        budget_cap=float(contest.get("budget_cap", 1.0)),
    )


def load_scenario(source) -> ContestSpec:
    """Load and validate a scenario from a mapping, a path, or raw TOML/JSON text."""
    if isinstance(source, Mapping):
        return spec_from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and Path(source).suffix in {".toml", ".json"}):
        path = Path(source)
        text = path.read_text()
        fmt = "json" if path.suffix == ".json" else "toml"
    else:
        text = str(source)
        fmt = "json" if text.lstrip().startswith("{") else "toml"
    return spec_from_dict(parse_scenario(text, fmt))
