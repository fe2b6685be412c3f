"""Synthetic staggered-adoption county panels with a known treatment effect."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from contest_lab.core import ContestError, ContestSpec, Regime, SpecError

OUTCOMES = ("lgdp", "lpergdp", "lpm25", "dpm25")
GROUPS = ("econ", "eco", "none")
BASE_COLUMNS = ("unit_id", "province_id", "year", "adoption_year", "group")


@dataclass
class OutcomeEffect:
    """Injected effect ``level * 1[t - g >= lag] + trend * max(0, t - g - lag)``.

    ``groups`` limits the effect to units carrying one of those labels;
    ``cohort_effects`` maps an adoption year to a ``(level, trend)`` override.
    """

    level: float = 0.0
    trend: float = 0.0
    lag: int = 0
    groups: tuple[str, ...] | None = None
    cohort_effects: dict[int, tuple[float, float]] = field(default_factory=dict)

    def for_cohort(self, g: int) -> tuple[float, float]:
        return tuple(self.cohort_effects.get(int(g), (self.level, self.trend)))

    def path(self, g, rel):
        """Effect at relative time ``rel`` for cohort ``g`` (arrays broadcast)."""
        level, trend = self.for_cohort(g)
        shifted = np.asarray(rel) - self.lag
        return np.where(shifted >= 0, level + trend * np.maximum(shifted, 0), 0.0)


def _default_effects() -> dict[str, OutcomeEffect]:
    return {
        "lgdp": OutcomeEffect(0.07, 0.006),
        "lpergdp": OutcomeEffect(0.07, 0.006),
        "lpm25": OutcomeEffect(-0.05, 0.0, lag=1),
    }


@dataclass
class PanelConfig:
    n_units: int = 500
    n_provinces: int = 30
    years: tuple[int, int] = (2001, 2021)
    adoption_support: tuple[int, ...] | None = None
    adoption_years: dict[int, int | None] | None = None
    adoption_level: str = "province"
    never_treated_share: float = 0.3
    group_rule: str = "none"
    group_shares: tuple[float, float] = (0.4, 0.4)
    effects: dict[str, OutcomeEffect] = field(default_factory=_default_effects)
    sigma: float = 0.05
    ar1: float = 0.0
    unit_fe_scale: float = 0.5
    year_fe_scale: float = 0.05
    outcome_means: dict[str, float] = field(
        default_factory=lambda: {"lgdp": 13.2, "lpergdp": 10.3, "lpm25": 3.6})
    covariate_loadings: tuple[tuple[float, ...], ...] = ()
    seed: int = 0
    stream: int = 0
    # contest-linked panels only
    county_costs: tuple[tuple[float, float], ...] | None = None
    cost_dispersion: float = 0.5
    effort_gains: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.years = tuple(int(y) for y in self.years)
        start, end = self.years
        if end < start:
            raise SpecError(f"year range is empty: {self.years}", "years", self.years)
        if self.n_units < 0:
            raise SpecError("n_units must be non-negative", "n_units", self.n_units)
        if self.n_provinces < 1:
            raise SpecError("n_provinces must be >= 1", "n_provinces", self.n_provinces)
        if self.sigma < 0:
            raise SpecError("sigma must be >= 0", "sigma", self.sigma)
        if not 0 <= self.never_treated_share <= 1:
            raise SpecError("never_treated_share must lie in [0, 1]", "never_treated_share",
                            self.never_treated_share)
        if not -1 < self.ar1 < 1:
            raise SpecError("ar1 must lie in (-1, 1)", "ar1", self.ar1)
        if self.adoption_level not in ("province", "unit"):
            raise SpecError("adoption_level must be 'province' or 'unit'", "adoption_level", self.adoption_level)
        if self.group_rule not in ("none", "advantage"):
            raise SpecError("group_rule must be 'none' or 'advantage'", "group_rule", self.group_rule)
        support = self.support
        if len(support) == 0:
            raise SpecError("adoption support is empty", "adoption_support", support)
        if min(support) < start:
            raise SpecError(f"adoption years must not precede {start}", "adoption_support", min(support))
        if self.adoption_years is not None:
            bad = [g for g in self.adoption_years.values() if g is not None and g < start]
            if bad:
                raise SpecError(f"adoption years must not precede {start}", "adoption_years", bad)
        for name, loads in enumerate(self.covariate_loadings, 1):
            if not 1 <= len(loads) <= 3:
                raise SpecError(f"cov_{name} loadings need 1 to 3 polynomial terms", "covariate_loadings", loads)
        for name in self.effects:
            if name not in ("lgdp", "lpergdp", "lpm25"):
                raise SpecError(f"no generated outcome named {name!r}", "effects", name)

    @property
    def support(self) -> tuple[int, ...]:
        if self.adoption_support is not None:
            return tuple(int(g) for g in self.adoption_support)
        start, end = self.years
        lo, hi = start + 2, end - 2
        return tuple(range(lo, hi + 1)) if hi >= lo else (start,)

    @property
    def year_list(self) -> np.ndarray:
        return np.arange(self.years[0], self.years[1] + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["effects"] = {
            k: {**asdict(v), "cohort_effects": {str(g): list(x) for g, x in v.cohort_effects.items()}}
            for k, v in self.effects.items()
        }
        if self.adoption_years is not None:
            d["adoption_years"] = {str(k): v for k, v in self.adoption_years.items()}
        return d


@dataclass(eq=False)
class Panel:
    """Long unit x year frame plus the generator's ground-truth record."""

    data: pd.DataFrame
    truth: dict = field(default_factory=dict)

    @property
    def n_covariates(self) -> int:
        return sum(c.startswith("cov_") for c in self.data.columns)

    def effective_adoption(self, group: str | None = None) -> pd.Series:
        """Adoption year per row, blanked for units outside ``group``."""
        g = self.data["adoption_year"].astype("Float64")
        if group is not None:
            g = g.where(self.data["group"] == group)
        return g.astype(float)

    def treat(self, group: str | None = None) -> np.ndarray:
        g = self.effective_adoption(group).to_numpy()
        with np.errstate(invalid="ignore"):
            return (self.data["year"].to_numpy() >= g).astype(float)

    def trend(self, group: str | None = None) -> np.ndarray:
        g = self.effective_adoption(group).to_numpy()
        rel = self.data["year"].to_numpy() - g
        return np.where(np.isnan(rel), 0.0, np.maximum(rel, 0.0))

    def with_adoption(self, adoption: dict) -> "Panel":
        """Copy with adoption years replaced unit-by-unit (``None`` = never)."""
        df = self.data.copy()
        mapped = df["unit_id"].map(adoption)
        df["adoption_year"] = pd.array(mapped.where(mapped.notna(), None), dtype="Int64")
        return Panel(df, dict(self.truth))


def _rng(config: PanelConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, config.stream]))


def _assign_adoption(config: PanelConfig, rng, province: np.ndarray) -> np.ndarray:
    support = np.array(config.support)
    if config.adoption_years is not None:
        table = config.adoption_years
        # keyed by the 1-based province_id / unit_id written to the panel
        key = province + 1 if config.adoption_level == "province" else np.arange(1, config.n_units + 1)
        return np.array([np.nan if table.get(int(p)) is None else float(table[int(p)]) for p in key])
    n = config.n_provinces if config.adoption_level == "province" else config.n_units
    draws = rng.choice(support, size=n).astype(float)
    never = rng.random(n) < config.never_treated_share
    draws[never] = np.nan
    return draws[province] if config.adoption_level == "province" else draws


def _base_panel(config: PanelConfig):
    """Everything except injected effects; consumes the RNG in a fixed order."""
    rng = _rng(config)
    n, years = config.n_units, config.year_list
    T = years.size
    province = np.sort(rng.integers(0, config.n_provinces, size=n)) if n else np.zeros(0, dtype=int)
    adoption = _assign_adoption(config, rng, province)
    advantage = rng.normal(size=n)
    if config.group_rule == "advantage":
        econ, eco = config.group_shares
        q_hi = np.quantile(advantage, 1 - econ) if n else 0.0
        q_lo = np.quantile(advantage, eco) if n else 0.0
        group = np.where(advantage >= q_hi, "econ", np.where(advantage <= q_lo, "eco", "none"))
    else:
        group = np.full(n, "none")
    K = len(config.covariate_loadings)
    X = rng.normal(size=(n, K))
    tau = (years - years[0]) / max(T - 1, 1)

    base = {}
    for name in ("lgdp", "lpergdp", "lpm25"):
        alpha = rng.normal(scale=config.unit_fe_scale, size=n)
        lam = rng.normal(scale=config.year_fe_scale, size=T)
        eps = rng.normal(scale=config.sigma, size=(n, T)) if config.sigma > 0 else np.zeros((n, T))
        if config.ar1 and T > 1:
            scale = np.sqrt(1 - config.ar1**2)
            for t in range(1, T):
                eps[:, t] = config.ar1 * eps[:, t - 1] + scale * eps[:, t]
        Y = config.outcome_means.get(name, 0.0) + alpha[:, None] + lam[None, :] + eps
        for k, loads in enumerate(config.covariate_loadings):
            poly = sum(d * tau ** (p + 1) for p, d in enumerate(loads))
            Y = Y + X[:, [k]] * poly[None, :]
        base[name] = Y
    return province, adoption, group, X, base


def _effect_matrix(effect: OutcomeEffect, adoption, group, years) -> np.ndarray:
    n = adoption.size
    out = np.zeros((n, years.size))
    for i in range(n):
        if np.isnan(adoption[i]):
            continue
        if effect.groups is not None and group[i] not in effect.groups:
            continue
        out[i] = effect.path(int(adoption[i]), years - adoption[i])
    return out


def _assemble(config, province, adoption, group, X, Y: dict) -> pd.DataFrame:
    n, years = config.n_units, config.year_list
    T = years.size
    adopt = pd.array([None if np.isnan(a) else int(a) for a in np.repeat(adoption, T)], dtype="Int64")
    pm = np.exp(Y["lpm25"])
    dpm = np.full((n, T), np.nan)
    dpm[:, 1:] = np.diff(pm, axis=1)
    df = pd.DataFrame({
        "unit_id": np.repeat(np.arange(1, n + 1), T),
        "province_id": np.repeat(province + 1, T),
        "year": np.tile(years, n),
        "adoption_year": adopt,
        "group": np.repeat(group, T).astype(object),
        "lgdp": Y["lgdp"].ravel(),
        "lpergdp": Y["lpergdp"].ravel(),
        "lpm25": Y["lpm25"].ravel(),
        "dpm25": dpm.ravel(),
    })
    for k in range(X.shape[1]):
        df[f"cov_{k + 1}"] = np.repeat(X[:, k], T)
    return df


def _truth_record(config: PanelConfig, adoption, group, years, effects: dict[str, np.ndarray]) -> dict:
    """Empirical ATTs of the injected effects, overall, per group and per (cohort, year)."""
    treated = ~np.isnan(adoption)
    post = treated[:, None] & (years[None, :] >= np.where(treated, adoption, np.inf)[:, None])
    rec = {"att": {}, "att_gt": {}, "cohort_sizes": {}}
    cohorts = sorted({int(a) for a in adoption[treated]})
    for g in cohorts:
        rec["cohort_sizes"][str(g)] = int(np.sum(adoption == g))
    for name, eff in effects.items():
        per = {}
        per["all"] = float(eff[post].mean()) if post.any() else 0.0
        for lab in GROUPS:
            mask = post & (group == lab)[:, None]
            if mask.any():
                per[lab] = float(eff[mask].mean())
        rec["att"][name] = per
        cells = {}
        for g in cohorts:
            rows = adoption == g
            cells[str(g)] = {str(int(t)): float(eff[rows, j].mean()) for j, t in enumerate(years)}
        rec["att_gt"][name] = cells
    return rec


def generate_panel(config: PanelConfig) -> Panel:
    province, adoption, group, X, base = _base_panel(config)
    years = config.year_list
    effects = {name: _effect_matrix(eff, adoption, group, years) for name, eff in config.effects.items()}
    Y = dict(base)
    for name, eff in effects.items():
        Y[name] = Y[name] + eff
    df = _assemble(config, province, adoption, group, X, Y)
    truth = {"kind": "direct", "config": config.to_dict(),
             **_truth_record(config, adoption, group, years, effects)}
    return Panel(df, truth)


class PanelSolverError(ContestError, RuntimeError):
    def __init__(self, message: str, unit_id: int):
        super().__init__(message)
        self.unit_id = unit_id


def county_efforts(own_costs, contest: ContestSpec) -> dict[str, float]:
    """Own equilibrium efforts before (economic task only) and after task expansion.

    The county plays contestant 1 against the template's contestant 2.
    """
    from contest_lab.equilibrium import solve_multi_task, solve_single_task

    own = np.asarray(own_costs, dtype=float)
    rival = contest.costs[1]
    pre = solve_single_task(ContestSpec([own[0], rival[0]], [contest.prizes[0]]))
    post = solve_multi_task(ContestSpec(np.vstack([own, rival]), contest.prizes, Regime.MULTI,
                                        budget_cap=contest.budget_cap))
    return {"pre_econ": float(pre.e[0, 0]), "post_econ": float(post.e[0, 0]), "post_eco": float(post.e[0, 1])}


def generate_contest_linked_panel(config: PanelConfig, contest: ContestSpec) -> Panel:
    """Panel whose outcomes load on each county's contest-equilibrium efforts.

    Economic effort raises lgdp and lpergdp by ``effort_gains[0]`` per unit;
    ecological effort lowers lpm25 by ``effort_gains[1]`` per unit.  Before
    adoption the county plays the single-task contest, afterwards the two-task
    one.  The direct ``config.effects`` are ignored.
    """
    if contest.regime is not Regime.MULTI or contest.m != 2 or contest.n != 2:
        raise SpecError("contest template must be a 2-contestant, 2-task MultiTask spec", "contest")
    province, adoption, group, X, base = _base_panel(config)
    n, years = config.n_units, config.year_list

    if config.county_costs is not None:
        costs = np.asarray(config.county_costs, dtype=float)
        if costs.shape == (2,):
            costs = np.tile(costs, (n, 1))
        if costs.shape != (n, 2):
            raise SpecError(f"county_costs must be {n} x 2", "county_costs", costs.shape)
    else:
        # separate stream so the base panel matches generate_panel draw-for-draw
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, config.stream, 1]))
        costs = contest.costs[0][None, :] * np.exp(rng.normal(scale=config.cost_dispersion, size=(n, 2)))
    group = np.where(costs[:, 0] <= costs[:, 1], "econ", "eco")

    cache: dict[tuple[float, float], dict] = {}
    efforts = []
    for i in range(n):
        key = (float(costs[i, 0]), float(costs[i, 1]))
        if key not in cache:
            try:
                cache[key] = county_efforts(key, contest)
            except ContestError as exc:
                raise PanelSolverError(f"county {i + 1}: {exc}", i + 1) from exc
        efforts.append(cache[key])

    g_econ, g_eco = config.effort_gains
    T = years.size
    level = {name: np.zeros((n, T)) for name in ("lgdp", "lpergdp", "lpm25")}
    effect = {name: np.zeros((n, T)) for name in ("lgdp", "lpergdp", "lpm25")}
    for i, eff in enumerate(efforts):
        post = (years >= adoption[i]) if not np.isnan(adoption[i]) else np.zeros(T, dtype=bool)
        econ = np.where(post, eff["post_econ"], eff["pre_econ"])
        eco = np.where(post, eff["post_eco"], 0.0)
        for name in ("lgdp", "lpergdp"):
            level[name][i] = g_econ * econ
            effect[name][i] = g_econ * (econ - eff["pre_econ"])
        level["lpm25"][i] = -g_eco * eco
        effect["lpm25"][i] = -g_eco * eco

    Y = {name: base[name] + level[name] for name in base}
    df = _assemble(config, province, adoption, group, X, Y)
    truth = {"kind": "contest-linked", "config": config.to_dict(), "contest": contest.to_dict(),
             "county_efforts": [dict(unit_id=i + 1, costs=costs[i].tolist(), **efforts[i]) for i in range(n)],
             **_truth_record(config, adoption, group, years, effect)}
    return Panel(df, truth)


# --------------------------------------------------------------------------
# I/O


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".truth.json")


def write_panel(panel: Panel, destination) -> None:
    path = Path(destination)
    try:
        panel.data.to_csv(path, index=False)
        _sidecar(path).write_text(json.dumps(panel.truth, indent=2, sort_keys=True, default=float))
    except OSError as exc:
        raise OSError(f"could not write panel to {path}: {exc}") from exc


def read_panel(source) -> Panel:
    path = Path(source)
    try:
        df = pd.read_csv(path, dtype={"group": object})
    except OSError as exc:
        raise OSError(f"could not read panel from {path}: {exc}") from exc
    missing = [c for c in BASE_COLUMNS + OUTCOMES if c not in df.columns]
    if missing:
        raise SpecError(f"panel CSV {path} lacks columns {missing}", "columns", missing)
    df["adoption_year"] = df["adoption_year"].astype("Int64")
    for c in ("unit_id", "province_id", "year"):
        df[c] = df[c].astype(np.int64)
    for c in df.columns:
        if c in OUTCOMES or c.startswith("cov_"):
            df[c] = df[c].astype(float)
    df["group"] = df["group"].astype(object)
    side = _sidecar(path)
    truth = json.loads(side.read_text()) if side.exists() else {}
    return Panel(df, truth)
