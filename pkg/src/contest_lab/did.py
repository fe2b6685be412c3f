"""Staggered difference-in-differences: TWFE, event studies, group-time ATTs, placebo draws."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from contest_lab.core import ContestError, SpecError
from contest_lab.panel import Panel

Z95 = 1.959964


class RankDeficiencyError(ContestError, ValueError):
    def __init__(self, message: str, columns: list[str]):
        super().__init__(message)
        self.columns = columns


class WindowError(ContestError, ValueError):
    pass


@dataclass(frozen=True)
class RegressionSpec:
    """What to regress.

    ``treatment`` entries ``"treat"`` and ``"trend"`` are built from adoption
    years (restricted to ``group`` when set); anything else must be a panel
    column.  ``policy_years`` adds ever-treated x post-year dummies and
    ``crowding_groups`` adds the treat dummy of other group labels.
    ``covariates`` pairs a column with the highest power of time it enters with.
    """

    outcome: str = "lgdp"
    treatment: tuple[str, ...] = ("treat",)
    group: str | None = None
    policy_years: tuple[int, ...] = ()
    crowding_groups: tuple[str, ...] = ()
    covariates: tuple[tuple[str, int], ...] = ()
    cluster: str = "unit"

    def __post_init__(self):
        if self.cluster not in ("none", "unit", "twoway"):
            raise SpecError(f"unknown cluster scheme {self.cluster!r}", "cluster", self.cluster)
        for name, order in self.covariates:
            if order not in (1, 2, 3):
                raise SpecError(f"polynomial order for {name} must be 1, 2 or 3", "covariates", order)


@dataclass(eq=False)
class EstimateReport:
    kind: str
    table: pd.DataFrame
    n_obs: int = 0
    r2_adj: float = math.nan
    extra: dict = field(default_factory=dict)

    def coef(self, term: str) -> float:
        return float(self.table.loc[self.table["term"] == term, "estimate"].iloc[0])

    def se(self, term: str) -> float:
        return float(self.table.loc[self.table["term"] == term, "se"].iloc[0])

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "n_obs": self.n_obs,
               "r2_adj": None if not np.isfinite(self.r2_adj) else self.r2_adj,
               "coefficients": _records(self.table)}
        for key, val in self.extra.items():
            out[key] = _records(val) if isinstance(val, pd.DataFrame) else val
        return out


def _records(df: pd.DataFrame) -> list[dict]:
    rows = []
    for rec in df.to_dict(orient="records"):
        rows.append({k: (None if isinstance(v, float) and not np.isfinite(v) else
                         v.item() if isinstance(v, np.generic) else v) for k, v in rec.items()})
    return rows


def coef_table(terms, beta, se) -> pd.DataFrame:
    beta = np.asarray(beta, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.nan)
    return pd.DataFrame({"term": list(terms), "estimate": beta, "se": se, "t": t,
                         "ci_low": beta - Z95 * se, "ci_high": beta + Z95 * se})


# --------------------------------------------------------------------------
# design


def _as_panel(panel) -> Panel:
    return panel if isinstance(panel, Panel) else Panel(panel)


def treatment_columns(panel: Panel, spec: RegressionSpec) -> dict[str, np.ndarray]:
    df = panel.data
    cols: dict[str, np.ndarray] = {}
    for name in spec.treatment:
        if name == "treat":
            cols["treat"] = panel.treat(spec.group)
        elif name == "trend":
            cols["trend"] = panel.trend(spec.group)
        elif name in df.columns:
            cols[name] = df[name].to_numpy(dtype=float)
        else:
            raise SpecError(f"no column named {name!r}", "treatment", name)
    if spec.policy_years:
        ever = panel.effective_adoption(spec.group).notna().to_numpy()
        year = df["year"].to_numpy()
        for y in spec.policy_years:
            cols[f"policy_{y}"] = (ever & (year >= y)).astype(float)
    for g in spec.crowding_groups:
        cols[f"crowd_{g}"] = panel.treat(g)
    return cols


def covariate_columns(df: pd.DataFrame, spec: RegressionSpec) -> dict[str, np.ndarray]:
    cols = {}
    if not spec.covariates:
        return cols
    year = df["year"].to_numpy(dtype=float)
    span = max(year.max() - year.min(), 1.0)
    tau = (year - year.min()) / span
    for name, order in spec.covariates:
        if name not in df.columns:
            raise SpecError(f"no covariate column named {name!r}", "covariates", name)
        x = df[name].to_numpy(dtype=float)
        for p in range(1, order + 1):
            cols[f"{name}_t{p}"] = x * tau**p
    return cols


@dataclass
class _Design:
    y: np.ndarray
    X: np.ndarray
    names: list[str]
    unit: np.ndarray
    year: np.ndarray
    keep: np.ndarray


def _codes(values) -> np.ndarray:
    return pd.factorize(pd.Series(values), sort=True)[0]


def build_design(panel, spec: RegressionSpec, extra: dict[str, np.ndarray] | None = None) -> _Design:
    panel = _as_panel(panel)
    df = panel.data
    if spec.outcome not in df.columns:
        raise SpecError(f"no outcome column named {spec.outcome!r}", "outcome", spec.outcome)
    cols = dict(extra) if extra is not None else treatment_columns(panel, spec)
    cols.update(covariate_columns(df, spec))
    y = df[spec.outcome].to_numpy(dtype=float)
    X = np.column_stack(list(cols.values())) if cols else np.zeros((len(df), 0))
    keep = np.isfinite(y) & np.all(np.isfinite(X), axis=1)
    unit = _codes(df["unit_id"].to_numpy()[keep])
    year = _codes(df["year"].to_numpy()[keep])
    return _Design(y[keep], X[keep], list(cols), unit, year, keep)


# --------------------------------------------------------------------------
# fixed-effect absorption


def demean_two_way(M: np.ndarray, unit: np.ndarray, year: np.ndarray, tol: float = 1e-10,
                   max_iter: int = 10_000) -> np.ndarray:
    """Residualize columns on unit and year dummies by alternating projections."""
    M = np.array(M, dtype=float, copy=True)
    squeeze = M.ndim == 1
    if squeeze:
        M = M[:, None]
    nu, nt = unit.max() + 1, year.max() + 1
    cu = np.bincount(unit, minlength=nu).astype(float)
    ct = np.bincount(year, minlength=nt).astype(float)
    for _ in range(max_iter):
        delta = 0.0
        for codes, counts, size in ((unit, cu, nu), (year, ct, nt)):
            for j in range(M.shape[1]):
                means = np.bincount(codes, weights=M[:, j], minlength=size) / counts
                step = means[codes]
                M[:, j] -= step
                delta = max(delta, float(np.max(np.abs(step))) if step.size else 0.0)
        if delta < tol:
            break
    else:
        warnings.warn("fixed-effect absorption hit max_iter before converging", RuntimeWarning)
    return M[:, 0] if squeeze else M


def _collinear(X: np.ndarray, names: list[str]) -> list[str]:
    bad, kept = [], []
    scale = max(1.0, float(np.max(np.abs(X)))) if X.size else 1.0
    for j, name in enumerate(names):
        trial = X[:, kept + [j]]
        if np.linalg.matrix_rank(trial, tol=1e-9 * scale * max(X.shape)) < len(kept) + 1:
            bad.append(name)
        else:
            kept.append(j)
    return bad


def _cluster_meat(scores: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, int]:
    G = int(codes.max()) + 1
    sums = np.zeros((G, scores.shape[1]))
    np.add.at(sums, codes, scores)
    return sums.T @ sums, G


def _psd_floor(V: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (V + V.T))
    if vals.min() < 0:
        warnings.warn("two-way cluster covariance was not positive semi-definite; "
                      "negative eigenvalues floored at 0", RuntimeWarning)
        vals = np.clip(vals, 0, None)
        V = (vecs * vals) @ vecs.T
    return V


def _fit(d: _Design, cluster: str = "unit", with_se: bool = True, yd: np.ndarray | None = None):
    if d.X.shape[1] == 0:
        raise SpecError("no regressors", "treatment")
    if d.y.size == 0 or d.unit.max() < 1 or d.year.max() < 1:
        raise SpecError("need at least 2 units and 2 years", "panel")
    Xd = demean_two_way(d.X, d.unit, d.year)
    yd = demean_two_way(d.y, d.unit, d.year) if yd is None else yd
    bad = _collinear(Xd, d.names)
    if bad:
        raise RankDeficiencyError(f"regressors collinear with the fixed effects or each other: {bad}", bad)
    XtX = Xd.T @ Xd
    beta = np.linalg.solve(XtX, Xd.T @ yd)
    if not with_se:
        return beta, None, None
    u = yd - Xd @ beta
    N, K = Xd.shape
    bread = np.linalg.inv(XtX)
    n_fe = (d.unit.max() + 1) + (d.year.max() + 1) - 1
    if cluster == "none":
        dof = N - K - n_fe
        V = bread * (u @ u) / dof if dof > 0 else np.full((K, K), np.nan)
    else:
        scores = Xd * u[:, None]

        def cr1(codes):
            meat, G = _cluster_meat(scores, codes)
            if G < 2:
                raise SpecError("clustered covariance needs at least 2 clusters", "cluster", G)
            return G / (G - 1) * (N - 1) / (N - K) * bread @ meat @ bread

        V = cr1(d.unit)
        if cluster == "twoway":
            cell = _codes(d.unit.astype(np.int64) * (d.year.max() + 1) + d.year)
            V = _psd_floor(V + cr1(d.year) - cr1(cell))
    se = np.sqrt(np.clip(np.diag(V), 0, None))
    ssr = float(u @ u)
    sst = float(np.sum((d.y - d.y.mean()) ** 2))
    df_resid = N - K - n_fe
    r2_adj = 1 - (ssr / sst) * (N - 1) / df_resid if sst > 0 and df_resid > 0 else math.nan
    return beta, se, r2_adj


def twfe(panel, spec: RegressionSpec = RegressionSpec()) -> EstimateReport:
    d = build_design(panel, spec)
    beta, se, r2 = _fit(d, spec.cluster)
    return EstimateReport("twfe", coef_table(d.names, beta, se), n_obs=int(d.y.size), r2_adj=r2,
                          extra={"cluster": spec.cluster, "outcome": spec.outcome})


def dense_dummy_ols(panel, spec: RegressionSpec = RegressionSpec()) -> np.ndarray:
    """Slope coefficients from an explicit unit- and year-dummy regression."""
    d = build_design(panel, spec)
    U = np.eye(d.unit.max() + 1)[d.unit]
    Tm = np.eye(d.year.max() + 1)[d.year][:, 1:]
    Z = np.column_stack([d.X, U, Tm])
    coef, *_ = np.linalg.lstsq(Z, d.y, rcond=None)
    return coef[: d.X.shape[1]]


# --------------------------------------------------------------------------
# event study


def event_study(panel, spec: RegressionSpec = RegressionSpec(), pre_periods: int = 3,
                post_periods: int = 4) -> EstimateReport:
    """Relative-time dummies around adoption, reference period -1, edges binned."""
    if pre_periods < 1 or post_periods < 0:
        raise WindowError("need pre_periods >= 1 and post_periods >= 0")
    panel = _as_panel(panel)
    df = panel.data
    g = panel.effective_adoption(spec.group).to_numpy()
    rel = df["year"].to_numpy() - g
    treated = ~np.isnan(rel)
    if not treated.any():
        raise WindowError("no treated units in the panel")
    lo, hi = int(np.nanmin(rel)), int(np.nanmax(rel))
    if -pre_periods < lo or post_periods > hi:
        raise WindowError(f"event window [-{pre_periods}, {post_periods}] exceeds the feasible span "
                          f"[{lo}, {hi}]")
    binned = np.clip(np.where(treated, rel, 0), -pre_periods, post_periods)
    ks = [k for k in range(-pre_periods, post_periods + 1) if k != -1]
    cols = {_event_label(k): (treated & (binned == k)).astype(float) for k in ks}
    d = build_design(panel, spec, extra=cols)
    beta, se, r2 = _fit(d, spec.cluster)
    table = coef_table(d.names, beta, se)
    ref = coef_table([_event_label(-1)], [0.0], [0.0])
    table = pd.concat([table, ref], ignore_index=True)
    table["rel_time"] = [_rel_of(t) for t in table["term"]]
    table = table.sort_values("rel_time", kind="stable").reset_index(drop=True)
    return EstimateReport("event_study", table, n_obs=int(d.y.size), r2_adj=r2,
                          extra={"reference": -1, "window": [-pre_periods, post_periods]})


def _event_label(k: int) -> str:
    return f"Placebo_{-k}" if k < 0 else f"Effect_{k}"


def _rel_of(term: str) -> int | None:
    if term.startswith("Placebo_"):
        return -int(term.split("_")[1])
    if term.startswith("Effect_"):
        return int(term.split("_")[1])
    return None


# --------------------------------------------------------------------------
# group-time ATT


def _wide(panel: Panel, outcome: str, group: str | None):
    df = panel.data
    units = np.sort(df["unit_id"].unique())
    years = np.sort(df["year"].unique())
    Y = df.pivot(index="unit_id", columns="year", values=outcome).reindex(index=units, columns=years)
    adopt = (df.assign(_g=panel.effective_adoption(group)).groupby("unit_id")["_g"].first()
             .reindex(units).to_numpy())
    return Y.to_numpy(dtype=float), adopt, years


def _weighted_mean(W: np.ndarray, D: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-replicate means of D over the masked units; W is replicates x units."""
    ok = np.isfinite(D) & mask[:, None]
    num = W @ np.where(ok, D, 0.0)
    den = W @ ok.astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, np.nan)


def _cs_core(W: np.ndarray, Y: np.ndarray, adopt: np.ndarray, years: np.ndarray, control: str):
    """ATT(g,t) for every weight row of W.  Returns cells, att[reps, cells], cohort sizes[reps, cohorts]."""
    cohorts = np.array(sorted({int(a) for a in adopt[np.isfinite(adopt)]}))
    year_pos = {int(t): j for j, t in enumerate(years)}
    never = ~np.isfinite(adopt)
    cells, cols = [], []
    sizes = np.column_stack([W[:, adopt == g].sum(axis=1) for g in cohorts]) if cohorts.size else \
        np.zeros((W.shape[0], 0))
    for gi, g in enumerate(cohorts):
        if g - 1 not in year_pos:
            continue
        base = year_pos[g - 1]
        D = Y - Y[:, [base]]
        in_g = adopt == g
        treated_mean = _weighted_mean(W, D, in_g)
        for j, t in enumerate(years):
            if j == base:
                continue
            if control == "never":
                ctrl = never
            else:
                horizon = max(int(t), g - 1)
                ctrl = never | ((adopt > horizon) & ~in_g)
            if not ctrl.any():
                cells.append((g, int(t), gi))
                cols.append(np.full(W.shape[0], np.nan))
                continue
            cells.append((g, int(t), gi))
            cols.append(treated_mean[:, j] - _weighted_mean(W, D[:, [j]], ctrl)[:, 0])
    att = np.column_stack(cols) if cols else np.zeros((W.shape[0], 0))
    return cells, att, sizes


def _aggregate_event(cells, att: np.ndarray, sizes: np.ndarray):
    events = sorted({t - g for g, t, _ in cells})
    theta = np.full((att.shape[0], len(events)), np.nan)
    for ei, e in enumerate(events):
        idx = [c for c, (g, t, _) in enumerate(cells) if t - g == e]
        gidx = [cells[c][2] for c in idx]
        a = att[:, idx]
        w = sizes[:, gidx] * np.isfinite(a)
        tot = w.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            theta[:, ei] = np.where(tot > 0, np.nansum(a * w, axis=1) / tot, np.nan)
    post = [c for c, (g, t, _) in enumerate(cells) if t >= g]
    a = att[:, post]
    w = sizes[:, [cells[c][2] for c in post]] * np.isfinite(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        overall = np.nansum(a * w, axis=1) / w.sum(axis=1)
    return events, theta, overall


def cs_group_time(panel, outcome: str = "lgdp", control: str = "never", group: str | None = None,
                  bootstrap: int = 400, seed: int = 0) -> EstimateReport:
    """Group-time ATTs with a universal ``g - 1`` base period and unit block-bootstrap SEs."""
    if control not in ("never", "notyet"):
        raise SpecError("control must be 'never' or 'notyet'", "control", control)
    panel = _as_panel(panel)
    Y, adopt, years = _wide(panel, outcome, group)
    n = Y.shape[0]
    ones = np.ones((1, n))
    cells, att, sizes = _cs_core(ones, Y, adopt, years, control)
    events, theta, overall = _aggregate_event(cells, att, sizes)

    att_se = np.full(len(cells), np.nan)
    theta_se = np.full(len(events), np.nan)
    overall_se = math.nan
    if bootstrap > 0:
        rng = np.random.default_rng(seed)
        W = np.stack([np.bincount(rng.integers(0, n, size=n), minlength=n) for _ in range(bootstrap)])
        W = W.astype(float)
        _, att_b, sizes_b = _cs_core(W, Y, adopt, years, control)
        _, theta_b, overall_b = _aggregate_event(cells, att_b, sizes_b)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            att_se = np.nanstd(att_b, axis=0, ddof=1)
            theta_se = np.nanstd(theta_b, axis=0, ddof=1)
            overall_se = float(np.nanstd(overall_b, ddof=1))

    never = ~np.isfinite(adopt)
    gt = pd.DataFrame({
        "g": [c[0] for c in cells],
        "t": [c[1] for c in cells],
        "e": [c[1] - c[0] for c in cells],
        "att": att[0] if cells else [],
        "se": att_se,
        "n_treated": [int(np.sum(adopt == c[0])) for c in cells],
    })
    gt["missing"] = ~np.isfinite(gt["att"])
    table = coef_table([f"theta_{e}" for e in events], theta[0], theta_se)
    table["e"] = events
    overall_row = coef_table(["overall"], [overall[0]], [overall_se])
    table = pd.concat([table, overall_row], ignore_index=True)
    return EstimateReport("cs_group_time", table, n_obs=int(np.isfinite(Y).sum()),
                          extra={"att_gt": gt, "control": control, "bootstrap": bootstrap,
                                 "n_never_treated": int(never.sum())})


# --------------------------------------------------------------------------
# placebo


def placebo_test(panel, spec: RegressionSpec = RegressionSpec(), draws: int = 500, seed: int = 0,
                 support=None, bins: int = 30) -> EstimateReport:
    """Randomization test reassigning each treated unit's adoption year from ``support``."""
    if draws < 1:
        raise SpecError("draws must be >= 1", "draws", draws)
    panel = _as_panel(panel)
    df = panel.data
    eff = panel.effective_adoption(spec.group)
    treated_units = np.sort(df.loc[eff.notna(), "unit_id"].unique())
    if support is None:
        support = np.sort(eff.dropna().unique()).astype(int)
    support = np.asarray(support, dtype=float)
    if treated_units.size == 0 or support.size == 0:
        raise SpecError("placebo test needs treated units and a non-empty support", "panel")

    d0 = build_design(panel, spec)
    beta0, _, _ = _fit(d0, spec.cluster, with_se=False)
    observed = float(beta0[0])
    yd = demean_two_way(d0.y, d0.unit, d0.year)

    unit_ids = df["unit_id"].to_numpy()
    year = df["year"].to_numpy()[d0.keep]
    pos = np.searchsorted(treated_units, unit_ids)
    hit = np.clip(pos, 0, treated_units.size - 1)
    is_treated = ((pos < treated_units.size) & (treated_units[hit] == unit_ids))[d0.keep]
    hit = hit[d0.keep]
    names = d0.names
    streams = np.random.SeedSequence(seed).spawn(draws)
    out = np.empty(draws)
    for b, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        new = rng.choice(support, size=treated_units.size)
        g = np.where(is_treated, new[hit], np.nan)
        X = d0.X.copy()
        with np.errstate(invalid="ignore"):
            if "treat" in names:
                X[:, names.index("treat")] = (year >= g).astype(float)
            if "trend" in names:
                X[:, names.index("trend")] = np.where(np.isnan(g), 0.0, np.maximum(year - g, 0.0))
        d = _Design(d0.y, X, names, d0.unit, d0.year, d0.keep)
        beta, _, _ = _fit(d, spec.cluster, with_se=False, yd=yd)
        out[b] = beta[0]

    # floating-point ties (e.g. a constant outcome) count as exceedances
    tie = 1e-12 * max(1.0, abs(observed))
    exceed = int(np.sum(np.abs(out) >= abs(observed) - tie))
    p = (1 + exceed) / (draws + 1)
    counts, edges = np.histogram(out, bins=bins)
    hist = pd.DataFrame({"bin_low": edges[:-1], "bin_high": edges[1:], "count": counts})
    draws_df = pd.DataFrame({"draw": np.arange(draws), "estimate": out})
    table = coef_table([names[0]], [observed], [float(np.std(out, ddof=1)) if draws > 1 else math.nan])
    return EstimateReport("placebo", table, n_obs=int(d0.y.size),
                          extra={"p_value": p, "draws": draws_df, "histogram": hist,
                                 "support": support.astype(int).tolist(), "seed": seed})
