"""``contest-lab`` command line.

Exit status: 0 on success, 1 on usage / input errors, 2 when a solver or
estimator fails (a JSON diagnostic goes to stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from contest_lab import design, did, equilibrium, panel as panel_mod
from contest_lab.core import ContestError, ScenarioParseError, SpecError, load_scenario, parse_scenario
from contest_lab.serialize import frame_rows, to_csv, to_json, to_table

SOLVER_ERRORS = (equilibrium.SolverFailure, equilibrium.DegeneracyError, equilibrium.CycleError,
                 did.RankDeficiencyError, did.WindowError, panel_mod.PanelSolverError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _matrix(text: str) -> list[list[float]]:
    return [_floats(row) for row in text.split(";")]


def _env_seed() -> int:
    raw = os.environ.get("CONTEST_LAB_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"CONTEST_LAB_SEED must be an integer, got {raw!r}") from None


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    return p


def _settings(args) -> equilibrium.SolverSettings:
    kw = {}
    for name in ("tolerance", "max_iterations", "damping", "grid_resolution"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    return equilibrium.SolverSettings(**kw)


def _emit(args, obj, rows, sidecars: dict | None = None) -> None:
    fmt = args.format
    text = to_json(obj) if fmt == "json" else to_csv(rows) if fmt == "csv" else to_table(rows)
    if args.output:
        out = Path(args.output)
        out.write_text(text)
        if fmt == "csv" and sidecars:
            for suffix, side_rows in sidecars.items():
                out.with_name(f"{out.stem}_{suffix}.csv").write_text(to_csv(side_rows))
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# handlers


def cmd_solve(args):
    spec = load_scenario(_existing(args.scenario))
    sol = equilibrium.solve(spec, _settings(args))
    _emit(args, sol, sol.rows())


def cmd_design_weights(args):
    sol = design.optimal_weights(_floats(args.costs), args.prize)
    _emit(args, sol, sol.rows())


def cmd_classify(args):
    costs = _floats(args.costs)
    scheme = design.classify_costs(costs, args.classes, args.prize)
    labels = scheme.assign(costs)
    payload = {
        "boundaries": list(scheme.boundaries),
        "class_weights": list(scheme.class_weights),
        "representative_costs": list(scheme.representative_costs),
        "sse": scheme.sse,
        "labels": [int(v) + 1 for v in labels],
    }
    rows = [{"contestant": k + 1, "cost": c, "class": int(j) + 1,
             "class_weight": scheme.class_weights[j], "representative_cost": scheme.representative_costs[j]}
            for k, (c, j) in enumerate(zip(costs, labels))]
    _emit(args, payload, rows)


def cmd_compare(args):
    specs = [load_scenario(_existing(p)) for p in args.scenarios]
    ranked = design.compare_task_counts(specs, labels=[Path(p).stem for p in args.scenarios],
                                        settings=_settings(args))
    payload = {"ranking": [r.to_dict() for r in ranked]}
    rows = [{"rank": i + 1, "label": r.label, "total_effort": r.total_effort,
             "task_totals": " ".join(repr(v) for v in r.task_totals), "error": r.error or ""}
            for i, r in enumerate(ranked)]
    _emit(args, payload, rows)


def cmd_specialization(args):
    rep = design.specialization_report(_matrix(args.costs), args.prize, args.budget_cap, _settings(args))
    _emit(args, rep, rep.rows())


def _panel_config(args) -> panel_mod.PanelConfig:
    doc = {}
    if args.config:
        path = _existing(args.config)
        doc = parse_scenario(path.read_text(), "json" if path.suffix == ".json" else "toml")
    effects = doc.pop("effects", None)
    kw = dict(doc)
    if effects is not None:
        kw["effects"] = {
            name: panel_mod.OutcomeEffect(
                level=e.get("level", 0.0), trend=e.get("trend", 0.0), lag=e.get("lag", 0),
                groups=tuple(e["groups"]) if e.get("groups") else None,
                cohort_effects={int(g): tuple(v) for g, v in e.get("cohort_effects", {}).items()})
            for name, e in effects.items()
        }
    for flag, key in (("units", "n_units"), ("provinces", "n_provinces"), ("sigma", "sigma")):
        v = getattr(args, flag)
        if v is not None:
            kw[key] = v
    if args.years:
        lo, hi = args.years.split(":")
        kw["years"] = (int(lo), int(hi))
    if "years" in kw:
        kw["years"] = tuple(kw["years"])
    if args.beta is not None or args.gamma is not None:
        eff = kw.get("effects") or panel_mod._default_effects()
        base = eff.get("lgdp", panel_mod.OutcomeEffect())
        lgdp = panel_mod.OutcomeEffect(args.beta if args.beta is not None else base.level,
                                       args.gamma if args.gamma is not None else base.trend)
        eff = {**eff, "lgdp": lgdp}
        kw["effects"] = eff
    kw["seed"] = args.seed
    try:
        return panel_mod.PanelConfig(**kw)
    except TypeError as exc:
        raise UsageError(f"bad panel config: {exc}") from None


def cmd_gen_panel(args):
    cfg = _panel_config(args)
    if args.contest:
        p = panel_mod.generate_contest_linked_panel(cfg, load_scenario(_existing(args.contest)))
    else:
        p = panel_mod.generate_panel(cfg)
    panel_mod.write_panel(p, args.output)
    summary = {"rows": len(p.data), "units": cfg.n_units, "years": list(cfg.years), "path": args.output,
               "att": p.truth.get("att", {})}
    sys.stdout.write(to_json(summary))


def _reg_spec(args) -> did.RegressionSpec:
    covs = []
    for item in (args.covariates or "").split(","):
        if item.strip():
            name, _, order = item.partition(":")
            covs.append((name.strip(), int(order or 1)))
    return did.RegressionSpec(
        outcome=args.outcome,
        treatment=tuple(t for t in args.treatment.split(",") if t),
        group=args.group,
        policy_years=tuple(int(y) for y in (args.policy_years or "").split(",") if y),
        crowding_groups=tuple(g for g in (args.crowding or "").split(",") if g),
        covariates=tuple(covs),
        cluster=args.cluster,
    )


def _read(args):
    return panel_mod.read_panel(_existing(args.panel))


def cmd_twfe(args):
    rep = did.twfe(_read(args), _reg_spec(args))
    _emit(args, rep, frame_rows(rep.table))


def cmd_event_study(args):
    rep = did.event_study(_read(args), _reg_spec(args), args.pre, args.post)
    _emit(args, rep, frame_rows(rep.table))


def cmd_cs_att(args):
    rep = did.cs_group_time(_read(args), args.outcome, args.control, args.group, args.bootstrap, args.seed)
    _emit(args, rep, frame_rows(rep.table), {"att_gt": frame_rows(rep.extra["att_gt"])})


def cmd_placebo(args):
    support = [int(v) for v in _floats(args.support)] if args.support else None
    rep = did.placebo_test(_read(args), _reg_spec(args), args.draws, args.seed, support)
    rows = frame_rows(rep.table)
    rows[0]["p_value"] = rep.extra["p_value"]
    _emit(args, rep, rows, {"draws": frame_rows(rep.extra["draws"]),
                            "histogram": frame_rows(rep.extra["histogram"])})


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contest-lab", description="Contest equilibria, mechanism design and staggered DiD.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def out(sp, default="json"):
        sp.add_argument("--format", choices=("json", "csv", "table"), default=default)
        sp.add_argument("--output", "-o", help="write here instead of stdout")

    def solver(sp):
        sp.add_argument("--tolerance", type=float)
        sp.add_argument("--max-iterations", dest="max_iterations", type=int)
        sp.add_argument("--damping", type=float)
        sp.add_argument("--grid-resolution", dest="grid_resolution", type=float)

    def seed(sp):
        sp.add_argument("--seed", type=int, default=None)

    def reg(sp):
        sp.add_argument("panel")
        sp.add_argument("--outcome", default="lgdp")
        sp.add_argument("--treatment", default="treat")
        sp.add_argument("--group")
        sp.add_argument("--policy-years", dest="policy_years")
        sp.add_argument("--crowding")
        sp.add_argument("--covariates", help="name:order,... e.g. cov_1:3")
        sp.add_argument("--cluster", choices=("none", "unit", "twoway"), default="unit")

    s = sub.add_parser("solve", help="equilibrium of a scenario file")
    s.add_argument("scenario")
    out(s), solver(s), seed(s)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("design-weights", help="optimal discriminatory weights")
    s.add_argument("--costs", required=True)
    s.add_argument("--prize", type=float, default=1.0)
    out(s), seed(s)
    s.set_defaults(func=cmd_design_weights)

    s = sub.add_parser("classify", help="optimal 1-D cost classification")
    s.add_argument("--costs", required=True)
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--prize", type=float, default=1.0)
    out(s), seed(s)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("compare", help="rank scenarios by total equilibrium effort")
    s.add_argument("scenarios", nargs="+")
    out(s), solver(s), seed(s)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("specialization-report", help="free vs classified vs multi-task comparison")
    s.add_argument("--costs", required=True, help="2x2 matrix, rows are contestants: '1,4;4,1'")
    s.add_argument("--prize", type=float, default=1.0)
    s.add_argument("--budget-cap", dest="budget_cap", type=float, default=1.0)
    out(s), solver(s), seed(s)
    s.set_defaults(func=cmd_specialization)

    s = sub.add_parser("gen-panel", help="simulate a staggered-adoption panel")
    s.add_argument("--output", "-o", required=True)
    s.add_argument("--config")
    s.add_argument("--contest", help="2x2 MultiTask scenario for a contest-linked panel")
    s.add_argument("--units", type=int)
    s.add_argument("--provinces", type=int)
    s.add_argument("--years", help="start:end")
    s.add_argument("--beta", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--sigma", type=float)
    seed(s)
    s.set_defaults(func=cmd_gen_panel, format="json")

    s = sub.add_parser("twfe", help="two-way fixed-effects regression")
    reg(s), out(s), seed(s)
    s.set_defaults(func=cmd_twfe)

    s = sub.add_parser("event-study", help="relative-time event study")
    reg(s), out(s), seed(s)
    s.add_argument("--pre", type=int, default=3)
    s.add_argument("--post", type=int, default=4)
    s.set_defaults(func=cmd_event_study)

    s = sub.add_parser("cs-att", help="group-time ATTs with bootstrap SEs")
    s.add_argument("panel")
    s.add_argument("--outcome", default="lgdp")
    s.add_argument("--control", choices=("never", "notyet"), default="never")
    s.add_argument("--group")
    s.add_argument("--bootstrap", type=int, default=400)
    out(s), seed(s)
    s.set_defaults(func=cmd_cs_att)

    s = sub.add_parser("placebo", help="randomized adoption-year placebo test")
    reg(s), out(s), seed(s)
    s.add_argument("--draws", type=int, default=500)
    s.add_argument("--support", help="comma-separated adoption years")
    s.set_defaults(func=cmd_placebo)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        sys.stderr.write(parser.format_usage())
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no subcommand given")
        if getattr(args, "seed", 0) is None:
            args.seed = _env_seed()
        args.func(args)
    except UsageError as exc:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"contest-lab: error: {exc}\n")
        return 1
    except SOLVER_ERRORS as exc:
        diag = {"error": type(exc).__name__, "message": str(exc)}
        for attr in ("residual", "columns", "unit_id"):
            if hasattr(exc, attr):
                diag[attr] = getattr(exc, attr)
        if getattr(exc, "profile", None) is not None:
            diag["profile"] = np.asarray(exc.profile).tolist()
        sys.stderr.write(json.dumps(diag, default=float) + "\n")
        return 2
    except ScenarioParseError as exc:
        sys.stderr.write(f"contest-lab: parse error: {exc}\n")
        return 1
    except (SpecError, ContestError) as exc:
        sys.stderr.write(f"contest-lab: invalid input: {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"contest-lab: I/O error: {exc}\n")
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
