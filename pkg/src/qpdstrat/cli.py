"""Batch experiment runner.

Subcommands:
    dp-weights  stratum weights and concentration profile of an instance
    enumerate   exact report (target, design variances, hierarchy) by enumeration
    run         Monte Carlo sweeps across depths, designs, models and seeds
    certify     allocation plan and variance-perturbation certificate for one budget

Instances are described by a JSON file or inline JSON; experiment configs add
sweep lists on top. CSV output uses '.' decimals, 17 significant digits and LF
line endings, and is byte-stable across repeated runs with the same seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .allocate import neyman_allocate, residual_hamilton_allocate, truncation_bias_bound, variance_certificate
from .circuits import build_instance, make_outcome_evaluator
from .engine import CSV_HEADER, Oracle, Shots, parse_model, run_naive, run_stratified, variance_ratio
from .oracle import (
    counts_statistic,
    enumerate_means,
    exact_design_variance,
    exact_stratum_moments,
    explained_variance,
    hierarchy_check,
    parity_statistic,
)
from .strata import concentration_profile, cumulative_state_count, forward_dp, parity_dp, stratum_count
from .util import csv_line, fmt_float

RESULT_HEADER = CSV_HEADER + ",L,nu,d,statistic"
RATIO_HEADER = "instance,design,model,K,R,seed,L,nu,d,statistic,rho,rho_ci_lo,rho_ci_hi"
ERROR_HEADER = "instance,design,model,K,R,seed,L,error"
DESIGNS = ("naive", "stratified-counts", "stratified-parity", "stratified-neyman")


def _load_json_arg(text: str) -> dict:
    text = text.strip()
    if text.startswith("{"):
        return json.loads(text)
    return json.loads(Path(text).read_text())


def _write_lines(path: Path, lines) -> None:
    path.write_text("\n".join(lines) + "\n", newline="\n")


def _positive_weight_vector(table):
    items = table.positive_items()
    keys = [k for k, _ in items]
    w = np.array([v for _, v in items])
    return keys, w / w.sum()


def _model_r(model) -> int:
    return model.r


def cmd_dp_weights(args) -> int:
    spec = _load_json_arg(args.instance)
    circuit = build_instance(spec)
    qpd = circuit.qpd
    states = stratum_count(qpd.nu, qpd.width)
    cached = cumulative_state_count(qpd.nu, qpd.width)
    print(f"instance {circuit.tag}: nu={qpd.nu} d={qpd.width} strata={states} cached_states={cached}")
    table = forward_dp(qpd, state_cap=args.state_cap)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = qpd.width
    header = ",".join(f"m_{j + 1}" for j in range(d)) + ",w_m"
    rows = [header]
    for m in sorted(table.final_weights):
        rows.append(csv_line(list(m) + [float(table.final_weights[m])]))
    _write_lines(out / "weights.csv", rows)

    profile = concentration_profile(table.final_weights, args.threshold)
    rows = ["rank," + ",".join(f"m_{j + 1}" for j in range(d)) + ",w_m,cumulative"]
    for i, key in enumerate(profile.keys):
        rows.append(csv_line([i + 1] + list(key) + [float(profile.weights[i]), float(profile.cumulative[i])]))
    _write_lines(out / "concentration.csv", rows)
    print(
        f"t_{args.threshold:g} = {profile.t_q} of {profile.total_strata} strata "
        f"({100.0 * profile.t_q / profile.total_strata:.2f}%)"
    )
    if args.figures:
        from .plots import save_concentration_figure

        save_concentration_figure(profile, out / "concentration.png", title=circuit.tag)
    print(f"wrote {out / 'weights.csv'}")
    return 0


def _moments_rows(moments) -> list[str]:
    is_tuple = moments.keys and isinstance(moments.keys[0], tuple)
    width = len(moments.keys[0]) if is_tuple else 1
    header = ",".join(f"m_{j + 1}" for j in range(width)) + ",w,mu,var"
    rows = [header]
    for key, w, mu, var in zip(moments.keys, moments.weights, moments.means, moments.variances):
        parts = list(key) if is_tuple else [key]
        rows.append(csv_line(parts + [float(w), float(mu), float(var)]))
    return rows


def cmd_enumerate(args) -> int:
    spec = _load_json_arg(args.instance)
    circuit = build_instance(spec)
    qpd = circuit.qpd
    evaluator = make_outcome_evaluator(circuit)
    result = enumerate_means(qpd, evaluator.exact_mean, cap=args.cap)

    models = [("oracle", Oracle())] + [(f"shots:{r}", Shots(r)) for r in args.shots]
    counts_stat = counts_statistic(qpd.width)
    parity_stat = parity_statistic(qpd)

    report: dict = {
        "instance": circuit.tag,
        "nu": qpd.nu,
        "d": qpd.width,
        "g1norm": qpd.norm1,
        "mu": result.mu,
        "configs": result.total_configs,
        "variances": {},
        "explained": {},
        "hierarchy": {},
    }
    for name, model in models:
        naive = exact_design_variance(result, model)
        counts_m = exact_stratum_moments(result, counts_stat, model)
        parity_m = exact_stratum_moments(result, parity_stat, model)
        hier = hierarchy_check(result, model)
        report["variances"][name] = {
            "naive": naive,
            "full": hier.full,
            "counts": counts_m.proportional_variance,
            "parity": parity_m.proportional_variance,
        }
        if naive > 0.0:
            r2, rho = explained_variance(result, counts_stat, model)
            report["explained"][name] = {"counts_r2": r2, "counts_rho": rho}
        else:
            report["explained"][name] = {"counts_r2": None, "counts_rho": None}
        report["hierarchy"][name] = hier.ordered()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "exact_report.json").write_text(json.dumps(report, indent=2) + "\n")
    _write_lines(out / "counts_moments.csv", _moments_rows(exact_stratum_moments(result, counts_stat)))
    _write_lines(out / "parity_moments.csv", _moments_rows(exact_stratum_moments(result, parity_stat)))
    ov = report["variances"]["oracle"]
    print(f"instance {circuit.tag}: mu={result.mu:.10g} g1norm={qpd.norm1:.10g}")
    print(f"oracle variances: naive={ov['naive']:.6g} counts={ov['counts']:.6g} parity={ov['parity']:.6g}")
    print(f"wrote {out / 'exact_report.json'}")
    return 0


def _build_tables(circuit, designs, evaluator, cap):
    """Stratification tables and exact moments shared by the designs of one instance."""
    qpd = circuit.qpd
    tables = {}
    if "stratified-counts" in designs or "stratified-neyman" in designs:
        tables["counts"] = forward_dp(qpd)
    if "stratified-parity" in designs:
        tables["parity"] = parity_dp(qpd)
    sigmas = None
    if "stratified-neyman" in designs:
        result = enumerate_means(qpd, evaluator.exact_mean, cap=cap)
        tables["neyman-moments"] = result
    return tables


def _plan_for(design, tables, circuit, budget, model, cap):
    if design == "stratified-counts":
        table = tables["counts"]
        keys, w = _positive_weight_vector(table)
        return table, residual_hamilton_allocate(w, budget, keys=keys), "counts"
    if design == "stratified-parity":
        table = tables["parity"]
        keys, w = _positive_weight_vector(table)
        return table, residual_hamilton_allocate(w, budget, keys=keys), "parity"
    if design == "stratified-neyman":
        table = tables["counts"]
        keys, w = _positive_weight_vector(table)
        moments = exact_stratum_moments(tables["neyman-moments"], counts_statistic(circuit.qpd.width), model)
        lookup = dict(zip(moments.keys, np.sqrt(moments.variances)))
        sigma = np.array([lookup[k] for k in keys])
        return table, neyman_allocate(w, sigma, budget, keys=keys), "neyman"
    raise ValueError(f"unknown design {design!r}")


def run_experiment(config: dict, workers: int = 1, enumeration_cap: int = 2**24):
    """Execute an experiment config; returns (result_rows, ratio_rows, error_rows).

    Rows are dicts in deterministic order. Partial failures produce error rows
    instead of aborting the sweep.
    """
    instance_spec = dict(config["instance"])
    depths = config.get("L_values") or [instance_spec.get("L", 1)]
    designs = list(config.get("designs", ["naive", "stratified-counts"]))
    if not designs:
        raise ValueError("designs must be non-empty")
    for d in designs:
        if d not in DESIGNS:
            raise ValueError(f"unknown design {d!r}")
    models = [parse_model(m) if isinstance(m, str) else m for m in config.get("models", ["oracle"])]
    budget = int(config.get("K", 1024))
    if budget < 2:
        raise ValueError("K must be at least 2")
    seeds = [int(s) for s in config.get("seeds", [0])]
    b_boot = int(config.get("B", 1024))

    results, ratios, errors = [], [], []
    reports = {}
    for depth in sorted(depths):
        spec = dict(instance_spec)
        spec["L"] = int(depth)
        spec.pop("tag", None)
        circuit = build_instance(spec)
        qpd = circuit.qpd
        evaluator = make_outcome_evaluator(circuit)
        try:
            tables = _build_tables(circuit, designs, evaluator, enumeration_cap)
        except Exception as exc:  # table build failure poisons all stratified cells
            tables = exc
        base = {
            "instance": circuit.tag,
            "K": budget,
            "L": int(depth),
            "nu": qpd.nu,
            "d": qpd.width,
            "g1norm": qpd.norm1,
        }
        for design in designs:
            for model in models:
                for seed in seeds:
                    cell = dict(base, design=design, model=model.tag(), R=_model_r(model), seed=seed)
                    try:
                        if isinstance(tables, Exception) and design != "naive":
                            raise tables
                        if design == "naive":
                            rep = run_naive(
                                qpd, evaluator, budget, model, seed, bootstrap=b_boot, workers=workers
                            )
                            statistic = "none"
                        else:
                            table, plan, statistic = _plan_for(
                                design, tables, circuit, budget, model, enumeration_cap
                            )
                            rep = run_stratified(
                                qpd, table, plan, evaluator, model, seed,
                                statistic=statistic, bootstrap=b_boot, workers=workers,
                            )
                        cell.update(
                            statistic=statistic,
                            mean=rep.mean,
                            var_hat=rep.var_hat,
                            ci_lo=rep.ci[0],
                            ci_hi=rep.ci[1],
                        )
                        results.append(cell)
                        reports[(depth, design, model.tag(), _model_r(model), seed)] = rep
                    except Exception as exc:
                        errors.append(dict(cell, error=str(exc).replace(",", ";")))

    for (depth, design, mtag, r, seed), rep in sorted(reports.items()):
        if design == "naive":
            continue
        naive = reports.get((depth, "naive", mtag, r, seed))
        if naive is None:
            continue
        try:
            est = variance_ratio(rep, naive)
        except ValueError:
            continue
        row = next(
            c for c in results
            if (c["L"], c["design"], c["model"], c["R"], c["seed"]) == (depth, design, mtag, r, seed)
        )
        ratios.append(
            {k: row[k] for k in ("instance", "design", "model", "K", "R", "seed", "L", "nu", "d", "statistic")}
            | {"rho": est.rho, "rho_ci_lo": est.ci[0], "rho_ci_hi": est.ci[1]}
        )

    order = ("L", "design", "model", "R", "seed")
    results.sort(key=lambda c: tuple(c[k] for k in order))
    ratios.sort(key=lambda c: tuple(c[k] for k in order))
    errors.sort(key=lambda c: tuple(c[k] for k in order))
    return results, ratios, errors


def _result_lines(results) -> list[str]:
    lines = [RESULT_HEADER]
    for c in results:
        lines.append(
            csv_line(
                [
                    c["instance"], c["design"], c["model"], c["K"], c["R"], c["seed"],
                    float(c["mean"]), float(c["var_hat"]), float(c["ci_lo"]), float(c["ci_hi"]),
                    float(c["g1norm"]), c["L"], c["nu"], c["d"], c["statistic"],
                ]
            )
        )
    return lines


def _ratio_lines(ratios) -> list[str]:
    lines = [RATIO_HEADER]
    for c in ratios:
        lines.append(
            csv_line(
                [
                    c["instance"], c["design"], c["model"], c["K"], c["R"], c["seed"], c["L"],
                    c["nu"], c["d"], c["statistic"],
                    float(c["rho"]), float(c["rho_ci_lo"]), float(c["rho_ci_hi"]),
                ]
            )
        )
    return lines


def cmd_run(args) -> int:
    config = _load_json_arg(args.config)
    if args.seed is not None:
        config["seeds"] = [args.seed]
    if args.budget is not None:
        config["K"] = args.budget
    if args.designs:
        config["designs"] = args.designs.split(",")
    if args.models:
        config["models"] = args.models.split(",")
    out = Path(args.out if args.out is not None else config.get("out", "results"))
    out.mkdir(parents=True, exist_ok=True)

    results, ratios, errors = run_experiment(config, workers=args.workers)
    _write_lines(out / "results.csv", _result_lines(results))
    _write_lines(out / "ratios.csv", _ratio_lines(ratios))
    if errors:
        lines = [ERROR_HEADER]
        for c in errors:
            lines.append(csv_line([c["instance"], c["design"], c["model"], c["K"], c["R"], c["seed"], c["L"], c["error"]]))
        _write_lines(out / "errors.csv", lines)
        for c in errors:
            print(f"error: {c['design']}/{c['model']}/L={c['L']}/seed={c['seed']}: {c['error']}", file=sys.stderr)

    if args.figures and results:
        from .plots import save_normalized_variance_figure, save_ratio_figure

        g1 = {c["L"]: c["g1norm"] for c in results}
        if ratios:
            save_ratio_figure(ratios, out / "ratios.png", g1norms=g1)
        save_normalized_variance_figure(results, out / "normalized_variance.png", budget=config.get("K"))

    print(f"wrote {len(results)} result rows, {len(ratios)} ratio rows to {out}")
    return 1 if errors else 0


def cmd_certify(args) -> int:
    spec = _load_json_arg(args.instance)
    circuit = build_instance(spec)
    qpd = circuit.qpd
    table = forward_dp(qpd)
    keys, w = _positive_weight_vector(table)
    plan = residual_hamilton_allocate(w, args.budget, keys=keys)
    bound = qpd.norm1  # Pauli observable: unit spectral norm times the 1-norm
    cert = variance_certificate(plan, bound=bound)
    bias = truncation_bias_bound(plan.dropped_mass, bound)
    payload = {
        "instance": circuit.tag,
        "plan": plan.to_json_dict(),
        "outcome_bound": bound,
        "cert_var": cert,
        "truncation_bias_bound": bias,
    }
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "certificate.json").write_text(text)
        print(f"wrote {out / 'certificate.json'}")
    print(
        f"K={args.budget}: retained={int(np.sum(plan.counts > 0))} K_star={plan.residual_count} "
        f"w_star={fmt_float(plan.dropped_mass)} cert_var={fmt_float(cert)} bias_bound={fmt_float(bias)}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpdstrat", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dp-weights", help="stratum weights and concentration profile")
    p.add_argument("--instance", required=True, help="instance JSON file or inline JSON")
    p.add_argument("--out", default="dp_weights", help="output directory")
    p.add_argument("--threshold", type=float, default=0.99, help="concentration quantile")
    p.add_argument("--state-cap", type=int, default=2**31, dest="state_cap")
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_dp_weights)

    p = sub.add_parser("enumerate", help="exact enumeration report")
    p.add_argument("--instance", required=True)
    p.add_argument("--out", default="enumerate")
    p.add_argument("--cap", type=int, default=2**24, help="configuration-count cap")
    p.add_argument("--shots", type=int, nargs="*", default=[1, 64], help="shot counts to report")
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("run", help="Monte Carlo experiment sweep")
    p.add_argument("--config", required=True, help="experiment config JSON file or inline JSON")
    p.add_argument("--seed", type=int, default=None, help="override the seed list")
    p.add_argument("--K", type=int, default=None, dest="budget", help="override the configuration budget")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--designs", default=None, help="comma-separated design list override")
    p.add_argument("--models", default=None, help="comma-separated model list override")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("certify", help="allocation plan and variance certificate")
    p.add_argument("--instance", required=True)
    p.add_argument("--K", type=int, required=True, dest="budget")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_certify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
