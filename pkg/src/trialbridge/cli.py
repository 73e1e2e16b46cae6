"""Command-line orchestration: estimate, diagnose, simulate.

All randomness flows from one --seed (or the config's seed); reruns with the
same inputs are byte-identical, and worker counts never change results.
Exit codes: 0 success, 2 input/config error, 3 estimation failure,
4 internal invariant breach.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import BootstrapSpec, bootstrap_rd, bootstrap_shared_rd, shared_arm_rd
from .config import RunConfig, config_hash, load_run_config, parse_scenario_toml
from .data import FusedDataset, load_dataset, restrict
from .diagnostics import covariate_balance, permutation_test, twister_export
from .errors import (
    ConfigError,
    EstimationError,
    TrialBridgeError,
    ValidationError,
)
from .estimator import (
    BRIDGE_TRIAL,
    SHARED_ARM,
    TARGET_TRIAL,
    PipelineConfig,
    bridged_estimate,
    compute_weights,
    fit_nuisance,
    ipw_risk,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ESTIMATION = 3
EXIT_INTERNAL = 4

_TRIAL_NAMES = {TARGET_TRIAL: "target", BRIDGE_TRIAL: "bridge"}


def _child_seed(master: int, *key) -> int:
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1, np.uint64)[0])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header, rows, provenance: str):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(provenance + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path: Path, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _provenance_line(cfg_hash: str, seed) -> str:
    return f"# trialbridge {__version__} config={cfg_hash} seed={seed}"


def _provenance_dict(cfg_hash: str, seed, ds: FusedDataset | None = None) -> dict:
    out = {"tool": "trialbridge", "version": __version__,
           "config_hash": cfg_hash, "seed": seed}
    if ds is not None:
        out["data"] = {k: ds.provenance.get(k) for k in ("source", "schema_hash", "restrictions")}
    return out


def _risk_curve_rows(curve):
    rows = [(0.0, 0.0)]
    rows += list(zip(curve.jump_times.tolist(), curve.values.tolist()))
    return rows


def _rd_rows(rd):
    if rd.has_bands:
        return list(zip(rd.times.tolist(), rd.rd.tolist(), rd.se.tolist(),
                        rd.ci_lo.tolist(), rd.ci_hi.tolist()))
    return list(zip(rd.times.tolist(), rd.rd.tolist()))


def _prepare_dataset(cfg: RunConfig, args) -> FusedDataset:
    input_path = args.input or cfg.input_path
    if not input_path:
        raise ConfigError("no input CSV given (use --input or [data] input)")
    ds = load_dataset(input_path, cfg.schema)
    restriction = cfg.restriction
    if args.restrict:
        cov, lo, hi = args.restrict
        restriction = (cov, float(lo), float(hi))
    if restriction:
        ds = restrict(ds, *restriction)
        counts = ds.provenance["restrictions"][-1]
        log.info("restriction %s in [%s, %s]: %d -> %d records",
                 restriction[0], restriction[1], restriction[2],
                 counts["n_before"], counts["n_after"])
    return ds


def _pipeline(cfg: RunConfig, sampling: bool = True) -> PipelineConfig:
    return PipelineConfig(
        censoring_formula=cfg.censoring_formula,
        sampling_formula=cfg.sampling_formula if sampling else None,
        strata_var=cfg.censoring_strata,
        weight_flag_cap=cfg.weight_flag_cap,
        truncate_weights=cfg.truncate_weights,
    )


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "bootstrap", None) is not None:
        cfg.bootstrap_b = args.bootstrap
    if getattr(args, "permutations", None) is not None:
        cfg.permutations = args.permutations
    if getattr(args, "add_one", False):
        cfg.add_one = True
    if cfg.seed is None:
        raise ConfigError("a seed is required (use --seed or seed = ... in the config)")
    return cfg


# ---------------------------------------------------------------------------
# estimate


def cmd_estimate(args) -> int:
    stage = "config"
    try:
        cfg = _apply_overrides(load_run_config(args.config), args)
        out_dir = Path(args.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        stage = "data"
        ds = _prepare_dataset(cfg, args)

        stage = "estimation"
        pipeline = _pipeline(cfg)
        est = bridged_estimate(ds, pipeline)

        stage = "bootstrap"
        t_grid = np.asarray(cfg.t_grid, dtype=float) if cfg.t_grid else est.rd_bridged.times
        if t_grid.size == 0:
            t_grid = np.asarray([ds.admin_censor_time])
        spec = BootstrapSpec(cfg.bootstrap_b, _child_seed(cfg.seed, 2), t_grid)
        boot = bootstrap_rd(ds, pipeline, spec, original=est)

        stage = "output"
        prov = _provenance_line(cfg.hash, cfg.seed)
        files = []
        for (trial, arm), curve in sorted(est.curves.items()):
            name = f"risk_{_TRIAL_NAMES[trial]}_arm{arm}.csv"
            _write_csv(out_dir / name, ["t", "value"], _risk_curve_rows(curve.curve), prov)
            files.append(name)
        for key, fname in (("3v2", "rd_3v2.csv"), ("2v1", "rd_2v1.csv"), ("3v1", "rd_3v1.csv")):
            rd = boot.curves[key]
            _write_csv(out_dir / fname, ["t", "value", "se", "ci_lo", "ci_hi"],
                       _rd_rows(rd), prov)
            files.append(fname)
        if cfg.dump_replicates:
            rows = [
                (b, float(t), float(boot.replicates["3v1"][b, j]))
                for b in range(cfg.bootstrap_b)
                for j, t in enumerate(t_grid)
            ]
            _write_csv(out_dir / "bootstrap_replicates.csv", ["b", "t", "rd"], rows, prov)
            files.append("bootstrap_replicates.csv")

        summary = {
            "provenance": _provenance_dict(cfg.hash, cfg.seed, ds),
            "n_target": est.n_target,
            "n_bridge": ds.n_bridge,
            "n_bridge_weighted": est.n_bridge_weighted,
            "weighted_to_target_ratio": est.n_bridge_weighted / est.n_target,
            "treatment_probabilities": {
                f"{_TRIAL_NAMES[trial]}_arm{arm}": p
                for (trial, arm), p in sorted(est.nuisance.treatment.items())
            },
            "extreme_weight_count": int(est.weights.flagged.sum()),
            "bootstrap": {"replicates": cfg.bootstrap_b, "redraws": boot.redraws,
                          "t_grid": t_grid.tolist()},
            "files": sorted(files),
        }
        _write_json(out_dir / "summary.json", summary)
        log.info("estimate: wrote %d files to %s", len(files) + 1, out_dir)
        return EXIT_OK
    except ValidationError as exc:
        print(f"error during {stage}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrialBridgeError as exc:
        print(f"error during {stage}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


# ---------------------------------------------------------------------------
# diagnose


def _diagnostic_pass(ds, cfg: RunConfig, weighted: bool, out_dir: Path, prov: str):
    """Shared-arm curves, twister, and permutation report for one weighting."""
    label = "weighted" if weighted else "unweighted"
    pipeline = _pipeline(cfg, sampling=weighted)
    nuisance = fit_nuisance(ds, pipeline)
    weights = compute_weights(ds, nuisance, cfg.weight_flag_cap, cfg.truncate_weights)

    curves = {}
    for trial in (TARGET_TRIAL, BRIDGE_TRIAL):
        curve = ipw_risk(ds, trial, SHARED_ARM, nuisance, weights)
        name = f"risk_shared_{_TRIAL_NAMES[trial]}_{label}.csv"
        _write_csv(out_dir / name, ["t", "value"], _risk_curve_rows(curve.curve), prov)
        curves[trial] = curve

    rd = shared_arm_rd(ds, pipeline, nuisance, weights)
    if cfg.bootstrap_b >= 2:
        grid = rd.times if rd.times.size else np.asarray([ds.admin_censor_time])
        spec = BootstrapSpec(cfg.bootstrap_b,
                             _child_seed(cfg.seed, 3 if weighted else 2), grid)
        rd = bootstrap_shared_rd(ds, pipeline, spec).curves["2v2"]
    twister = twister_export(rd, ds.admin_censor_time)
    header = ["t", "rd", "ci_lo", "ci_hi"] if rd.has_bands else ["t", "rd"]
    _write_csv(out_dir / f"twister_{label}.csv", header, twister, prov)

    perm = permutation_test(
        ds, nuisance, cfg.permutations,
        seed=_child_seed(cfg.seed, 1 if weighted else 0),
        add_one=cfg.add_one, refit_weights=cfg.refit_weights, weights=weights,
    )
    n_bridge_weighted = float(np.sum(weights.sampling_odds[ds.s == BRIDGE_TRIAL]))
    report = {
        "observed_area": perm.observed_area,
        "p_value": perm.p_value,
        "permutations": perm.p,
        "seed": perm.seed,
        "skipped_permutations": perm.skipped_permutations,
        "add_one": perm.add_one,
        "n_target": ds.n_target,
        "n_bridge_weighted": n_bridge_weighted,
    }
    return report, weights


def cmd_diagnose(args) -> int:
    stage = "config"
    try:
        cfg = _apply_overrides(load_run_config(args.config), args)
        out_dir = Path(args.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        stage = "data"
        ds = _prepare_dataset(cfg, args)

        stage = "diagnostics"
        prov = _provenance_line(cfg.hash, cfg.seed)
        report_u, weights_u = _diagnostic_pass(ds, cfg, False, out_dir, prov)
        reports = {"unweighted": report_u}
        weights_w = None
        if cfg.sampling_formula is not None:
            report_w, weights_w = _diagnostic_pass(ds, cfg, True, out_dir, prov)
            reports["weighted"] = report_w

        stage = "balance"
        names = list(cfg.schema.covariate_names)
        balance_u = covariate_balance(ds, weights_u, names)
        balance_w = covariate_balance(ds, weights_w, names) if weights_w is not None else None
        balance_rows = []
        balance_json = []
        for i, row in enumerate(balance_u):
            rec = {
                "covariate": row.covariate,
                "mean_target": row.mean_target,
                "mean_bridge_unweighted": row.mean_bridge_weighted,
                "smd_unweighted": row.smd,
            }
            csv_row = [row.covariate, row.mean_target, row.mean_bridge_weighted, row.smd]
            if balance_w is not None:
                rec["mean_bridge_weighted"] = balance_w[i].mean_bridge_weighted
                rec["smd_weighted"] = balance_w[i].smd
                csv_row += [balance_w[i].mean_bridge_weighted, balance_w[i].smd]
            balance_rows.append(tuple(csv_row))
            balance_json.append(rec)
        header = ["covariate", "mean_target", "mean_bridge_unweighted", "smd_unweighted"]
        if balance_w is not None:
            header += ["mean_bridge_weighted", "smd_weighted"]
        _write_csv(out_dir / "balance.csv", header, balance_rows, prov)

        stage = "output"
        payload = {
            "provenance": _provenance_dict(cfg.hash, cfg.seed, ds),
            "passes": reports,
            "balance": balance_json,
        }
        _write_json(out_dir / "diagnostic.json", payload)
        for name, rep in reports.items():
            log.info("diagnose (%s): area=%.5f p=%.4f", name, rep["observed_area"], rep["p_value"])
        return EXIT_OK
    except ValidationError as exc:
        print(f"error during {stage}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrialBridgeError as exc:
        print(f"error during {stage}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


# ---------------------------------------------------------------------------
# simulate


def _resolve_scenario_bytes(name: str) -> bytes:
    p = Path(name)
    if p.exists():
        return p.read_bytes()
    res = resources.files("trialbridge").joinpath("configs", name)
    if res.is_file():
        return res.read_bytes()
    raise ConfigError(f"scenario config {name!r} is neither a file nor a bundled config")


def cmd_simulate(args) -> int:
    stage = "config"
    try:
        cfg, raw = parse_scenario_toml(_resolve_scenario_bytes(args.config))
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, master_seed=args.seed)
        out_dir = Path(args.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg_hash = config_hash(raw)

        stage = "simulation"
        from .simulation import run_scenario

        result = run_scenario(cfg, workers=args.workers)
        metrics = result.metrics

        stage = "output"
        prov = _provenance_line(cfg_hash, cfg.master_seed)
        _write_csv(
            out_dir / "metrics.csv",
            ["day", "subset", "n_sims", "bias", "ese", "ser", "coverage"],
            [(r.t, r.subset, r.n_sims, r.bias, r.ese, r.ser, r.coverage)
             for r in metrics.rows],
            prov,
        )
        _write_csv(
            out_dir / "rejection.csv",
            ["alpha", "proportion_rejected", "kind"],
            [(a, r, metrics.rejection_kind) for a, r in sorted(metrics.rejection.items())],
            prov,
        )
        rep_header = ["replicate", "p_value", "error"]
        for t in cfg.t_eval:
            rep_header += [f"est_{t:g}", f"se_{t:g}", f"ci_lo_{t:g}", f"ci_hi_{t:g}"]
        rep_rows = []
        for o in result.replicates:
            row = [o.index, o.p_value if o.p_value is not None else "",
                   o.error or ""]
            for j in range(len(cfg.t_eval)):
                if o.failed:
                    row += ["", "", "", ""]
                else:
                    row += [float(o.estimate[j]), float(o.se[j]),
                            float(o.ci_lo[j]), float(o.ci_hi[j])]
            rep_rows.append(tuple(row))
        _write_csv(out_dir / "replicates.csv", rep_header, rep_rows, prov)

        payload = {
            "provenance": _provenance_dict(cfg_hash, cfg.master_seed),
            "scenario": {
                "sampling_model": cfg.sampling_model,
                "n_target": cfg.n_target,
                "n_bridge": cfg.n_bridge,
                "n_sims": cfg.n_sims,
                "bootstrap_b": cfg.bootstrap_b,
                "permutations": cfg.permutations,
                "oracle_n": cfg.oracle_n,
            },
            "truth": {
                str(t): {"value": tr.value, "mc_se": tr.mc_se, "n_used": tr.n_used}
                for t, tr in metrics.truth.items()
            },
            "rejection": {str(a): v for a, v in metrics.rejection.items()},
            "rejection_kind": metrics.rejection_kind,
            "rows": [dataclasses.asdict(r) for r in metrics.rows],
            "n_sims_used": metrics.n_sims,
            "n_failed": metrics.n_failed,
        }
        _write_json(out_dir / "metrics.json", payload)
        log.info("simulate: rejection at alpha=0.05 is %.3f (%s)",
                 metrics.rejection.get(0.05, float("nan")), metrics.rejection_kind)
        return EXIT_OK
    except ValidationError as exc:
        print(f"error during {stage}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrialBridgeError as exc:
        print(f"error during {stage}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trialbridge",
        description="Bridged treatment comparison across two trials with a shared arm.",
    )
    parser.add_argument("--version", action="version", version=f"trialbridge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, bootstrap=False, permutations=False):
        p.add_argument("--config", required=True, help="TOML config path")
        p.add_argument("--input", help="dataset CSV (overrides config)")
        p.add_argument("--output-dir", required=True)
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--restrict", nargs=3, metavar=("COV", "LO", "HI"),
                       help="covariate range restriction")
        p.add_argument("--workers", type=int, default=1)
        if bootstrap:
            p.add_argument("--bootstrap", type=int, help="bootstrap replicates")
        if permutations:
            p.add_argument("--permutations", type=int)
            p.add_argument("--add-one", action="store_true", dest="add_one",
                           help="use (count+1)/(p+1) for the permutation p-value")

    p_est = sub.add_parser("estimate", help="risk curves and bridged risk differences")
    common(p_est, bootstrap=True)
    p_est.set_defaults(func=cmd_estimate)

    p_diag = sub.add_parser("diagnose", help="shared-arm fusion diagnostics")
    common(p_diag, bootstrap=True, permutations=True)
    p_diag.set_defaults(func=cmd_diagnose)

    p_sim = sub.add_parser("simulate", help="operating-characteristic study")
    p_sim.add_argument("--config", required=True,
                       help="scenario TOML path or bundled config name")
    p_sim.add_argument("--output-dir", required=True)
    p_sim.add_argument("--seed", type=int, help="override the scenario master seed")
    p_sim.add_argument("--workers", type=int, default=1)
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception:  # noqa: BLE001 - invariant breach contract
        import traceback

        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
