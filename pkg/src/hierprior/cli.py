"""Command-line front end: ``hierprior {check,sample,table1,probe,risk}``.

Configuration is a TOML file with dotted keys, for example::

    data_path = "x.csv"
    output_dir = "out"
    seed = 7
    prior.v.name = "HierReferenceA"
    prior.beta.case = 3
    prior.beta.A_scale = 1.0
    plan.v_updater = "MarginalHitRun"
    plan.n_iter = 20000

``--set KEY=VALUE`` overrides any key (VALUE is parsed as TOML when
possible, else kept as a string).  Exit codes: 0 success, 2 validation
failure, 3 improper posterior, 4 sampler failure, 5 probe contradiction.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .analysis import check_propriety, recommend_default, verdict_records
from .core import (
    BetaCase,
    BetaPriorSpec,
    HyperpriorSpec,
    ModelData,
    ModelError,
    VPriorName,
    VPriorParams,
    named_v_prior,
)
from .estimation import (
    BayesEstimator,
    EstimatorFailure,
    clustered_theta,
    frequentist_risk_mc,
    mle_estimator,
    posterior_mean,
    posterior_mean_se,
)
from .oracle import (
    Evidence,
    IntegrationConfig,
    brown_condition_trend,
    tail_integral_slope,
    propriety_probe,
)
from .samplers import (
    SamplerPlan,
    StuckSamplerError,
    VUpdater,
    check_plan_compatible,
    nonmove_statistics,
    run_chain,
    write_chain_csv,
)

log = logging.getLogger("hierprior")

EXIT_OK, EXIT_VALIDATION, EXIT_IMPROPER, EXIT_SAMPLER, EXIT_CONTRADICTION = 0, 2, 3, 4, 5

NAMED_PRIORS = [n.value for n in VPriorName if n is not VPriorName.CUSTOM]


class ConfigError(ModelError):
    """Invalid configuration; the message names the offending key."""


class IngestError(ModelError):
    """Malformed data file; the message gives the row and column."""


# -- data ---------------------------------------------------------------

def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def ingest_csv(path) -> ModelData:
    """Read a rectangular numeric CSV; a non-numeric first row is taken as a header."""
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: file not found")
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    if not rows:
        raise IngestError(f"{path}: no data rows")
    start = 0
    if not all(_is_number(c.strip()) for c in rows[0]):
        start = 1
    body = rows[start:]
    if not body:
        raise IngestError(f"{path}: header only, no data rows")
    width = len(body[0])
    values = []
    for i, row in enumerate(body, start=start + 1):
        if len(row) != width:
            raise IngestError(f"{path}: row {i} has {len(row)} columns, expected {width}")
        parsed = []
        for j, cell in enumerate(row, start=1):
            try:
                parsed.append(float(cell.strip()))
            except ValueError:
                raise IngestError(f"{path}: row {i}, column {j}: non-numeric cell {cell!r}") from None
        values.append(parsed)
    if width < 2:
        raise IngestError(f"{path}: need at least 2 columns (k >= 2), found {width}")
    try:
        return ModelData(np.array(values))
    except ModelError as exc:
        raise IngestError(f"{path}: {exc}") from exc


# -- configuration ------------------------------------------------------

def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for key, val in tree.items():
        full = f"{prefix}{key}"
        if isinstance(val, dict):
            out.update(_flatten(val, full + "."))
        else:
            out[full] = val
    return out


def _parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"--set expects KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value


def load_config(path, overrides=()) -> dict:
    cfg = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                cfg = _flatten(tomllib.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
    for item in overrides:
        key, value = _parse_override(item)
        cfg[key] = value
    return cfg


def _exact(value, key: str):
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number")
    if isinstance(value, (int, float)):
        return value
    try:
        return Fraction(str(value))
    except ValueError:
        raise ConfigError(f"{key}: expected a number or fraction, got {value!r}") from None


def prior_from_config(cfg: dict, k: int) -> HyperpriorSpec:
    """Build the hyperprior from the ``prior.*`` keys; ``prior.default = true`` gives the recommended one."""
    if cfg.get("prior.default"):
        return recommend_default(k)
    name = cfg.get("prior.v.name")
    try:
        if name is not None and str(name) != VPriorName.CUSTOM.value:
            vprior = named_v_prior(name, k)
        else:
            missing = [f"prior.v.{p}" for p in ("a1", "a2", "l") if f"prior.v.{p}" not in cfg]
            if missing:
                raise ConfigError(f"missing {', '.join(missing)} (or set prior.v.name)")
            vprior = VPriorParams(*(_exact(cfg[f"prior.v.{p}"], f"prior.v.{p}")
                                    for p in ("a1", "a2", "l")))
    except ConfigError:
        raise
    except ModelError as exc:
        raise ConfigError(f"prior.v: {exc}") from exc
    case = cfg.get("prior.beta.case", 1)
    try:
        case = BetaCase.from_any(case)
        kwargs = {"case": case}
        if case is not BetaCase.FLAT:
            if "prior.beta.A" in cfg:
                kwargs["A"] = np.array(cfg["prior.beta.A"], dtype=float)
            else:
                kwargs["A"] = float(cfg.get("prior.beta.A_scale", 1.0)) * np.eye(k)
            if "prior.beta.beta0" in cfg:
                kwargs["beta0"] = np.array(cfg["prior.beta.beta0"], dtype=float)
            for p in ("b", "c"):
                if f"prior.beta.{p}" in cfg:
                    kwargs[p] = _exact(cfg[f"prior.beta.{p}"], f"prior.beta.{p}")
        spec = HyperpriorSpec(vprior, BetaPriorSpec(**kwargs))
        spec.check_dimension(k)
    except ConfigError:
        raise
    except (ModelError, ValueError, TypeError) as exc:
        raise ConfigError(f"prior.beta: {exc}") from exc
    return spec


_PLAN_KEYS = {"mh_inner_iters": int, "n_iter": int, "n_burnin": int, "thin": int,
              "step_scale": float, "attempt_cap": int}


def plan_from_config(cfg: dict, seed: int) -> SamplerPlan:
    if "plan.v_updater" not in cfg:
        raise ConfigError("plan.v_updater is required")
    kw = {}
    for key, conv in _PLAN_KEYS.items():
        if f"plan.{key}" in cfg:
            try:
                kw[key] = conv(cfg[f"plan.{key}"])
            except (TypeError, ValueError):
                raise ConfigError(f"plan.{key}: expected {conv.__name__}") from None
    try:
        return SamplerPlan(cfg["plan.v_updater"], seed=seed, **kw)
    except ModelError as exc:
        raise ConfigError(f"plan: {exc}") from exc


def _seed(cfg: dict) -> int:
    try:
        return int(cfg.get("seed", 0))
    except (TypeError, ValueError):
        raise ConfigError("seed: expected an integer") from None


def _output_dir(cfg: dict) -> Path:
    out = Path(cfg.get("output_dir", "hierprior-out"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output_dir: cannot create {out}: {exc}") from None
    return out


def _load_data(cfg: dict) -> ModelData:
    if "data_path" not in cfg:
        raise ConfigError("data_path is required")
    return ingest_csv(cfg["data_path"])


def _write_json(path: Path, record) -> None:
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# -- subcommands --------------------------------------------------------

def cmd_check(cfg: dict, args) -> int:
    data = _load_data(cfg)
    spec = prior_from_config(cfg, data.k)
    rec = verdict_records(spec, data.m, data.k)
    rec["m"], rec["k"] = data.m, data.k
    _write_json(_output_dir(cfg) / "verdict.json", rec)
    print(json.dumps(rec, indent=2, sort_keys=True))
    return EXIT_OK if rec["propriety"]["status"] == "Proper" else EXIT_IMPROPER


def cmd_sample(cfg: dict, args) -> int:
    data = _load_data(cfg)
    spec = prior_from_config(cfg, data.k)
    plan = plan_from_config(cfg, _seed(cfg))
    verdict = check_propriety(spec, data.m, data.k)
    if not verdict.proper:
        if not args.force:
            print(f"improper posterior: {verdict.rule}", file=sys.stderr)
            return EXIT_IMPROPER
        log.warning("--force: sampling an IMPROPER posterior (%s); output is meaningless", verdict.rule)
    try:
        check_plan_compatible(plan, spec, data.m, data.k)
    except ModelError as exc:
        raise ConfigError(f"plan.v_updater: {exc}") from exc
    try:
        out = run_chain(data, spec, plan, check=not args.force)
    except (StuckSamplerError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"sampler failure under plan {plan.v_updater.value}: {exc}", file=sys.stderr)
        return EXIT_SAMPLER
    odir = _output_dir(cfg)
    write_chain_csv(out, odir / "chain.csv")
    summary = {
        "v_updater": plan.v_updater.value,
        "n_saved": len(out),
        "acceptance_rate": out.acceptance_rate,
        "posterior_mean_theta": posterior_mean(out).tolist(),
        "posterior_mean_theta_se": posterior_mean_se(out).tolist(),
        "posterior_mean_beta": out.beta.mean(axis=0).tolist(),
        "posterior_mean_V": out.V.mean(axis=0).tolist(),
    }
    if out.lam is not None:
        summary["posterior_mean_lambda"] = float(out.lam.mean())
    if plan.v_updater.is_mh:
        summary["nonmoves"] = nonmove_statistics(out)
    _write_json(odir / "summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def table1_cell(k: int, m: int, replicates: int, n_iter: int, n_burnin: int,
                inner: int, seed: int) -> dict:
    """Pooled nonmoves for ReferenceMH_B on synthetic data theta_i ~ N(0, I), x_i ~ N(theta_i, I)."""
    spec = HyperpriorSpec(named_v_prior("HierReferenceB", k))
    seqs = np.random.SeedSequence([seed, k, m]).spawn(replicates)
    rej, mov, failures = [], [], 0
    for seq in seqs:
        g = np.random.default_rng(seq)
        theta = g.standard_normal((m, k))
        x = theta + g.standard_normal((m, k))
        plan = SamplerPlan(VUpdater.REFERENCE_MH_B, mh_inner_iters=inner, n_iter=n_iter,
                           n_burnin=n_burnin, seed=int(g.integers(0, 2 ** 63)))
        try:
            out = run_chain(x, spec, plan, rng=g)
        except (ModelError, StuckSamplerError, FloatingPointError, np.linalg.LinAlgError):
            failures += 1
            continue
        rej.append(int(out.v_attempt_counts.sum()))
        mov.append(int(out.v_move_counts.sum()))
    rej_a, mov_a = np.array(rej, float), np.array(mov, float)
    n = rej_a.size
    if n == 0 or mov_a.sum() == 0:
        return {"k": k, "m": m, "nonmoves": float("nan"), "se": float("nan"),
                "replicates": n, "failures": failures}
    ratio = rej_a.sum() / mov_a.sum()
    if n > 1:
        resid = rej_a - ratio * mov_a
        se = math.sqrt(np.sum(resid ** 2) / (n * (n - 1))) / mov_a.mean()
    else:
        se = float("nan")
    return {"k": k, "m": m, "nonmoves": float(ratio), "se": float(se),
            "replicates": n, "failures": failures}


def run_table1(ks, ms, replicates, n_iter, n_burnin, inner, seed, workers=1) -> list[dict]:
    jobs = [(k, m, replicates, n_iter, n_burnin, inner, seed) for k in ks for m in ms]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(table1_cell, *zip(*jobs)))
    return [table1_cell(*job) for job in jobs]


def cmd_table1(cfg: dict, args) -> int:
    ks = [int(v) for v in cfg.get("table1.k", [3, 5])]
    ms = [int(v) for v in cfg.get("table1.m", [20, 30, 50, 100])]
    rows = run_table1(ks, ms, int(cfg.get("table1.replicates", 10)),
                      int(cfg.get("table1.n_iter", 1000)), int(cfg.get("table1.n_burnin", 200)),
                      int(cfg.get("table1.mh_inner_iters", 10)), _seed(cfg), args.workers)
    odir = _output_dir(cfg)
    with open(odir / "table1.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print("k \\ m " + " ".join(f"{m:>14d}" for m in ms))
    for k in ks:
        cells = []
        for m in ms:
            row = next(r for r in rows if r["k"] == k and r["m"] == m)
            cells.append("missing".rjust(14) if math.isnan(row["nonmoves"])
                         else f"{row['nonmoves']:7.2f}+-{row['se']:5.2f}")
        print(f"{k:5d} " + " ".join(cells))
    return EXIT_OK


def probe_grid(ks, case_b=Fraction(1, 2)) -> list[dict]:
    """propriety_probe against check_propriety over named priors x cases x m <= 2k + 3."""
    rows = []
    for k in ks:
        for name in NAMED_PRIORS:
            for case in BetaCase:
                bp = BetaPriorSpec(case) if case is BetaCase.FLAT else BetaPriorSpec(
                    case, np.zeros(k), np.eye(k), case_b, Fraction(1, 2))
                spec = HyperpriorSpec(named_v_prior(name, k), bp)
                for m in range(1, 2 * k + 4):
                    ev = propriety_probe(spec, m, k)
                    proper = check_propriety(spec, m, k).proper
                    contradiction = (ev.status is Evidence.DIVERGES and proper) or (
                        ev.status is Evidence.CONVERGES and not proper)
                    rows.append({"k": k, "prior": name, "case": case.value, "m": m,
                                 "analytic": "Proper" if proper else "Improper",
                                 "probe": ev.status.value, "end": ev.end,
                                 "growth_exponent": ev.growth_exponent,
                                 "contradiction": contradiction})
    return rows


def cmd_probe(cfg: dict, args) -> int:
    ks = [int(v) for v in cfg.get("probe.k", [2, 3, 4])]
    if any(k > 4 or k < 2 for k in ks):
        raise ConfigError("probe.k: values must lie in 2..4")
    rows = probe_grid(ks)
    report = {
        "grid": rows,
        "contradictions": sum(r["contradiction"] for r in rows),
        "inconclusive": sum(r["probe"] == Evidence.INCONCLUSIVE.value for r in rows),
        "points": len(rows),
    }
    slopes = []
    for r, a in cfg.get("probe.tail_slopes", [[2, 0.5], [1.5, 0.9], [3, 0]]):
        slope = tail_integral_slope(float(r), float(a))
        slopes.append({"r": r, "a": a, "slope": slope, "expected": 1 - r - a,
                       "ok": abs(slope - (1 - r - a)) <= 0.02})
    report["tail_slopes"] = slopes
    if cfg.get("probe.trend", False):
        k = int(cfg.get("probe.trend_k", 2))
        m = int(cfg.get("probe.trend_m", 2))
        spec = prior_from_config(cfg, k)
        grid = cfg.get("probe.r_grid", [4, 8, 16, 32, 64])
        icfg = IntegrationConfig(n_haar=int(cfg.get("probe.n_haar", 32)))
        report["integral_trend"] = brown_condition_trend(
            spec, m, k, grid, icfg, n_sphere=int(cfg.get("probe.n_sphere", 32)),
            rng=np.random.default_rng(_seed(cfg)))
    _write_json(_output_dir(cfg) / "probe.json", report)
    print(f"{report['points']} grid points, {report['contradictions']} contradictions, "
          f"{report['inconclusive']} inconclusive")
    for row in slopes:
        print(f"tail-integral slope r={row['r']} a={row['a']}: {row['slope']:.4f} (expected {row['expected']})")
    bad = report["contradictions"] or not all(r["ok"] for r in slopes)
    return EXIT_CONTRADICTION if bad else EXIT_OK


def cmd_risk(cfg: dict, args) -> int:
    m = int(cfg.get("risk.m", 10))
    k = int(cfg.get("risk.k", 3))
    n_rep = int(cfg.get("risk.n_rep", 200))
    scenarios = cfg.get("risk.scenarios", [{"name": "clustered", "scale2": 0.5}])
    estimators = cfg.get("risk.estimators", ["MLE", "default"])
    seed = _seed(cfg)
    chain_iter = int(cfg.get("risk.n_iter", 1000))
    chain_burn = int(cfg.get("risk.n_burnin", 250))
    odir = _output_dir(cfg)
    table = []
    for si, sc in enumerate(scenarios):
        name = sc.get("name", f"scenario{si}")
        theta = clustered_theta(m, k, float(sc.get("scale2", 0.5)),
                                np.random.SeedSequence([seed, si]))
        reports = {}
        for est_name in estimators:
            if est_name == "MLE":
                est = mle_estimator
            else:
                if est_name == "default":
                    spec = recommend_default(k)
                elif est_name == "config":
                    spec = prior_from_config(cfg, k)
                else:
                    spec = HyperpriorSpec(named_v_prior(est_name, k), recommend_default(k).bprior)
                if not check_propriety(spec, m, k).proper:
                    log.warning("estimator %s skipped: improper posterior", est_name)
                    continue
                est = BayesEstimator(spec, n_iter=chain_iter, n_burnin=chain_burn)
            try:
                rep = frequentist_risk_mc(theta, est, n_rep=n_rep, rng=seed, name=est_name)
            except EstimatorFailure as exc:
                log.error("estimator %s failed: %s", est_name, exc)
                continue
            reports[est_name] = rep
            _write_json(odir / f"risk_{name}_{est_name}.json", rep.to_record())
        base = reports.get("MLE")
        for est_name, rep in reports.items():
            row = {"scenario": name, "estimator": est_name, "risk": rep.risk_estimate,
                   "se": rep.std_error, "n_rep": rep.n_rep}
            if base is not None and est_name != "MLE":
                row["gap_vs_mle"] = base.risk_estimate - rep.risk_estimate
                row["gap_se"] = math.hypot(base.std_error, rep.std_error)
            table.append(row)
    fields = ["scenario", "estimator", "risk", "se", "n_rep", "gap_vs_mle", "gap_se"]
    with open(odir / "risk_table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    for row in table:
        gap = (f"  gap {row['gap_vs_mle']:.3f} +- {row['gap_se']:.3f}"
               if "gap_vs_mle" in row else "")
        print(f"{row['scenario']:>12} {row['estimator']:>16} {row['risk']:9.3f} +- {row['se']:.3f}{gap}")
    return EXIT_OK


COMMANDS = {"check": cmd_check, "sample": cmd_sample, "table1": cmd_table1,
            "probe": cmd_probe, "risk": cmd_risk}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hierprior", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--data", help="data CSV (overrides config)")
    p.add_argument("--plan", help="V updater, e.g. marginal-rejection (overrides config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration key")
    p.add_argument("--force", action="store_true", help="sample even if the posterior is improper")
    p.add_argument("--workers", type=int, default=1, help="worker processes for table1 cells")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["output_dir"] = args.out
        if args.data is not None:
            cfg["data_path"] = args.data
        if args.plan is not None:
            cfg["plan.v_updater"] = args.plan
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StuckSamplerError as exc:
        print(f"sampler failure: {exc}", file=sys.stderr)
        return EXIT_SAMPLER


if __name__ == "__main__":
    sys.exit(main())
