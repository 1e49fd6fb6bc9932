"""Command-line interface: fit, simulate, mc, predict, crossval, bench.

Every subcommand reads an optional TOML config; command-line flags override
it.  Exit status: 0 success, 1 input error, 2 fit did not converge or its
standard errors are unavailable (artifacts are still written), 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import InputError, JMHError, SingularInformation
from .io import (ColumnMap, design_matrix, load_config, load_dataset, load_fit, read_table,
                 save_fit, spec_controls)
from .model import HETEROGENEOUS, HOMOGENEOUS
from .simulation import SIM_COLUMNS, SimDesign, cohort_frames, make_rng, simulate_cohort

log = logging.getLogger("jmhet")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_NUMERICAL = 0, 1, 2, 3


class Run:
    """Resolved configuration for one invocation."""

    def __init__(self, args):
        self.args = args
        self.path = Path(args.config) if args.config else None
        self.cfg = load_config(self.path) if self.path else {}
        run = self.cfg.get("run", {})
        self.seed = args.seed if args.seed is not None else int(run.get("seed", 1))
        self.threads = args.threads if args.threads is not None else int(run.get("threads", 1))
        self.out = Path(args.out or run.get("out", "."))
        self.out.mkdir(parents=True, exist_ok=True)
        model = spec_controls(self.cfg.get("model"))
        if args.quad_points is not None:
            model["quad_points"] = args.quad_points
        if args.variance_mode is not None:
            model["variance_mode"] = args.variance_mode
        self.controls = model

    def table(self, name: str) -> dict:
        return dict(self.cfg.get(name, {}))

    def resolve(self, p) -> Path:
        p = Path(p)
        if not p.is_absolute() and self.path is not None:
            return self.path.parent / p
        return p

    def columns(self) -> ColumnMap:
        cm = ColumnMap.from_config(self.cfg.get("columns"))
        if self.controls.get("variance_mode") == HOMOGENEOUS:
            cm = cm.homogeneous()
        return cm

    def dataset(self, long=None, surv=None):
        data = self.table("data")
        long = long or data.get("longitudinal")
        surv = surv or data.get("survival")
        if not long or not surv:
            raise InputError("longitudinal and survival CSV paths are required "
                             "([data] longitudinal/survival or --long/--surv)")
        cm = self.columns()
        ds = load_dataset(self.resolve(long), self.resolve(surv), cm, data.get("K"),
                          **self.controls)
        return ds, cm

    def design(self) -> SimDesign:
        sim = self.table("simulate")
        sim.setdefault("seed", self.seed)
        fields = SimDesign.__dataclass_fields__
        unknown = set(sim) - set(fields)
        if unknown:
            raise InputError(f"unknown [simulate] keys: {', '.join(sorted(unknown))}")
        sim = {k: tuple(map(tuple, v)) if k == "gamma" else tuple(v) if isinstance(v, list) else v
               for k, v in sim.items()}
        return SimDesign(**sim)


def _progress(info: dict) -> None:
    log.debug("iter %d  loglik %.6f  max rel change %.2e", info["iteration"],
              info["loglik"], info["max_param_delta"])


def cmd_fit(run: Run) -> int:
    from .em import fit
    from .inference import se_table, standard_errors

    data, cm = run.dataset(run.args.long, run.args.surv)
    log.info("fitting %s model: %d subjects, %d rows", data.spec.variance_mode,
             data.n, data.n_rows)
    res = fit(data, callback=_progress, se=False)
    status = EXIT_OK if res.converged else EXIT_NOT_CONVERGED
    try:
        res.cov = standard_errors(data, res)
    except SingularInformation as exc:
        log.warning("standard errors unavailable: %s", exc)
        status = EXIT_NOT_CONVERGED
    save_fit(res, run.out / "fit.json", cm)
    se_table(res).to_csv(run.out / "se_table.csv", index=False)
    pd.DataFrame({"iteration": np.arange(len(res.loglik_trace)),
                  "loglik": res.loglik_trace}).to_csv(run.out / "loglik_trace.csv", index=False)
    if not res.converged:
        log.warning("EM did not converge in %d iterations", res.n_iter)
    log.info("wrote %s", run.out / "fit.json")
    return status


def _toml_value(v) -> str:
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def cmd_simulate(run: Run) -> int:
    design = run.design()
    data = simulate_cohort(design, make_rng(design.seed))
    long, surv = cohort_frames(data)
    long.to_csv(run.out / "longitudinal.csv", index=False)
    surv.to_csv(run.out / "survival.csv", index=False)
    lines = ["[data]", 'longitudinal = "longitudinal.csv"', 'survival = "survival.csv"',
             "", "[columns]"]
    lines += [f"{k} = {_toml_value(v)}" for k, v in SIM_COLUMNS.items()]
    (run.out / "fit.toml").write_text("\n".join(lines) + "\n")
    s = data.summary()
    log.info("simulated %d subjects, %d rows", s["n"], s["n_rows"])
    return EXIT_OK


def cmd_mc(run: Run) -> int:
    from .simulation import monte_carlo_study

    mc = run.table("mc")
    configs = tuple(mc.get("configs", (HETEROGENEOUS, HOMOGENEOUS)))
    if run.args.variance_mode is not None:
        configs = (run.args.variance_mode,)
    design = run.design()
    controls = {k: v for k, v in run.controls.items() if k != "variance_mode"}
    rep = monte_carlo_study(design, int(mc.get("reps", 100)), configs, seed=run.seed,
                            threads=run.threads, **controls)
    rep.table.to_csv(run.out / "mc_table.csv", index=False)
    # wall times vary between runs; keep the CSV reports reproducible
    rep.replicates.drop(columns="seconds").to_csv(run.out / "mc_replicates.csv", index=False)
    log.info("mean fit time %.1f s", rep.replicates["seconds"].mean())
    text = rep.to_text()
    (run.out / "mc_table.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_predict(run: Run) -> int:
    from .prediction import PredictionRequest, conditional_cif, predict_frame, prediction_grid

    pred = run.table("predict")
    model = run.args.model or pred.get("model")
    history = run.args.history or pred.get("history")
    if not model or not history:
        raise InputError("a fitted model (--model) and a history CSV (--history) are required")
    fit, cm = load_fit(run.resolve(model))
    cm = cm or run.columns()
    landmark = run.args.landmark if run.args.landmark is not None else pred.get("landmark")
    horizons = run.args.horizons or pred.get("horizons")
    if landmark is None or not horizons:
        raise InputError("landmark and horizons are required")
    risks = pred.get("risks")
    b = cm.blocks
    need = {cm.id, cm.time, cm.y} | {c for blk in b.values() for c in blk
                                     if c not in ("1", "time")}
    hist_path = run.resolve(history)
    df = read_table(hist_path, sorted(need - {cm.id}), [cm.id])
    df = df[df[cm.time] <= float(landmark)]
    grid = prediction_grid(fit, run.args.quad_points)
    preds = []
    for sid, g in df.groupby(cm.id, sort=False):
        g = g.sort_values(cm.time, kind="stable")
        mats = [design_matrix(g, b[blk], cm.time) for blk in ("x1", "z", "w", "v")]
        req = PredictionRequest(sid, g[cm.time].to_numpy(float), g[cm.y].to_numpy(float),
                                *mats,
                                design_matrix(g.iloc[:1], b["x2"], cm.time)[0], float(landmark),
                                tuple(float(u) for u in horizons),
                                None if risks is None else tuple(risks))
        preds.append(conditional_cif(req, fit, grid))
    if not preds:
        raise InputError(f"{hist_path}: no history rows at or before the landmark")
    predict_frame(preds).to_csv(run.out / "predictions.csv", index=False)
    log.info("wrote %d predictions", len(preds))
    return EXIT_OK


def cmd_crossval(run: Run) -> int:
    from .simulation import mape_cv

    cv = run.table("crossval")
    if run.table("data"):
        data, _ = run.dataset()
    else:
        design = run.design()
        data = simulate_cohort(design, make_rng(design.seed),
                               design.spec(**{k: v for k, v in run.controls.items()
                                              if k != "variance_mode"}))
    configs = tuple(cv.get("configs", (HETEROGENEOUS, HOMOGENEOUS)))
    if data.spec.variance_mode == HOMOGENEOUS:
        configs = (HOMOGENEOUS,)
    table, folds = mape_cv(data, int(cv.get("folds", 4)), float(cv.get("landmark", 3.0)),
                           tuple(cv.get("horizons", (4.0, 6.0, 8.0))), configs,
                           seed=run.seed, threads=run.threads)
    table.to_csv(run.out / "mape.csv", index=False)
    folds.to_csv(run.out / "mape_folds.csv", index=False)
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_bench(run: Run) -> int:
    from .riskset import benchmark

    b = run.table("bench")
    rows = benchmark(tuple(b.get("sizes", (2000, 20000))), int(b.get("K", 2)), seed=run.seed,
                     repeats=int(b.get("repeats", 3)), naive=bool(b.get("naive", True)))
    df = pd.DataFrame(rows)
    df.to_csv(run.out / "bench.csv", index=False)
    print(df.to_string(index=False))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "mc": cmd_mc,
            "predict": cmd_predict, "crossval": cmd_crossval, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker processes for mc/crossval")
    common.add_argument("--quad-points", type=int, dest="quad_points")
    common.add_argument("--variance-mode", choices=(HETEROGENEOUS, HOMOGENEOUS),
                        dest="variance_mode")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="jmhet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    f = sub.add_parser("fit", parents=[common], help="fit the joint model to CSV data")
    f.add_argument("--long", metavar="CSV")
    f.add_argument("--surv", metavar="CSV")
    sub.add_parser("simulate", parents=[common], help="simulate a cohort to CSV")
    sub.add_parser("mc", parents=[common], help="Monte Carlo bias/SE/coverage study")
    pr = sub.add_parser("predict", parents=[common], help="dynamic CIF prediction")
    pr.add_argument("--model", metavar="JSON")
    pr.add_argument("--history", metavar="CSV")
    pr.add_argument("--landmark", type=float)
    pr.add_argument("--horizons", type=float, nargs="+")
    sub.add_parser("crossval", parents=[common], help="cross-validated MAPE")
    sub.add_parser("bench", parents=[common], help="risk-set kernel benchmark")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](Run(args))
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except JMHError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
