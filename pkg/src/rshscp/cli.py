"""Command-line driver: simulate, fit, grid, eval and report.

Exit codes: 0 on success, 2 on invalid input or configuration, 3 on a
numerical failure.  ``HSCP_THREADS`` caps BLAS threads; ``0`` (or unset)
means deterministic single-threaded runs.
"""

import argparse
import json
import os
import sys
from contextlib import nullcontext

import numpy as np

from .exceptions import HSCPError, InvalidParameter, NumericalError, ValidationError
from .io import (
    RunConfig,
    load_dataset,
    load_model_file,
    save_dataset,
    save_model,
    write_csv,
)
from .model import GroundTruth

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidParameter(f"{path}: invalid JSON: {exc}") from exc


def _threads():
    raw = os.environ.get("HSCP_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidParameter(f"HSCP_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise InvalidParameter("HSCP_THREADS must be >= 0")
    return n


def _apply_threads(hp):
    n = _threads()
    if n == 0:
        return hp.replace(deterministic=True), nullcontext()
    from threadpoolctl import threadpool_limits

    return hp.replace(deterministic=False), threadpool_limits(limits=n)


def _progress(every):
    def cb(it, phase, obj, rec):
        if every and it % every == 0:
            print(f"iter {it} phase={phase} objective={obj:.6g} recon={rec:.6g}",
                  file=sys.stderr, flush=True)
    return cb


# -- truth files -----------------------------------------------------------------

def save_truth(truth, path):
    arrays = {f"W{r}": w for r, w in enumerate(truth.W)}
    arrays.update({f"Lambda{r}": lam for r, lam in enumerate(truth.Lambda)})
    arrays.update(U=truth.U, V=truth.V)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_truth(path):
    with np.load(path) as z:
        W = [z[f"W{r}"] for r in range(sum(k.startswith("W") for k in z.files))]
        lam = [z[f"Lambda{r}"] for r in range(sum(k.startswith("Lambda") for k in z.files))]
        return GroundTruth(W, lam, z["U"], z["V"])


# -- commands --------------------------------------------------------------------

def cmd_simulate(args):
    from .simulation import SimSpec, generate

    cfg = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        spec = SimSpec(**cfg)
    except TypeError as exc:
        raise InvalidParameter(f"bad simulation config: {exc}") from exc
    data, truth = generate(spec)
    save_dataset(data, args.out)
    if args.truth:
        save_truth(truth, args.truth)
    print(json.dumps({"dataset": args.out, "n_subjects": data.n_subjects, "p": data.p,
                      "n_sites": data.n_sites, "truth": args.truth}))
    return EXIT_OK


def _load_run_config(args):
    cfg = RunConfig.load(args.config)
    hp = cfg.hyperparams
    if getattr(args, "seed", None) is not None:
        hp = hp.replace(seed=args.seed)
    method = getattr(args, "method", None) or cfg.method
    return cfg, method, hp


def _fit(data, method, hp, callback=None, init="svd"):
    from .baselines import combat_hscp_fit
    from .optimizer import fit

    if method == "combat_hscp":
        return combat_hscp_fit(data, hp, callback=callback)
    return fit(data, hp, method, init=init, callback=callback)


def cmd_fit(args):
    cfg, method, hp = _load_run_config(args)
    data_path = args.data or cfg.paths.get("data")
    out = args.out or cfg.paths.get("model")
    if not data_path or not out:
        raise InvalidParameter("fit needs --data and --out (or paths.data / paths.model)")
    data = load_dataset(data_path)
    hp, ctx = _apply_threads(hp)
    with ctx:
        rep = _fit(data, method, hp, _progress(args.progress), cfg.init)
    save_model(rep.model, out, hp, hp.seed)
    summary = rep.summary()
    summary["wall_clock"] = None if args.no_timing else summary["wall_clock"]
    summary["model"] = out
    report = args.report or cfg.paths.get("report")
    if report:
        with open(report, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    trace = args.trace or cfg.paths.get("trace")
    if trace:
        write_trace(rep, trace)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def write_trace(rep, path):
    rows = [{"iteration": i, "phase": ph, "objective": obj, "reconstruction_error": rec}
            for i, (ph, obj, rec) in enumerate(zip(rep.phase_trace, rep.objective_trace,
                                                   rep.recon_trace))]
    write_csv(path, rows, ["iteration", "phase", "objective", "reconstruction_error"])


def cmd_grid(args):
    from .evaluation import grid_search

    cfg, method, hp = _load_run_config(args)
    data = load_dataset(args.data)
    grid = _read_json(args.grid)
    if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
        raise InvalidParameter("grid file must map hyperparameter names to lists")
    hp, ctx = _apply_threads(hp)
    with ctx:
        best, table = grid_search(data, hp, grid, method, repeats=args.repeats, rng=hp.seed)
    columns = list(grid) + ["mean", "sd", "error"]
    write_csv(args.out, table, columns)
    print(json.dumps({"best": {k: getattr(best, k) for k in grid}, "table": args.out},
                     default=list))
    return EXIT_OK


def cmd_eval(args):
    from .evaluation import (
        leave_one_site_out,
        level_accuracies,
        site_prediction_cv,
        split_sample_reproducibility,
    )

    data = load_dataset(args.data)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    known = {"accuracy", "site_cv", "reproducibility", "loso"}
    unknown = set(metrics) - known
    if unknown:
        raise InvalidParameter(f"unknown metrics {sorted(unknown)}; choose from {sorted(known)}")
    rows = []
    mf = load_model_file(args.model) if args.model else None
    if "accuracy" in metrics:
        if mf is None or not args.truth:
            raise InvalidParameter("accuracy needs --model and --truth")
        truth = load_truth(args.truth)
        for r, acc in enumerate(level_accuracies(mf.model, truth)):
            rows.append({"metric": "accuracy", "level": r + 1, "value": acc})
    if "site_cv" in metrics:
        if mf is None:
            raise InvalidParameter("site_cv needs --model")
        feats = mf.model.features()
        if feats.shape[0] != data.n_subjects:
            raise InvalidParameter("model and dataset disagree on the number of subjects")
        for kind in args.classifiers.split(","):
            rows.append({"metric": f"site_cv_{kind}", "level": "",
                         "value": site_prediction_cv(feats, data.sites, model=kind,
                                                     rng=args.seed)})
    if "reproducibility" in metrics or "loso" in metrics:
        if not args.config:
            raise InvalidParameter("reproducibility and loso need --config")
        cfg, method, hp = _load_run_config(args)
        hp, ctx = _apply_threads(hp)
        with ctx:
            if "reproducibility" in metrics:
                mean, sd, _ = split_sample_reproducibility(
                    data, hp, method, rng=args.seed, repeats=args.repeats,
                    fit_fn=lambda d: _fit(d, method, hp).model)
                rows.append({"metric": "split_sample_mean", "level": "", "value": mean})
                rows.append({"metric": "split_sample_sd", "level": "", "value": sd})
            if "loso" in metrics:
                for s, v in enumerate(leave_one_site_out(data, hp, method)):
                    rows.append({"metric": "loso", "level": f"site{s + 1}", "value": float(v)})
    if args.out:
        write_csv(args.out, rows, ["metric", "level", "value"])
    for row in rows:
        print(f"{row['metric']}\t{row['level']}\t{row['value']:.6f}")
    return EXIT_OK


TABLES = {
    "table1": {"widths": [(8,), (10,), (12,), (14,)], "value": "accuracy"},
    "table2": {"widths": [(8,), (10,), (12,), (14,)], "value": "reproducibility"},
    "table3": {"widths": [(k1, k2) for k2 in (4, 6) for k1 in (8, 10, 12, 14)],
               "value": "accuracy"},
}


def cmd_report(args):
    from .experiments import (
        TABLE_METHODS,
        desk_spec,
        markdown_table,
        method_hyperparams,
        run_table,
        wide_table,
    )
    from .simulation import generate

    tables = [t.strip() for t in args.tables.split(",") if t.strip()]
    bad = set(tables) - set(TABLES) - {"convergence"}
    if bad:
        raise InvalidParameter(f"unknown tables {sorted(bad)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    methods = tuple(m for m in args.methods.split(",")) if args.methods else TABLE_METHODS
    overrides = {}
    if args.iters is not None:
        overrides["max_iters"] = args.iters
    sim_overrides = {}
    if args.sites:
        sim_overrides["subjects_per_site"] = tuple(int(x) for x in args.sites.split(","))
    os.makedirs(args.out_dir, exist_ok=True)
    log = (lambda s: print(s, file=sys.stderr, flush=True)) if args.progress else None
    written = []
    for name in tables:
        if name == "convergence":
            data, _ = generate(desk_spec(seeds[0], (10,), **sim_overrides))
            hp = method_hyperparams("adv_rshscp", (10,), seeds[0], **overrides)
            rep = _fit(data, "adv_rshscp", hp)
            csv_path = os.path.join(args.out_dir, "convergence.csv")
            write_trace(rep, csv_path)
            path = os.path.join(args.out_dir, "convergence.dat")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(f"# adv_start {rep.adv_start}\n")
                fh.write("# iteration reconstruction_error objective phase\n")
                for i, (ph, obj, rec) in enumerate(zip(rep.phase_trace, rep.objective_trace,
                                                       rep.recon_trace)):
                    fh.write(f"{i} {rec!r} {obj!r} {ph}\n")
            written += [csv_path, path]
            continue
        spec = TABLES[name]
        widths = spec["widths"]
        if args.k:
            keep = {tuple(int(x) for x in k.split("-")) for k in args.k.split(",")}
            widths = [w for w in widths if w in keep] or sorted(keep)
        rows = run_table(seeds, widths, methods, reproducibility=spec["value"] == "reproducibility",
                         overrides=overrides, sim_overrides=sim_overrides, log=log)
        for row in rows:
            row.pop("seconds", None)
        runs_path = os.path.join(args.out_dir, f"{name}_runs.csv")
        write_csv(runs_path, rows)
        csv_path = os.path.join(args.out_dir, f"{name}.csv")
        wide, columns = wide_table(rows, spec["value"])
        write_csv(csv_path, wide, columns)
        md_path = os.path.join(args.out_dir, f"{name}.md")
        with open(md_path, "w", encoding="utf-8") as fh:
            fh.write(markdown_table(rows, spec["value"]))
        written += [csv_path, runs_path, md_path]
    print(json.dumps({"written": written}))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="rshscp", description="Site-robust hierarchical sparse connectivity patterns.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", help="JSON simulation settings")
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.add_argument("--out", required=True, help="dataset file to write")
    s.add_argument("--truth", help="optional .npz file for the ground truth")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a model to a dataset")
    f.add_argument("--data", help="dataset file (or paths.data in the config)")
    f.add_argument("--config", required=True, help="JSON fit configuration")
    f.add_argument("--method", choices=("hscp", "adv_hscp", "rshscp", "adv_rshscp", "combat_hscp"))
    f.add_argument("--seed", type=int, help="overrides the config seed")
    f.add_argument("--out", help="model file to write")
    f.add_argument("--report", help="FitReport JSON path")
    f.add_argument("--trace", help="convergence CSV path")
    f.add_argument("--progress", type=int, default=0, metavar="N",
                   help="print a progress line to stderr every N iterations")
    f.add_argument("--no-timing", action="store_true",
                   help="omit wall-clock time so reports are byte-reproducible")
    f.set_defaults(func=cmd_fit)

    g = sub.add_parser("grid", help="grid search by split-sample reproducibility")
    g.add_argument("--data", required=True)
    g.add_argument("--config", required=True)
    g.add_argument("--grid", required=True, help="JSON mapping names to value lists")
    g.add_argument("--method", help="overrides the config method")
    g.add_argument("--seed", type=int)
    g.add_argument("--repeats", type=int, default=2, help="random splits per grid point")
    g.add_argument("--out", required=True, help="CSV of grid points and scores")
    g.set_defaults(func=cmd_grid)

    e = sub.add_parser("eval", help="accuracy, reproducibility, LOSO and site-CV")
    e.add_argument("--data", required=True)
    e.add_argument("--model", help="fitted model file")
    e.add_argument("--truth", help="ground-truth .npz, needed for accuracy")
    e.add_argument("--config", help="fit configuration, needed for reproducibility and loso")
    e.add_argument("--method")
    e.add_argument("--metrics", default="accuracy",
                   help="comma list of accuracy, site_cv, reproducibility, loso")
    e.add_argument("--classifiers", default="logistic",
                   help="comma list of logistic, svm, mlp_a, mlp_b for site_cv")
    e.add_argument("--repeats", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="CSV path; printed to stdout when omitted")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="desk-scale tables as CSV and markdown")
    r.add_argument("--tables", default="table1",
                   help="comma list of table1, table2, table3, convergence")
    r.add_argument("--seeds", default="0", help="comma list, e.g. 0,1,2")
    r.add_argument("--methods")
    r.add_argument("--k", help="restrict widths, e.g. 10 or 10-4")
    r.add_argument("--iters", type=int, help="override max_iters")
    r.add_argument("--sites", help="override subjects per site, e.g. 10,10")
    r.add_argument("--out-dir", default="report")
    r.add_argument("--progress", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HSCPError as exc:  # pragma: no cover - every subclass is mapped above
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


cli_main = main

if __name__ == "__main__":
    sys.exit(main())
