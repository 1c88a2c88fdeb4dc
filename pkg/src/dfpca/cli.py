"""Command-line driver.

Subcommands: ``fit``, ``predict``, ``simulate``, ``bandwidth`` and
``eig-diag``.  Options may also come from a ``key = value`` config file
(``--config``); flags given on the command line override it.

Exit codes: 0 success, 1 other package error, 2 parse or file error, 3 domain or
grid error, 4 empty smoothing windows or no pairs, 5 block plan error,
6 eigensolver error, 7 singular covariance in scoring, 8 bundle version
mismatch, 64 invalid usage.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

USAGE_EXIT = 64


def _bandwidth_arg(text: str):
    text = str(text).strip()
    if text in ("auto", "match"):
        return text
    try:
        return [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bandwidth must be 'auto' or comma-separated numbers, got {text!r}") from exc


def _grid_points_arg(text: str):
    vals = [int(x) for x in str(text).split(",")]
    return vals[0] if len(vals) == 1 else vals


def _add_fit_options(p: argparse.ArgumentParser, grid_file: bool = True) -> None:
    g = p.add_argument_group("fit options")
    g.add_argument("--grid-points", type=_grid_points_arg, help="nodes per axis (one value or comma list)")
    g.add_argument("--grid-kind", choices=["regular", "midpoints"], default="regular")
    if grid_file:
        g.add_argument("--grid", help="grid file (axes and optional mask); overrides --grid-points")
    g.add_argument("--h-mean", type=_bandwidth_arg, default="auto")
    g.add_argument("--h-cov", type=_bandwidth_arg, default="match", help="'match' reuses the mean bandwidth")
    g.add_argument("--h-diag", type=_bandwidth_arg, default="match")
    g.add_argument("--bandwidth-multiplier", type=float, default=1.0)
    g.add_argument("--cv-budget", type=int, default=20)
    g.add_argument("--fve", type=float, default=0.95)
    g.add_argument("--l-max", type=int, default=99)
    g.add_argument("--eig", choices=["dense", "randomized"], default="dense")
    g.add_argument("--q", type=int, default=None, help="sketch size of the randomized eigensolver")
    g.add_argument("--blocks", type=int, default=None, help="blocks per axis for the smoothing step")
    g.add_argument("--score-method", choices=["auto", "pace", "integration"], default="auto")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file supplying defaults for any option")
    common.add_argument("--threads", type=int, default=1, help="maximum worker threads")
    common.add_argument("--seed", type=int, default=0, help="master seed")
    parser = argparse.ArgumentParser(prog="dfpca", description="Multi-dimensional functional principal component analysis")
    sub = parser.add_subparsers(dest="command", required=True)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("fit", help="fit a model and write the bundle")
    p.add_argument("--input", required=True, help="long-format observation file")
    p.add_argument("--out", required=True, help="output bundle directory")
    _add_fit_options(p)

    p = sub.add_parser("predict", help="score samples against a saved model and reconstruct")
    p.add_argument("--model", required=True, help="model bundle directory")
    p.add_argument("--observed", help="long-format observations used to score each sample")
    p.add_argument("--query", help="long-format query file; a value column, if present, is the truth")
    p.add_argument("--holdout", help="long-format data for leave-one-location-out prediction error")
    p.add_argument("--refit", action="store_true", help="refit the model for every held-out location")
    p.add_argument("--out", required=True, help="output file")
    _add_fit_options(p)

    p = sub.add_parser("simulate", help="generate simulated data and optional replicate summaries")
    p.add_argument("--model", dest="sim_model", choices=["sim1", "sim2"], default="sim1")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--points", type=int, default=None, help="design size per curve (sim1) or per axis (sim2)")
    p.add_argument("--grid", dest="sim_grid", type=int, default=None, help="nodes per axis (sim2)")
    p.add_argument("--random-design", action="store_true")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    _add_fit_options(p, grid_file=False)

    p = sub.add_parser("bandwidth", help="cross-validated bandwidth search; writes the optimizer trace")
    p.add_argument("--input", required=True)
    p.add_argument("--target", choices=["mean", "covariance", "diag_plus_noise"], default="mean")
    p.add_argument("--scheme", choices=["auto", "loo", "binned"], default="auto")
    p.add_argument("--budget", type=int, default=30)
    p.add_argument("--h0", type=_bandwidth_arg, default=None)
    p.add_argument("--grid-points", type=_grid_points_arg)
    p.add_argument("--out", required=True, help="trace file")

    p = sub.add_parser("eig-diag", help="residuals of the randomized eigensolver")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--compare-dense", action="store_true")
    _add_fit_options(p)
    return parser


def read_config(path: str) -> dict:
    """``key = value`` pairs (an optional ``[section]`` header is ignored); keys use dashes or underscores."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(interpolation=None)
    if not text.lstrip().startswith("["):
        text = "[dfpca]\n" + text
    cp.read_string(text, source=path)
    out = {}
    for section in cp.sections():
        for k, v in cp.items(section):
            out[k.replace("-", "_")] = v
    return out


def _parse(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    from dfpca.errors import ParseError

    try:
        cfg = read_config(args.config)
    except (OSError, configparser.Error) as exc:
        raise ParseError(f"{args.config}:1: {exc}") from exc
    # re-parse so explicit flags win over the file
    sub = parser._subparsers._group_actions[0].choices[args.command]
    converters = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in cfg.items():
        key = {"model": "sim_model"}.get(k, k) if args.command == "simulate" else k
        key = {"eig_method": "eig", "blocks_per_axis": "blocks"}.get(key, key)
        if key not in converters:
            raise ParseError(f"{args.config}:1: unknown option {k!r}")
        act = converters[key]
        if act.nargs == 0:
            val = v.strip().lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            val = act.type(v)
        else:
            val = v
        defaults[key] = val
    defaults.pop("config", None)
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _fit_config(args: argparse.Namespace):
    from dfpca.pipeline import FitConfig

    return FitConfig(
        grid_points=args.grid_points,
        grid_kind=args.grid_kind,
        h_mean=args.h_mean,
        h_cov=args.h_cov,
        h_diag=args.h_diag,
        bandwidth_multiplier=args.bandwidth_multiplier,
        cv_budget=args.cv_budget,
        fve=args.fve,
        L_max=args.l_max,
        eig_method=args.eig,
        q=args.q,
        seed=args.seed,
        blocks_per_axis=args.blocks,
        score_method=args.score_method,
        workers=args.threads,
    )


def _grid(args, dataset):
    from dfpca.fileio import read_grid

    return read_grid(args.grid) if getattr(args, "grid", None) else None


def cmd_fit(args) -> int:
    from dfpca.fileio import read_long, save_model, write_json
    from dfpca.pipeline import fit

    ds = read_long(args.input)
    config = _fit_config(args)
    res = fit(ds, config, grid=_grid(args, ds))
    resolved = config.to_dict()
    resolved["resolved_bandwidths"] = res.bandwidths
    resolved["input"] = os.path.basename(args.input)
    save_model(res.model, args.out, resolved)
    report = {k: v for k, v in res.report.items() if k != "timings"}
    write_json(report, Path(args.out) / "report.json")
    # wall-clock times differ between runs, so they live outside the deterministic files
    write_json(res.timings, Path(args.out) / "timings.json")
    _print_report(res.report)
    return 0


def _print_report(report: dict) -> None:
    print(f"components: {report['L']}")
    print("component,eigenvalue,fve")
    for k, (lam, f) in enumerate(zip(report["eigenvalues"], report["fve"]), start=1):
        print(f"{k},{lam:.6g},{f:.4f}")
    print(f"sigma2: {report['sigma2']:.6g}")
    print("timings: " + ", ".join(f"{k}={v:.3f}s" for k, v in report["timings"].items()))


def cmd_predict(args) -> int:
    from dfpca.fileio import load_model, read_long
    from dfpca.scores import holdout_prediction_error, pace_scores, reconstruct

    model = load_model(args.model)
    if args.holdout:
        ds = read_long(args.holdout)
        res = holdout_prediction_error(ds, config=_fit_config(args), refit=args.refit, model=model)
        Path(args.out).write_text(res.table())
        print(res.table(), end="")
        return 0
    if not args.query:
        from dfpca.errors import ParseError

        raise ParseError("predict needs --query or --holdout")
    query = _read_query(args.query)
    observed = read_long(args.observed) if args.observed else None
    cache = {}
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        names = query["axes"]
        has_truth = query["values"] is not None
        wr.writerow(["sample_id"] + names + ["prediction"] + (["y", "squared_error"] if has_truth else []))
        for row, (sid, x) in enumerate(zip(query["ids"], query["coords"])):
            if sid not in cache:
                if observed is not None and sid in observed.ids:
                    c, v = observed.sample(observed.ids.index(sid))
                    cache[sid] = pace_scores(c, v, model)
                elif sid in model.ids:
                    cache[sid] = model.scores[model.ids.index(sid)]
                else:
                    cache[sid] = np.zeros(model.L)
            pred = float(reconstruct(model, at=x[None], scores=cache[sid])[0])
            out = [sid] + ["%.17g" % t for t in x] + ["%.17g" % pred]
            if has_truth:
                y = query["values"][row]
                out += ["%.17g" % y, "%.17g" % ((y - pred) ** 2)]
            wr.writerow(out)
    return 0


def _read_query(path: str) -> dict:
    """Query file: ``sample_id, t_1..t_d[, y]``; the header decides whether values are present."""
    from dfpca.errors import ParseError

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}:1: empty file, expected a header row")
    header = [h.strip() for h in rows[0]]
    has_y = header[-1].lower() in ("y", "value")
    axes = header[1:-1] if has_y else header[1:]
    ids, coords, values = [], [], []
    for lineno, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        if len(r) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, found {len(r)}")
        try:
            nums = [float(x) for x in r[1:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        ids.append(r[0].strip())
        coords.append(nums[: len(axes)])
        if has_y:
            values.append(nums[-1])
    return {
        "axes": axes,
        "ids": ids,
        "coords": np.array(coords, dtype=float).reshape(len(ids), len(axes)),
        "values": np.array(values) if has_y else None,
    }


def cmd_simulate(args) -> int:
    from dfpca.fileio import save_model, write_json, write_long
    from dfpca.pipeline import fit
    from dfpca.scores import reconstruct
    from dfpca.simulate import SimSpec, generate, ise, mise, summary_table

    points = args.sim_grid if args.sim_grid is not None else args.points
    spec = SimSpec(args.sim_model, n=args.n, points=points, random_design=args.random_design, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(spec.metadata(), out / "metadata.json")
    rows = {"time": [], "MISE": []}
    if args.sim_model == "sim2":
        rows.update({f"ISE_phi{k}": [] for k in range(1, 5)})
    for r in range(args.runs):
        ds, truth = generate(spec, replicate=r if args.runs > 1 else None)
        suffix = f"_{r:03d}" if args.runs > 1 else ""
        write_long(ds, out / f"data{suffix}.csv")
        _write_truth(ds, truth, out / f"truth{suffix}.csv")
        if args.runs > 1:
            config = _fit_config(args)
            grid = spec.design_grid() if args.sim_model == "sim2" else None
            t0 = time.perf_counter()
            res = fit(ds, config, grid=grid)
            rows["time"].append(time.perf_counter() - t0)
            m = res.model
            est = np.array([reconstruct(m, i) for i in range(ds.n)])
            rows["MISE"].append(mise(est, truth.curves_on(m.grid), m.grid))
            if args.sim_model == "sim2":
                phi = truth.eigenfunctions_on(m.grid)
                for k in range(4):
                    val = ise(m.eig.eigenfunctions[k], phi[k], m.grid) if k < m.L else float("nan")
                    rows[f"ISE_phi{k + 1}"].append(val)
    if args.runs > 1:
        table = summary_table(rows)
        (out / "summary.csv").write_text(table)
        print(table, end="")
    return 0


def _write_truth(ds, truth, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["sample_id"] + [f"A_{k + 1}" for k in range(truth.scores.shape[1])])
        for sid, a in zip(ds.ids, truth.scores):
            wr.writerow([sid] + ["%.17g" % x for x in a])


def cmd_bandwidth(args) -> int:
    from dfpca.bandwidth import CvObjective, optimize_bandwidth
    from dfpca.core import Bandwidth, EvaluationGrid
    from dfpca.fileio import read_long

    ds = read_long(args.input)
    grid = None
    if args.grid_points is not None or args.scheme == "binned":
        box = ds.bounding_box
        grid = EvaluationGrid.regular(box[:, 0], box[:, 1], args.grid_points or 51)
    obj = CvObjective(args.target, ds, grid, args.scheme)
    h0 = None if args.h0 in (None, "auto") else Bandwidth(tuple(np.broadcast_to(args.h0, (ds.d,))))
    res = optimize_bandwidth(obj, h0=h0, budget=args.budget, seed=args.seed)
    Path(args.out).write_text(res.trace_csv())
    print("bandwidth: " + ",".join("%.6g" % x for x in res.bandwidth.values))
    print(f"cv: {res.value:.6g}")
    return 0


def cmd_eig_diag(args) -> int:
    from dfpca.eigen import dense_eig, eigen_residuals, randomized_eig
    from dfpca.fileio import read_long
    from dfpca.pipeline import fit

    ds = read_long(args.input)
    config = _fit_config(args)
    res = fit(ds, config, grid=_grid(args, ds), keep_covariance=True)
    S, grid = res.covariance, res.model.grid
    L = min(args.l_max, S.dim)
    eig = randomized_eig(S, args.q, L, grid, seed=args.seed)
    resid = eigen_residuals(S, eig)
    lam_t = eig.eigenvalues / grid.cell_volume
    cols = ["component", "eigenvalue", "residual", "relative_residual"]
    dense = None
    if args.compare_dense:
        dense = dense_eig(S if S.is_dense else type(S)(S.dim, S.node_index, dense=S.to_dense()), L, grid)
        cols.append("dense_eigenvalue")
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for k in range(eig.L):
            row = [k + 1, "%.17g" % eig.eigenvalues[k], "%.17g" % resid[k], "%.17g" % (resid[k] / lam_t[k])]
            if dense is not None:
                row.append("%.17g" % dense.eigenvalues[k] if k < dense.L else "nan")
            wr.writerow(row)
    print(f"max relative residual (first {min(eig.L, 5)}): {np.max(resid[:5] / lam_t[:5]):.3g}" if eig.L else "no components")
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "bandwidth": cmd_bandwidth,
    "eig-diag": cmd_eig_diag,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    from dfpca.errors import DfpcaError

    try:
        args = _parse(argv)
    except SystemExit as exc:
        return USAGE_EXIT if exc.code not in (0, None) else 0
    except DfpcaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    try:
        return COMMANDS[args.command](args)
    except DfpcaError as exc:
        stage = getattr(exc, "stage", None)
        where = f" [{stage}]" if stage else ""
        print(f"error{where}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
