"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every command
writes its resolved arguments into its output so ``hta rerun`` can repeat
it.  The default output directory comes from ``$HTA_OUT_DIR``.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import data as D
from . import experiments as E
from . import network, plotting
from .optim import Constant, TrainConfig

OUT_ENV = "HTA_OUT_DIR"
DEFAULT_OUT = "hta-out"


class UsageError(Exception):
    pass


def _pair(text: str, cast=float, count: int = 2) -> tuple:
    try:
        vals = tuple(cast(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {count} comma-separated numbers, got {text!r}") from None
    if len(vals) != count:
        raise argparse.ArgumentTypeError(f"expected {count} comma-separated numbers, got {text!r}")
    return vals


def _int_list(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"widths must be positive, got {text!r}")
    return vals


def _positive(cast):
    def parse(text):
        try:
            v = cast(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text!r}")
        return v
    parse.__name__ = cast.__name__
    return parse


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text!r}")
    return v


def _training_flags(p, epochs=380, lr=0.05, restarts=15):
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=_positive(float), default=lr, help="constant step size")
    g.add_argument("--epochs", type=_positive(int), default=epochs, help="total epochs per method")
    g.add_argument("--batch", type=_positive(int), default=128)
    g.add_argument("--seed", type=_nonneg_int, default=0)
    g.add_argument("--restarts", type=_positive(int), default=restarts)
    g.add_argument("--dt", type=_positive(float), default=0.5, help="homotopy increment")
    g.add_argument("--parallel-restarts", type=_positive(int), default=1, metavar="N",
                   help="run restarts on N threads (default sequential)")
    g.add_argument("--budget", choices=E.BUDGETS, default="equal",
                   help="equal: same total SGD steps for both methods; per_phase: every HTA phase gets --epochs")


def _common(p):
    p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hta", description="Homotopy training of fully connected networks.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("approx", help="sin-sum approximation, HTA vs direct training")
    p.add_argument("--dim", type=_positive(int), default=1)
    p.add_argument("--layers", type=int, choices=(1, 2), default=1)
    p.add_argument("--data-seed", type=_nonneg_int, default=0)
    p.add_argument("--domain", type=_pair, default=D.DEFAULT_DOMAIN, metavar="LO,HI")
    _training_flags(p)
    _common(p)

    p = sub.add_parser("vdp", help="Van der Pol surrogate comparison")
    p.add_argument("--mesh", type=_positive(float), default=0.1)
    p.add_argument("--steps", type=_positive(int), default=E.VDP_STEPS)
    p.add_argument("--eval-every", type=_positive(int), default=1000)
    _training_flags(p)
    _common(p)

    p = sub.add_parser("estimate", help="parameter estimation through trained surrogates")
    p.add_argument("--init", type=_pair, default=(11.0, 11.0), metavar="MU,K")
    p.add_argument("--samples", type=_nonneg_int, default=100, help="test sub-grid size (0 = all 961)")
    p.add_argument("--est-steps", type=_positive(int), default=2000)
    p.add_argument("--est-lr", type=_positive(float), default=0.05)
    p.add_argument("--hta-net", default=None, help="saved HTA surrogate (skips training)")
    p.add_argument("--trad-net", default=None, help="saved traditional surrogate (skips training)")
    p.add_argument("--steps", type=_positive(int), default=E.VDP_STEPS)
    _training_flags(p)
    _common(p)

    p = sub.add_parser("grow", help="layer-by-layer structure search on teacher data")
    p.add_argument("--base", type=_int_list, default=(10, 10), metavar="W1,W2")
    p.add_argument("--quantum", type=_positive(int), default=10)
    p.add_argument("--eps-zero", type=_positive(float), default=1e-3)
    p.add_argument("--max-rounds", type=_positive(int), default=20)
    p.add_argument("--teacher", type=_int_list, default=(10, 10), metavar="W1,W2")
    p.add_argument("--dim", type=_positive(int), default=4)
    p.add_argument("--samples", type=_positive(int), default=2000)
    _training_flags(p, epochs=50, restarts=1)
    _common(p)

    p = sub.add_parser("head", help="three-state growth of a 512-to-10 classification head")
    p.add_argument("--w1", type=_positive(int), default=64)
    p.add_argument("--w2", type=_positive(int), default=32)
    p.add_argument("--samples", type=_positive(int), default=2000)
    _training_flags(p, epochs=5, lr=0.01, restarts=1)
    _common(p)

    p = sub.add_parser("data", help="write a grid or ODE dataset")
    kind = p.add_mutually_exclusive_group()
    kind.add_argument("--sparse", action="store_true", help="sparse grid instead of a uniform grid")
    kind.add_argument("--vdp", action="store_true", help="Van der Pol (mu, k) -> y(1) grid")
    p.add_argument("--dim", type=_positive(int), default=1)
    p.add_argument("--level", type=_positive(int), default=6)
    p.add_argument("--points-per-dim", type=_positive(int), default=100)
    p.add_argument("--domain", type=_pair, default=D.DEFAULT_DOMAIN, metavar="LO,HI")
    p.add_argument("--mesh", type=_positive(float), default=0.1)
    p.add_argument("--range", type=_pair, default=(1.0, 10.0), metavar="LO,HI", dest="vdp_range")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    _common(p)

    p = sub.add_parser("report", help="merge metrics.json files into an improvement table")
    p.add_argument("files", nargs="+")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    _common(p)

    p = sub.add_parser("rerun", help="repeat a run from the config stored in its metrics.json")
    p.add_argument("metrics")
    p.add_argument("--out-dir", default=None)
    return parser


# -- helpers -------------------------------------------------------------------


def _out_dir(args) -> Path:
    path = Path(args.out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def _resolved(parser, args) -> dict:
    """Arguments with defaults filled in, plus an argv that reproduces them."""
    values = {k: v for k, v in vars(args).items() if k not in ("out_dir", "func")}
    return {"command": args.command, "args": E._jsonable(values), "argv": _argv(parser, args)}


def _argv(parser, args) -> list:
    sub = parser._subparsers._group_actions[0].choices[args.command]
    out = [args.command]
    for action in sub._actions:
        if action.dest in ("help", "out_dir") or isinstance(action, argparse._HelpAction):
            continue
        value = getattr(args, action.dest)
        if not action.option_strings:
            out += [str(v) for v in value]
        elif isinstance(action, argparse._StoreTrueAction):
            if value:
                out.append(action.option_strings[0])
        else:
            text = ",".join(repr(v) for v in value) if isinstance(value, tuple) else str(value)
            out.append(f"{action.option_strings[-1]}={text}")
    return out


def _train_config(args, **over) -> TrainConfig:
    return TrainConfig(schedule=Constant(args.lr), batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                       restarts=args.restarts, **over)


def _exp_config(args, **over) -> E.ExperimentConfig:
    return E.ExperimentConfig(train=_train_config(args), delta_t=args.dt, budget=args.budget,
                              workers=args.parallel_restarts, **over)


def _write_pair(out: Path, hta, trad, runs, config, plots: bool, extra=None) -> dict:
    doc = E.paired_metrics(hta, trad, config, extra)
    for method, run in runs.items():
        (out / method).mkdir(exist_ok=True)
        run.trace.write_csv(out / method / "loss_trace.csv")
    E.write_json(doc, out / "metrics.json")
    if plots:
        plotting.loss_curves({m: r.trace for m, r in runs.items()}, out / "loss_curves.png", hta.experiment)
        plotting.restart_losses({E.HTA: hta, E.TRADITIONAL: trad}, out / "restart_losses.png", hta.experiment)
    return doc


def _summary(hta, trad) -> str:
    c = E.compare_report([(hta, trad)])[0]
    return f"{hta.experiment}: hta {c['hta']:.6g} traditional {c['traditional']:.6g} roi {100 * c['roi']:.2f}%"


# -- commands --------------------------------------------------------------------


def _validate(args) -> None:
    """Checks argparse cannot express; run before anything is written."""
    if hasattr(args, "dt"):
        try:
            E.HtaSchedule(args.dt)
        except ValueError as exc:
            raise UsageError(f"--dt: {exc}") from None
    if args.command == "estimate" and bool(args.hta_net) != bool(args.trad_net):
        raise UsageError("--hta-net and --trad-net must be given together")
    if args.command == "grow" and len(args.base) != len(args.teacher):
        raise UsageError("--base and --teacher need the same number of hidden layers")
    if args.command == "head" and max(args.w1, args.w2) > 512:
        raise UsageError("--w1 and --w2 must be <= 512")
    if args.command == "data" and not (args.sparse or args.vdp):
        if args.points_per_dim < 2 or args.points_per_dim ** args.dim > D.MAX_GRID_POINTS:
            raise UsageError(f"uniform grid of {args.points_per_dim}^{args.dim} points is not allowed; use --sparse")


def cmd_approx(args, out, config):
    cfg = _exp_config(args, data_seed=args.data_seed, domain=tuple(args.domain))
    fn = E.example1 if args.layers == 1 else E.example2
    hta, trad, runs = fn(args.dim, cfg)
    _write_pair(out, hta, trad, runs, config, not args.no_plots)
    return _summary(hta, trad)


def _train_surrogates(args, out, config, plots=True):
    cfg = _exp_config(args)
    hta, trad, runs = E.vdp_surrogate(cfg, steps=args.steps, mesh=getattr(args, "mesh", 0.1),
                                      eval_every=getattr(args, "eval_every", 1000))
    _write_pair(out, hta, trad, runs, config, plots and not args.no_plots)
    for method, run in runs.items():
        network.save(run.net, out / f"{method}.net")
    with open(out / "test_trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "step", "test_loss"])
        for rep in (hta, trad):
            for step, v in rep.extra["test_trajectory"]:
                w.writerow([rep.method, step, repr(float(v))])
    if plots and not args.no_plots:
        plotting.test_trajectories({r.method: r.extra["test_trajectory"] for r in (hta, trad)},
                                   out / "test_trajectory.png", "vdp")
    return hta, trad, runs


def cmd_vdp(args, out, config):
    hta, trad, _ = _train_surrogates(args, out, config)
    return _summary(hta, trad) + f" at step {args.steps}"


def cmd_estimate(args, out, config):
    if args.hta_net and args.trad_net:
        nets = {E.HTA: network.load(args.hta_net), E.TRADITIONAL: network.load(args.trad_net)}
    else:
        surrogates = out / "surrogates"
        surrogates.mkdir(exist_ok=True)
        _, _, runs = _train_surrogates(args, surrogates, config)
        nets = {m: r.net for m, r in runs.items()}
    test = D.vdp_dataset((11.0, 14.0), (11.0, 14.0)).inputs
    samples = E.sub_grid(test, args.samples) if args.samples else test
    results = {m: E.estimate_all(net, samples, init=args.init, steps=args.est_steps, lr=args.est_lr)
               for m, net in nets.items()}
    with open(out / "estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mu", "k", "mu_est", "k_est"])
        for m, r in results.items():
            for (mu, k), (em, ek) in r.pairs():
                w.writerow([m, repr(mu), repr(k), repr(em), repr(ek)])
    errs = {m: r.err_pe for m, r in results.items()}
    row = E.compare_report([(errs[E.HTA], errs[E.TRADITIONAL])])[0]
    row["experiment"] = "estimate"
    E.write_json({"experiment": "estimate", "config": config, "err_pe": errs, "samples": len(samples),
                  "comparison": row}, out / "metrics.json")
    return f"estimate: err_pe hta {errs[E.HTA]:.4g} traditional {errs[E.TRADITIONAL]:.4g} over {len(samples)} samples"


def cmd_grow(args, out, config):
    ds = E.teacher_dataset(args.teacher, args.dim, args.samples, seed=args.seed)
    opt = _train_config(args, track_full_loss=False)
    res = E.osf_search(ds, base=args.base, quantum=args.quantum, eps_zero=args.eps_zero, epochs=args.epochs,
                       opt=opt, delta_t=args.dt, max_rounds=args.max_rounds)
    E.write_json({"experiment": "grow", "config": config, "structure": res.to_dict()}, out / "metrics.json")
    with open(out / "growth_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "layer", "added", "new_rms", "ref_rms", "accepted", "widths"])
        for i, h in enumerate(res.history):
            w.writerow([i, h.layer, h.added, repr(h.new_rms), repr(h.ref_rms), int(h.accepted),
                        "x".join(map(str, h.widths))])
    return f"grow: widths {','.join(map(str, res.widths))} ({res.stop_reason})"


def cmd_head(args, out, config):
    ds = E.synthetic_features(args.samples, seed=args.seed)
    report, _, trace = E.fc_head_three_state(args.w1, args.w2, ds, _train_config(args).replace(restarts=1), args.dt)
    E.write_json({"experiment": "head", "config": config, "methods": {E.HTA: report.to_dict()}},
                 out / "metrics.json")
    trace.write_csv(out / "loss_trace.csv")
    if not args.no_plots:
        plotting.loss_curves({E.HTA: trace}, out / "loss_curves.png", "head")
    losses = " -> ".join(f"{v:.4g}" for v in report.extra["state_losses"])
    return f"head: state losses {losses}"


def cmd_data(args, out, config):
    if args.vdp:
        ds = D.vdp_dataset(args.vdp_range, args.vdp_range, args.mesh)
    elif args.sparse:
        ds = D.sparse_grid_dataset(args.dim, args.level, tuple(args.domain))
    else:
        ds = D.uniform_grid_dataset(args.dim, args.points_per_dim, tuple(args.domain))
    path = out / f"dataset.{args.format}"
    if args.format == "csv":
        D.save(ds, path)
    else:
        E.write_json({"config": config, "meta": ds.meta, "inputs": ds.inputs, "targets": ds.targets}, path)
    return f"data: {len(ds)} points ({ds.meta['kind']}) -> {path}"


def _load_pair(path) -> tuple:
    doc = json.loads(Path(path).read_text())
    if "methods" in doc and E.TRADITIONAL in doc["methods"]:
        m = doc["methods"]
        return (doc.get("experiment", str(path)), m[E.HTA]["best"]["test_loss"], m[E.TRADITIONAL]["best"]["test_loss"])
    if "comparison" in doc:
        c = doc["comparison"]
        return c.get("experiment", str(path)), c["hta"], c["traditional"]
    raise ValueError(f"{path}: no paired results")


def cmd_report(args, out, config):
    rows = []
    for f in args.files:
        name, h, t = _load_pair(f)
        row = E.compare_report([(h, t)])[0]
        row["experiment"] = name
        row["source"] = str(f)
        rows.append(row)
    if args.format == "csv":
        E.write_rows_csv(rows, out / "report.csv")
    else:
        E.write_json({"config": config, "rows": rows}, out / "report.json")
    if not args.no_plots:
        plotting.roi_bars(rows, out / "roi.png")
    width = max(len(r["experiment"]) for r in rows)
    lines = [f"{'experiment':<{width}}  {'traditional':>12}  {'hta':>12}  {'roi':>8}"]
    lines += [f"{r['experiment']:<{width}}  {r['traditional']:>12.6g}  {r['hta']:>12.6g}  {100 * r['roi']:>7.2f}%"
              for r in rows]
    print("\n".join(lines))
    return f"report: {len(rows)} rows"


COMMANDS = {"approx": cmd_approx, "vdp": cmd_vdp, "estimate": cmd_estimate, "grow": cmd_grow, "head": cmd_head,
            "data": cmd_data, "report": cmd_report}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "rerun":
        try:
            stored = json.loads(Path(args.metrics).read_text())["config"]["argv"]
        except (OSError, KeyError, TypeError, ValueError) as exc:
            print(f"hta: error: cannot read stored config from {args.metrics}: {exc}", file=sys.stderr)
            return 2
        return run(stored + (["--out-dir", args.out_dir] if args.out_dir else []))
    try:
        _validate(args)
        out = _out_dir(args)
        config = _resolved(parser, args)
        line = COMMANDS[args.command](args, out, config)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hta: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        print(f"hta: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    print(line)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
