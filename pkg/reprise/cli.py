"""
Command-line entry point: `reprise run | sweep | verify | landscape | trace`.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error,
3 internal error.
"""

import argparse
import sciris as sc
import reprise as rp

__all__ = ["EXIT_OK", "EXIT_FAIL", "EXIT_USAGE", "EXIT_INTERNAL", "make_parser", "main"]

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 3


def _ints(text):
    return rp.KEYS["sweep.k_values"].parse(text)


def _pairs(text):
    try:
        return rp.KEYS["sweep.aug_arms"].parse(text)
    except ValueError as E:
        raise argparse.ArgumentTypeError(f"expected P:Q pairs: {E}") from E


def _add_config_args(parser):
    parser.add_argument("config", nargs="?", default=None, help="config file (default: built-in defaults)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    parser.add_argument("--out", default=None, help="output directory (default: output.dir)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    return


def make_parser():
    parser = argparse.ArgumentParser(prog="reprise", description="Online continual learning with repeated augmented rehearsal")
    parser.add_argument("--version", action="version", version=f"reprise {rp.__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="train on a task stream and write all artifacts")
    _add_config_args(p)

    p = sub.add_parser("sweep", help="rank (K, (P, Q)) settings on a validation stream")
    _add_config_args(p)
    p.add_argument("--k", type=_ints, default=None, help="comma-separated K values")
    p.add_argument("--aug", type=_pairs, default=None, help="comma-separated P:Q pairs")
    p.add_argument("--validation-tasks", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None, help="passes per validation task")
    p.add_argument("--parallel", action="store_true", help="run grid points in a process pool")
    p.add_argument("--keep-going", action="store_true", help="record failing grid points instead of stopping")

    p = sub.add_parser("verify", help="run a verification suite and print a JSON report")
    p.add_argument("kind", choices=rp.VERIFY_KINDS)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dt", type=int, default=None, help="current-task size")
    p.add_argument("--dm", type=int, default=None, help="memory size")
    p.add_argument("--n-past", type=int, default=None, help="past samples seen by the reservoir")
    p.add_argument("--batch", type=int, default=None, help="incoming batch size")
    p.add_argument("--mem-batch", type=int, default=None, help="memory batch size")
    p.add_argument("--t", type=int, default=None, help="reservoir updates before the draw")
    p.add_argument("--group", choices=["flip", "rotation", "trivial"], default=None)
    p.add_argument("--side", type=int, default=None, help="image side length for prop3")
    p.add_argument("--tol", type=float, default=None, help="relative weight tolerance")
    p.add_argument("--m", type=int, default=None, help="reservoir capacity")
    p.add_argument("--n", type=int, default=None, help="items offered to the reservoir")
    p.add_argument("--models", type=int, default=None, help="random models for the gradient check")
    p.add_argument("--fixtures", default=None, help="accuracy-matrix fixture JSON")
    p.add_argument("--json", dest="json_path", default=None, help="also write the report to this file")

    p = sub.add_parser("landscape", help="loss landscape in the plane of w1, w2 and w2ft")
    _add_config_args(p)
    p.add_argument("--w1", default=None, help="task-1 checkpoint or run directory (default: train w1)")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--task1-epochs", type=int, default=None)
    p.add_argument("--parallel", action="store_true", help="evaluate grid rows in a process pool")

    p = sub.add_parser("trace", help="per-task loss-decay ratios of a trace CSV")
    p.add_argument("path", help="trace.csv of a run")
    return parser


def _load(args):
    cfg = rp.load_config(args.config, overrides=args.overrides)
    return cfg


def cmd_run(args):
    cfg = _load(args)
    rp.Run(cfg, out_dir=args.out, verbose=not args.quiet, run=True)
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load(args)
    out_dir = sc.ifelse(args.out, cfg["output.dir"])
    sweep = rp.Sweep(
        cfg,
        k_values=args.k,
        aug_arms=args.aug,
        validation_tasks=args.validation_tasks,
        epochs=args.epochs,
        out_dir=out_dir,
        parallel=args.parallel,
        die=not args.keep_going,
        verbose=not args.quiet,
        run=True,
    )
    for res in sweep.results:
        print(f"{res.rank:>3}  K={res.K:<3} P={res.P} Q={rp.fmt_float(res.Q):<5} A_T={res.A_T:.4f}")
    return EXIT_OK if sweep.best is not None else EXIT_FAIL


def cmd_verify(args):
    options = dict(trials=args.trials, seed=args.seed)
    if args.kind in ["prop1", "prop2", "prop3"]:
        options.update(dt=args.dt, dm=args.dm, n_past=args.n_past, batch=args.batch, mem_batch=args.mem_batch, tol=args.tol)
        if args.kind == "prop3":
            options.update(group=args.group, side=args.side)
        else:
            options.update(t=args.t)
    elif args.kind == "reservoir":
        options.update(m=args.m, n=args.n)
    elif args.kind == "gradients":
        options = dict(models=args.models, seed=args.seed, tol=args.tol)
    elif args.kind == "metrics":
        options = dict(path=args.fixtures, seed=args.seed)
    report = rp.verify(args.kind, **options)
    text = sc.jsonify(report, tostring=True, indent=2)
    print(text)
    if args.json_path:
        sc.savetext(args.json_path, text)
    if report.status == "inconclusive":
        rp.log(f"verify {args.kind}: inconclusive, increase --trials", color="yellow")
    elif not report.passed:
        rp.log(f"verify {args.kind}: failed", color="red")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_landscape(args):
    cfg = _load(args)
    out_dir = sc.ifelse(args.out, cfg["output.dir"])
    rp.Landscape(
        cfg,
        out_dir=out_dir,
        resolution=args.resolution,
        task1_epochs=args.task1_epochs,
        w1=args.w1,
        parallel=args.parallel,
        verbose=not args.quiet,
        run=True,
    )
    return EXIT_OK


def cmd_trace(args):
    summary = rp.summarize_trace(args.path)
    print(f"{'task':>4}  {'incoming':>10}  {'memory':>10}  {'gap':>10}  batches")
    for row in summary:
        print(f"{row.task_id:>4}  {row.incoming:>10.4f}  {row.memory:>10.4f}  {row.gap:>10.4f}  {row.n_batches}")
    return EXIT_OK


COMMANDS = dict(run=cmd_run, sweep=cmd_sweep, verify=cmd_verify, landscape=cmd_landscape, trace=cmd_trace)


def main(argv=None):
    """Parse arguments, dispatch, and map exceptions onto exit codes"""
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as E:
        return EXIT_OK if E.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.cmd](args)
    except rp.ConfigError as E:
        rp.log(f"Configuration error: {E}", color="red")
        return EXIT_USAGE
    except Exception as E:
        rp.log(f"Error: {type(E).__name__}: {E}", color="red")
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
