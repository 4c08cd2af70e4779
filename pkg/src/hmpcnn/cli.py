"""Command-line entry point.

Subcommands: ``generate`` (synthetic dataset), ``train`` (adaptive selection
plus final training), ``eval`` (misclassification on a test set, or
median/IQR aggregation of metric files), ``verify`` (randomised identity
suites), ``bounds`` (weight counts and capacity/rate shapes), and
``reproduce-table2`` (the full synthetic comparison).

Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 empty candidate grid,
4 verification failure.  Every run writes a flat key-value manifest
sufficient to reproduce it.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, datagen, networks, training, verify
from .experiments import Table2Setup, desk_setup, run_table2
from .model import SpecError
from .training import GridEmptyError, SelectionGrid, TrainConfig

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_EMPTY_GRID, EXIT_VERIFY = 0, 1, 2, 3, 4


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k} {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    entries = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(" ")
            entries[key] = value
    return entries


def _base_manifest(args, command: str) -> dict:
    return {
        "command": command,
        "argv": " ".join(sys.argv[1:]) if sys.argv[1:] else "(api)",
        "package_version": __version__,
        "numpy_version": np.__version__,
        "seed": getattr(args, "seed", ""),
    }


def cmd_generate(args) -> int:
    if args.n < 1:
        print("error: --n must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.noise < 0:
        print("error: --noise must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.time()
    ds = datagen.generate(args.n, seed=args.seed, noise_scale=args.noise)
    try:
        datagen.save(ds, args.out)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    man = _base_manifest(args, "generate")
    man.update(n=args.n, noise=args.noise, out=args.out,
               file_bytes=datagen.expected_file_size(args.n, datagen.IMAGE_SIDE, datagen.IMAGE_SIDE),
               provenance=ds.provenance.replace(" ", "_"),
               timing_s=f"{time.time() - t0:.3f}")
    write_manifest(str(args.out) + ".manifest", man)
    print(f"wrote {args.out} ({len(ds)} items)")
    return EXIT_OK


GRIDS = {
    "full": dict(levels=(3, 4), channels=(2, 4, 8), depths=(1, 2, 3)),
    "small": dict(levels=(3, 4), channels=(2, 4), depths=(1,)),
}


def cmd_train(args) -> int:
    try:
        ds = datagen.load(args.data)
    except FileNotFoundError:
        print(f"error: no such dataset: {args.data}", file=sys.stderr)
        return EXIT_IO
    except datagen.FormatError as exc:
        print(f"error: {args.data}: {exc}", file=sys.stderr)
        return EXIT_IO
    t0 = time.time()
    grid = SelectionGrid(classifiers=(args.classifier,), **GRIDS[args.grid])
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                      seed=args.seed, restarts=args.restarts)
    guard = {"strict": True, "off": False, "min-fallback": "min-fallback"}[args.weight_guard]
    try:
        net, reports = training.model_select(grid, ds, cfg, weight_guard=guard)
    except GridEmptyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        report = training.format_selection_report(
            [training.CandidateReport(j, l, n, k, z, networks.param_count(a), admissible=False)
             for j, l, n, k, z, a in grid.candidates(ds.images.shape[1], ds.images.shape[2])])
        print(report, file=sys.stderr)
        return EXIT_EMPTY_GRID
    networks.save_network(args.out, net)
    report_text = training.format_selection_report(reports)
    Path(str(args.out) + ".report").write_text(report_text)
    beta = training.truncation_level(cfg, len(ds))
    man = _base_manifest(args, "train")
    man.update(data=args.data, classifier=args.classifier, grid=args.grid,
               epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
               restarts=args.restarts, weight_guard=args.weight_guard, n=len(ds),
               beta=f"{beta:.6f}", out=args.out, timing_s=f"{time.time() - t0:.3f}")
    write_manifest(str(args.out) + ".manifest", man)
    print(report_text, end="")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.aggregate:
        values = []
        for path in args.aggregate:
            try:
                entries = read_manifest(path)
            except FileNotFoundError:
                print(f"error: no such metrics file: {path}", file=sys.stderr)
                return EXIT_IO
            if "misclassification" not in entries:
                print(f"error: {path} has no misclassification entry", file=sys.stderr)
                return EXIT_IO
            values.append(float(entries["misclassification"]))
        med = float(np.median(values))
        iqr = float(np.percentile(values, 75) - np.percentile(values, 25))
        print(f"median {med:.4f}")
        print(f"iqr {iqr:.4f}")
        return EXIT_OK
    if not args.weights or not args.data:
        print("error: --weights and --data are required (or use --aggregate)", file=sys.stderr)
        return EXIT_USAGE
    try:
        net = networks.load_network(args.weights)
        ds = datagen.load(args.data)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except datagen.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    beta = args.beta
    if beta is None:
        sidecar = Path(str(args.weights) + ".manifest")
        if sidecar.exists() and "beta" in read_manifest(sidecar):
            beta = float(read_manifest(sidecar)["beta"])
        else:
            beta = max(1.0, math.log(max(len(ds), 2)))
    if ds.images.shape[1:] != net.arch.input_dims:
        print(f"error: data is {ds.images.shape[1:]} but the network expects "
              f"{net.arch.input_dims}", file=sys.stderr)
        return EXIT_IO
    err = training.empirical_misclassification(net, beta, ds)
    print(f"misclassification {err:.4f}")
    if args.out:
        write_manifest(args.out, {"misclassification": f"{err:.6f}", "n_test": len(ds),
                                  "beta": f"{beta:.6f}", "weights": args.weights,
                                  "data": args.data})
    return EXIT_OK


def cmd_verify(args) -> int:
    names = args.only if args.only else None
    print(f"params trials={args.trials} seed={args.seed} exhaustive_l={args.exhaustive_l} "
          f"only={','.join(names) if names else '-'} sabotage={args.sabotage or '-'}")
    try:
        results = verify.run_checks(names=names, trials=args.trials, seed=args.seed,
                                    sabotage=args.sabotage, exhaustive_l=args.exhaustive_l)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for res in results:
        print(res.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(r.name for r in failed)} (seed {args.seed})", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _parse_theta(text: str) -> dict:
    """Parse 'l=3,n=2,2,b=2,2' into {'l': [3], 'n': [2,2], 'b': [2,2]}."""
    out: dict[str, list[int]] = {}
    current = None
    for piece in text.split(","):
        if "=" in piece:
            key, _, value = piece.partition("=")
            current = key.strip()
            out[current] = [int(value)]
        else:
            if current is None:
                raise ValueError(f"bad theta spec {text!r}")
            out[current].append(int(piece))
    return out


def cmd_bounds(args) -> int:
    if args.p < 1:
        print("error: smoothness p must satisfy p >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        fields = _parse_theta(args.theta_from)
        l = fields["l"][0]
        n = tuple(fields.get("n", [1] * (l - 1)))
        b = tuple(fields.get("b", [1] * (l - 1)))
        if args.Ln is not None:
            l_n = args.Ln
        else:
            l_n = max(1, math.ceil(args.c1 * args.n ** (4.0 / (2.0 * (2.0 * args.p + 4.0)))))
        t1, t2, t3 = networks.theorem1_params(l, b, n, l_n, args.c2, args.d1, args.d2)
    except (KeyError, ValueError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"L_n {l_n}")
    for name, theta in (("theta1", t1), ("theta2", t2), ("theta3", t3)):
        print(f"W_{name} {networks.param_count(theta)}")
    print(f"vc_shape_theta1 {networks.vc_bound_shape(t1.layers_per_block, args.d1, args.d2):.6g}")
    print(f"vc_shape_theta3 {networks.vc_bound_shape(t3.layers_per_block, args.d1, args.d2):.6g}")
    ns = args.rate_table if args.rate_table else [args.n]
    for nn in ns:
        print(f"rate_n{nn} {networks.rate_curve(nn, args.p):.6g}")
    return EXIT_OK


def cmd_reproduce_table2(args) -> int:
    t0 = time.time()
    kwargs = dict(n=args.n, seeds=args.seeds, test_n=args.test_n,
                  classifiers=tuple(args.classifiers), noise=args.noise,
                  master_seed=args.seed, weight_guard="min-fallback")
    if args.budget == "desk":
        setup = desk_setup(**kwargs)
    else:
        setup = Table2Setup(**kwargs)
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs,
                      batch_size=args.batch_size, seed=args.seed, restarts=args.restarts)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_table2(setup, cfg, log=print)
    table = result.table()
    print(table, end="")
    (out_dir / "table2.txt").write_text(table)
    for (run_idx, j), report in result.reports.items():
        (out_dir / f"selection_run{run_idx}_f{j}.txt").write_text(report)
    for j in setup.classifiers:
        for run_idx, err in enumerate(result.errors[j]):
            write_manifest(out_dir / f"metrics_run{run_idx}_f{j}.txt",
                           {"misclassification": f"{err:.6f}", "n_test": setup.test_n})
    man = _base_manifest(args, "reproduce-table2")
    man.update(budget=args.budget, n=setup.n, seeds=setup.seeds, test_n=setup.test_n,
               classifiers=",".join(map(str, setup.classifiers)),
               levels=",".join(map(str, setup.levels)),
               channels=",".join(map(str, setup.channels)),
               depths=",".join(map(str, setup.depths)),
               epochs=args.epochs, lr=args.lr, noise=setup.noise,
               timing_s=f"{time.time() - t0:.1f}")
    write_manifest(out_dir / "manifest.txt", man)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmpcnn", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic HMPD dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="adaptive selection + final training")
    p.add_argument("--data", required=True)
    p.add_argument("--classifier", type=int, choices=(1, 2, 3, 4), required=True)
    p.add_argument("--grid", choices=tuple(GRIDS), default="small")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--weight-guard", choices=("strict", "off", "min-fallback"),
                   default="strict")
    p.add_argument("--out", default="weights.npz")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained network (or aggregate metrics)")
    p.add_argument("--weights")
    p.add_argument("--data")
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--aggregate", nargs="+", default=None,
                   help="metric files to summarise as median/IQR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the randomised identity suites")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", nargs="+", default=None)
    p.add_argument("--sabotage", default=None,
                   help="inject a fault into the named check (harness self-test)")
    p.add_argument("--exhaustive-l", type=int, default=5)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bounds", help="weight count and capacity/rate shapes")
    p.add_argument("--theta-from", required=True, help="e.g. l=3,n=2,2,b=2,2")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--Ln", type=int, default=None, help="net depth; overrides --c1")
    p.add_argument("--c1", type=float, default=1.0)
    p.add_argument("--c2", type=int, default=8)
    p.add_argument("--d1", type=int, default=31)
    p.add_argument("--d2", type=int, default=31)
    p.add_argument("--rate-table", type=int, nargs="+", default=None)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("reproduce-table2", help="synthetic-data comparison of the classifiers")
    p.add_argument("--budget", choices=("desk", "full"), default="desk")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--test-n", type=int, default=2000)
    p.add_argument("--classifiers", type=int, nargs="+", default=[1, 3, 4])
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--out-dir", default="table2_out")
    p.set_defaults(func=cmd_reproduce_table2)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GridEmptyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY_GRID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
