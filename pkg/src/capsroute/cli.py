"""Command-line interface: verify, bench, train, gradcheck.

Exit codes: 0 success, 1 verification/training failure, 2 usage error
(argparse), 3 I/O error (missing or malformed files).  Every command
echoes its full effective configuration, including the seed, to stderr
before doing any work; machine-readable results go to stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, capsnet, data, train, verify

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _echo_config(command: str, options: dict) -> None:
    print(f"config: {json.dumps({'command': command, **options}, sort_keys=True)}", file=sys.stderr)


def _ensure_dir(path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capsroute",
        description="Capsule routing by pairwise agreement: verification, benchmarks, training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser("verify", help="run the self-verification suites, emit a JSON report")
    p_verify.add_argument("--seed", type=int, default=0, help="seed for the generated instances")
    p_verify.set_defaults(func=cmd_verify)

    p_bench = sub.add_parser("bench", help="time the routing algorithms, write CSV/JSON records")
    p_bench.add_argument("--algo", choices=bench.ALGORITHMS, default=None,
                         help="benchmark only this algorithm (default: all)")
    p_bench.add_argument("--n", type=int, default=None,
                         help="single input-capsule count (default: sweep "
                              + ",".join(str(n) for n in bench.DEFAULT_GRID))
    p_bench.add_argument("--m", type=int, default=10, help="output capsules")
    p_bench.add_argument("--k", type=int, default=16, help="features per capsule")
    p_bench.add_argument("--iters", type=int, default=3, help="dynamic-routing iterations")
    p_bench.add_argument("--repeats", type=int, default=10, help="timed repetitions per point")
    p_bench.add_argument("--seed", type=int, default=0, help="seed for the benchmark inputs")
    p_bench.add_argument("--threads", type=int, default=1,
                         help="worker threads routing independent instances")
    p_bench.add_argument("--out", default="bench_out", help="output directory (created if missing)")
    p_bench.set_defaults(func=cmd_bench)

    p_train = sub.add_parser("train", help="train the capsule classifier on an IDX dataset")
    p_train.add_argument("--data", required=True, help="directory with the IDX files")
    p_train.add_argument("--train-size", type=int, default=2000, help="training samples to use")
    p_train.add_argument("--test-size", type=int, default=1000, help="test samples to use")
    p_train.add_argument("--epochs", type=int, default=20)
    p_train.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
    p_train.add_argument("--batch", type=int, default=128, help="minibatch size")
    p_train.add_argument("--algo", choices=("fm", "dynamic"), default="fm")
    p_train.add_argument("--loss", choices=("margin", "softmax"), default="margin")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--iters", type=int, default=3, help="dynamic-routing iterations")
    p_train.add_argument("--out", default="train_out", help="output directory (created if missing)")
    p_train.set_defaults(func=cmd_train)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p_grad.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(func=cmd_gradcheck)

    return parser


def cmd_verify(args) -> int:
    _echo_config("verify", {"seed": args.seed})
    results = verify.run_all(seed=args.seed)
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        worst = "-" if res.worst_error is None else f"{res.worst_error:.3e}"
        print(f"[{status}] {res.name}: worst error {worst} ({res.detail})", file=sys.stderr)
    print(json.dumps(verify.report_json(results, args.seed), indent=2))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def cmd_bench(args) -> int:
    algorithms = (args.algo,) if args.algo else bench.ALGORITHMS
    grid = (args.n,) if args.n is not None else bench.DEFAULT_GRID
    options = {
        "algorithms": list(algorithms), "grid": list(grid), "m": args.m, "k": args.k,
        "iters": args.iters, "repeats": args.repeats, "seed": args.seed,
        "threads": args.threads, "out": args.out,
    }
    _echo_config("bench", options)
    out_dir = Path(args.out)
    try:
        _ensure_dir(out_dir)
    except OSError as exc:
        print(f"error: cannot create output directory {out_dir}: {exc}", file=sys.stderr)
        return EXIT_IO
    records = []
    try:
        for n in grid:
            for algorithm in algorithms:
                rec = bench.run_bench(
                    algorithm, n, m=args.m, k=args.k, iters=args.iters,
                    repeats=args.repeats, seed=args.seed, threads=args.threads,
                )
                records.append(rec)
                print(
                    f"{rec.algorithm:>10} n={rec.n:<5} median {rec.median_ns / 1e6:9.3f} ms  "
                    f"iqr {rec.iqr_ns / 1e6:.3f} ms",
                    file=sys.stderr,
                )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        bench.write_csv(records, out_dir / "bench.csv")
        bench.write_json(records, out_dir / "bench.json", config=options)
    except OSError as exc:
        print(f"error: cannot write benchmark results: {exc}", file=sys.stderr)
        return EXIT_IO
    for violation in bench.check_monotone(records):
        print(f"warning: {violation}", file=sys.stderr)
    print(f"wrote {out_dir / 'bench.csv'} and {out_dir / 'bench.json'} ({len(records)} records)")
    return EXIT_OK


def _resolve_idx(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"missing {name}[.gz] under {directory}")


def _load_mnist_dir(directory: Path) -> tuple[data.LabeledImages, data.LabeledImages]:
    train_set = data.load_idx(
        _resolve_idx(directory, MNIST_FILES["train_images"]),
        _resolve_idx(directory, MNIST_FILES["train_labels"]),
    )
    test_set = data.load_idx(
        _resolve_idx(directory, MNIST_FILES["test_images"]),
        _resolve_idx(directory, MNIST_FILES["test_labels"]),
    )
    return train_set, test_set


def cmd_train(args) -> int:
    options = {
        "data": args.data, "train_size": args.train_size, "test_size": args.test_size,
        "epochs": args.epochs, "lr": args.lr, "batch": args.batch, "algo": args.algo,
        "loss": args.loss, "seed": args.seed, "iters": args.iters, "out": args.out,
    }
    _echo_config("train", options)
    try:
        train_set, test_set = _load_mnist_dir(Path(args.data))
        train_set = train_set.subset(args.train_size)
        test_set = test_set.subset(args.test_size)
    except (OSError, data.IdxFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    out_dir = Path(args.out)
    try:
        _ensure_dir(out_dir)
    except OSError as exc:
        print(f"error: cannot create output directory {out_dir}: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        config = train.TrainConfig(
            algo=args.algo, loss=args.loss, epochs=args.epochs, learning_rate=args.lr,
            batch_size=args.batch, seed=args.seed, iterations=args.iters,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    model = train.CapsuleClassifier.create(
        train_set.images.shape[1] * train_set.images.shape[2], config,
        np.random.default_rng(config.seed),
    )

    def report(stats: train.EpochStats) -> None:
        print(
            f"epoch {stats.epoch:>3}: train loss {stats.train_loss:.4f}  "
            f"train acc {stats.train_accuracy:.4f}  test acc {stats.test_accuracy:.4f}  "
            f"({stats.seconds:.2f}s)",
            file=sys.stderr,
        )

    try:
        history = train.train_classifier(model, train_set, test_set, on_epoch=report)
    except train.TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        train.write_metrics_csv(out_dir / "metrics.csv", history)
        model.save(out_dir / "checkpoint.caps")
    except OSError as exc:
        print(f"error: cannot write training outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    final = history[-1]
    print(
        f"final test accuracy {final.test_accuracy:.4f} after {final.epoch} epochs; "
        f"wrote {out_dir / 'metrics.csv'} and {out_dir / 'checkpoint.caps'}"
    )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _echo_config("gradcheck", {"h": args.h, "seed": args.seed})
    reports = verify.gradient_reports(seed=args.seed, h=args.h)
    width = max(len(r.op) for r in reports)
    all_ok = True
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        all_ok = all_ok and rep.passed
        print(f"[{status}] {rep.op:<{width}}  max rel error {rep.max_rel_error:.3e}  (h={rep.step:g})")
    print("activation-gradient magnitude, identical unit votes:")
    for row in verify.jacobian_scaling_rows():
        ok = row["scaled_ok"] and row["unscaled_grows"]
        all_ok = all_ok and ok
        status = "PASS" if ok else "FAIL"
        print(
            f"[{status}] n={row['n']:<3} scaled max {row['scaled_max']:.6f} (<= 1)  "
            f"unscaled max {row['unscaled_max']:.6f} (grows with n)"
        )
    return EXIT_OK if all_ok else EXIT_FAILURE


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
