"""Command-line entry point: ``noprop {train,eval,predict,check,bench-mem,report}``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

from . import rng as rngmod
from .bundle import build_bundle
from .checkpoint import load_checkpoint, save_checkpoint
from .config import METHODS, coerce, default_config, load_config_file
from .data import DatasetHandle, load_mnist, synth_blobs
from .errors import ConfigError, NoPropError
from .inference import evaluate, predict
from .metrics import MetricsWriter, read_metrics
from .trainers import train


def load_datasets(cfg) -> tuple[DatasetHandle, DatasetHandle]:
    if cfg.dataset == "blobs":
        kw = dict(n_per_class=cfg.blobs_n, m=cfg.blobs_classes, separation=cfg.blobs_sep,
                  std=cfg.blobs_std, seed=cfg.seed)
        return synth_blobs(split="train", **kw), synth_blobs(split="test", **kw)
    if cfg.dataset == "mnist":
        train_set, test_set = load_mnist(cfg.data_dir)
        if cfg.train_limit:
            train_set = train_set.subset(cfg.train_limit)
        return train_set, test_set
    raise ConfigError(f"unknown dataset {cfg.dataset!r} (expected mnist or blobs)")


def _override(values: dict, key: str, text: str) -> None:
    values[key] = coerce(key, text)


def config_from_args(args):
    values = {}
    method = args.method
    if args.config:
        values.update(load_config_file(args.config))
        method = method or values.get("method")
    method = method or "dt"
    for key in ("dataset", "seed", "epochs", "workers", "data_dir"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.parallel:
        values["parallel"] = True
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        _override(values, k.strip(), v)
    values.pop("method", None)
    return default_config(method, **values)


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    train_set, test_set = load_datasets(cfg)
    bundle = build_bundle(cfg, train_set.input_shape, train_set.m, train_set)
    with MetricsWriter(args.metrics) as metrics:
        train(bundle, train_set, test_set, metrics)
        last = [r for r in metrics.rows if r.block == "all"]
    if args.out:
        save_checkpoint(bundle, args.out)
    if last:
        r = last[-1]
        fmt = lambda v: "" if v is None else f"{v:.4f}"
        print(f"method={cfg.method} epochs={cfg.epochs} train_acc={fmt(r.train_acc)} test_acc={fmt(r.test_acc)}")
    return 0


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    cfg = bundle.config
    if args.dataset or args.data_dir:
        cfg = dataclasses.replace(cfg, dataset=args.dataset or cfg.dataset, data_dir=args.data_dir or cfg.data_dir)
    train_set, test_set = load_datasets(cfg)
    split = test_set if args.split == "test" else train_set
    acc = evaluate(bundle, split, rngmod.stream(args.seed, "eval-cli"), steps=args.steps)
    print(f"split,accuracy\n{args.split},{acc:.6f}")
    return 0


def read_image(path) -> np.ndarray:
    """An .npy array or an image file readable by matplotlib, scaled into [0, 1]."""
    if path.endswith(".npy"):
        arr = np.load(path)
    else:
        import matplotlib.image as mpimg
        arr = mpimg.imread(path)
    arr = np.asarray(arr)
    if arr.dtype == np.uint8 or arr.max() > 1.0:
        arr = arr.astype(np.float64) / 255.0
    return arr


def cmd_predict(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    x = read_image(args.image)
    shape = tuple(bundle.block_cfg.input_shape)
    if x.ndim == 3 and x.shape[-1] in (3, 4) and shape[-1] == 1:
        x = x[..., :3].mean(axis=-1)  # colour file for a greyscale model
    if x.shape != shape:
        try:
            x = x.reshape(shape)
        except ValueError:
            raise ConfigError(f"image shape {x.shape} does not match model input {shape}") from None
    pred = predict(bundle, x[None], rngmod.stream(args.seed, "predict-cli"), steps=args.steps)
    print(int(pred[0]))
    return 0


def cmd_check(args) -> int:
    from .oracles import run_checks
    results = run_checks()
    return 0 if all(r.passed for r in results) else 1


def bench_mem(Ts=(2, 10), seed: int = 0) -> list[dict]:
    """Peak live graph nodes over one short training epoch, per method and T."""
    data = synth_blobs(32, 2, seed=seed)
    out = []
    for method in ("dt", "backprop"):
        for T in Ts:
            cfg = default_config(method, T=T, epochs=1, batch_size=32, hidden=16, seed=seed,
                                 eval_train=False, eval_test=False)
            bundle = build_bundle(cfg, data.input_shape, data.m, data)
            w = MetricsWriter()
            train(bundle, data, None, w)
            peak = max(r.peak_nodes for r in w.rows)
            out.append({"method": method, "T": T, "peak_nodes": peak})
    return out


def cmd_bench_mem(args) -> int:
    results = bench_mem(seed=args.seed)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["method", "T", "peak_nodes"])
    for r in results:
        writer.writerow([r["method"], r["T"], r["peak_nodes"]])
    peaks = {(r["method"], r["T"]): r["peak_nodes"] for r in results}
    for method in ("dt", "backprop"):
        writer.writerow([f"{method}_ratio_T10_over_T2", "", f"{peaks[(method, 10)] / peaks[(method, 2)]:.3f}"])
    if args.plot:
        from .plotting import plot_bench_mem
        plot_bench_mem(results, args.plot)
    return 0


def cmd_report(args) -> int:
    from .plotting import plot_accuracy_vs_time, plot_losses
    os.makedirs(args.out_dir, exist_ok=True)
    runs = {}
    for path in args.metrics:
        label = os.path.splitext(os.path.basename(path))[0]
        runs[label] = read_metrics(path)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["run", "epochs", "final_train_acc", "final_test_acc", "wall_seconds", "figure"])
    for label, rows in runs.items():
        fig = os.path.join(args.out_dir, f"{label}_losses.png")
        plot_losses(rows, fig, title=label)
        epochs = [r for r in rows if r["block"] == "all"]
        last = epochs[-1] if epochs else {}
        writer.writerow([label, len(epochs), last.get("train_acc", ""), last.get("test_acc", ""),
                         last.get("wall_seconds", ""), fig])
    acc_fig = os.path.join(args.out_dir, "accuracy_vs_time.png")
    plot_accuracy_vs_time(runs, acc_fig)
    writer.writerow(["all", "", "", "", "", acc_fig])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noprop", description="Block-local diffusion and flow training.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and optionally save a checkpoint")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--dataset", choices=("mnist", "blobs"))
    t.add_argument("--config", help="file of 'key = value' lines; flags override it")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--metrics", help="metrics CSV path (timing goes to <name>.timing.csv)")
    t.add_argument("--parallel", action="store_true", help="train dt blocks in worker processes")
    t.add_argument("--workers", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--data-dir", dest="data_dir")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", choices=("mnist", "blobs"))
    e.add_argument("--data-dir", dest="data_dir")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--steps", type=int, default=0, help="inference steps (0: method default)")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="class of a single image")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--image", required=True, help=".npy array or image file")
    pr.add_argument("--steps", type=int, default=0)
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_predict)

    c = sub.add_parser("check", help="run the numerical oracle suite")
    c.set_defaults(func=cmd_check)

    b = sub.add_parser("bench-mem", help="peak live graph nodes for dt vs backprop at T=2 and T=10")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--plot", help="also render a bar chart to this path")
    b.set_defaults(func=cmd_bench_mem)

    r = sub.add_parser("report", help="summarise metrics CSVs and render figures")
    r.add_argument("--metrics", nargs="+", required=True)
    r.add_argument("--out-dir", default="figures")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NoPropError, OSError, ValueError, KeyError) as exc:
        print(f"noprop: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
