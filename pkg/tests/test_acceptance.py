"""Acceptance criteria, one verdict line each at the stated tolerances.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the verdict lines
are also collected in the terminal summary.  The MNIST criterion is marked
``slow`` and needs the IDX files (see README).
"""
import os
import time

import numpy as np
import pytest

from noprop import rng as rngmod
from noprop.autodiff import Graph
from noprop.bundle import build_bundle
from noprop.cli import bench_mem, main
from noprop.config import default_config
from noprop.data import load_mnist, synth_blobs
from noprop.inference import euler_integrate, evaluate
from noprop.oracles import run_checks
from noprop.trainers import fm_loss, parallel_train_dt, train, train_noprop_dt


def _verdict(ok):
    return "PASS" if ok else "FAIL"


def _fit(method, data, test=None, **kw):
    cfg = default_config(method, eval_train=False, eval_test=False, **kw)
    bundle = build_bundle(cfg, data.input_shape, data.m, data)
    t0 = time.perf_counter()
    train(bundle, data, test)
    return bundle, time.perf_counter() - t0


def test_criterion_1_oracle_suite(acceptance):
    t0 = time.perf_counter()
    results = run_checks(verbose=None)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    ok = not failed and elapsed < 300
    acceptance("1", _verdict(ok), f"{len(results) - len(failed)}/{len(results)} oracle checks pass in {elapsed:.1f}s"
               + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert not failed
    assert elapsed < 300


def test_criterion_2_synthetic_end_to_end(acceptance):
    data = synth_blobs(100, 2, seed=0)
    runs = {"dt": (dict(T=5, epochs=30), 1.0), "ct": (dict(epochs=100), 0.95),
            "fm": (dict(epochs=100), 0.95), "backprop": (dict(epochs=30), 1.0)}
    parts, ok = [], True
    for method, (kw, need) in runs.items():
        bundle, secs = _fit(method, data, **kw)
        acc = evaluate(bundle, data, rngmod.stream(0, "acceptance", method))
        good = acc >= need and secs < 120
        ok &= good
        parts.append(f"{method} train acc {acc:.4f} (need {need:.2f}) in {secs:.1f}s")
    acceptance("2", _verdict(ok), "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_criterion_3_mnist(acceptance, mnist_dir):
    train_set, test_set = load_mnist(mnist_dir)
    dt, dt_secs = _fit("dt", train_set, dataset="mnist", data_dir=mnist_dir)
    dt_acc = evaluate(dt, test_set, rngmod.stream(0, "acceptance", "mnist", "dt"))
    bp, bp_secs = _fit("backprop", train_set, dataset="mnist", data_dir=mnist_dir)
    bp_acc = evaluate(bp, test_set, rngmod.stream(0, "acceptance", "mnist", "backprop"))
    ok = dt_acc >= 0.98 and dt_secs <= 3600 and abs(bp_acc - dt_acc) <= 0.01
    acceptance("3", _verdict(ok), f"dt test acc {100 * dt_acc:.2f}% in {dt_secs / 60:.1f} min (need >= 98.00%, "
               f"<= 60 min); backprop {100 * bp_acc:.2f}% in {bp_secs / 60:.1f} min, "
               f"gap {100 * abs(bp_acc - dt_acc):.2f} points (need <= 1.00)")
    assert dt_acc >= 0.98
    assert dt_secs <= 3600
    assert abs(bp_acc - dt_acc) <= 0.01


def test_criterion_4_memory(acceptance):
    peaks = {(r["method"], r["T"]): r["peak_nodes"] for r in bench_mem()}
    dt_ratio = peaks[("dt", 10)] / peaks[("dt", 2)]
    bp_ratio = peaks[("backprop", 10)] / peaks[("backprop", 2)]
    ok = abs(dt_ratio - 1) <= 0.10 and bp_ratio >= 4
    acceptance("4", _verdict(ok), f"dt peak nodes T=2 {peaks[('dt', 2)]}, T=10 {peaks[('dt', 10)]} "
               f"(ratio {dt_ratio:.3f}, need within 10%); backprop {peaks[('backprop', 2)]} -> "
               f"{peaks[('backprop', 10)]} (ratio {bp_ratio:.2f}, need >= 4)")
    assert ok


def _par_bundles(data, **kw):
    cfg = default_config("dt", T=4, eval_train=False, eval_test=False, **kw)
    return [build_bundle(cfg, data.input_shape, data.m, data) for _ in range(2)]


def test_criterion_5_parallel_equals_sequential(acceptance):
    data = synth_blobs(100, 2, seed=0)
    seq, par = _par_bundles(data, epochs=3)
    train_noprop_dt(seq, data)
    parallel_train_dt(par, data, workers=4)
    worst = 0.0
    for name in seq.blocks:
        for k, v in seq.blocks[name].params.items():
            worst = max(worst, float(np.max(np.abs(v - par.blocks[name].params[k]))))
    acceptance("5 (parameters)", _verdict(worst <= 1e-12),
               f"max abs block parameter difference {worst:.3g}, need <= 1e-12, 4 workers, T=4, 64-bit")
    assert worst <= 1e-12


def test_criterion_5_parallel_speedup(acceptance):
    data = synth_blobs(400, 2, seed=0)
    seq, par = _par_bundles(data, epochs=2, hidden=128, batch_size=32)
    t0 = time.perf_counter()
    train_noprop_dt(seq, data)
    t_seq = time.perf_counter() - t0
    t0 = time.perf_counter()
    parallel_train_dt(par, data, workers=4)
    t_par = time.perf_counter() - t0
    speedup = t_seq / t_par
    cores = os.cpu_count() or 1
    detail = f"speedup {speedup:.2f}x with 4 workers for T=4 (need >= 1.5x on a 4-core host; this host has {cores})"
    if cores < 4:
        acceptance("5 (speedup)", "NOT ASSESSED", detail)
        pytest.skip(f"needs a 4-core host; measured {speedup:.2f}x on {cores} core(s)")
    acceptance("5 (speedup)", _verdict(speedup >= 1.5), detail)
    assert speedup >= 1.5


def test_criterion_6_flow_field(acceptance):
    data = synth_blobs(16, 3, seed=2)
    cfg = default_config("fm", hidden=8)
    bundle = build_bundle(cfg, data.input_shape, data.m, data)
    stream = rngmod.stream(5, "fm")
    probe = rngmod.stream(5, "fm")
    probe.uniform(size=len(data))
    z0 = probe.standard_normal((len(data), bundle.embedding.d))
    z1 = bundle.embedding.rows[data.labels]
    euler_err = float(np.max(np.abs(euler_integrate(lambda z, t: z1 - z0, z0, 1000) - z1)))
    loss = float(fm_loss(Graph(), bundle, data.images, data.labels, stream,
                         field=lambda g, z, x, t: g.const(z1 - z0))["l2"].value)
    ok = euler_err <= 1e-12 and abs(loss) <= 1e-12
    acceptance("6", _verdict(ok), f"Euler endpoint error {euler_err:.3g}, oracle-field loss {loss:.3g}, need <= 1e-12")
    assert ok


def test_criterion_7_determinism(acceptance, tmp_path):
    invocations = {"dt": [], "dt-parallel": ["--parallel", "--workers", "2"], "ct": [], "fm": [], "backprop": []}
    same = {}
    for label, extra in invocations.items():
        method = label.split("-")[0]
        outs = []
        for i in range(2):
            path = tmp_path / f"{label}-{i}.csv"
            assert main(["train", "--method", method, "--dataset", "blobs", "--seed", "3", "--metrics", str(path),
                         *extra]) == 0
            outs.append(path.read_bytes())
        same[label] = outs[0] == outs[1] and len(outs[0]) > 0
    ok = all(same.values())
    acceptance("7", _verdict(ok), ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok
