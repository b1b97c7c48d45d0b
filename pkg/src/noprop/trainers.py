"""Training loops: discrete-time, continuous-time, flow matching and the end-to-end baseline.

Each update builds one fresh graph, takes gradients of its scalar loss and
steps only the stores that own parameters in that graph.  ``peak_nodes`` in
the metrics is the largest such graph seen during an epoch.
"""
from __future__ import annotations

import dataclasses
import math
import multiprocessing as mp
import time
import traceback
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import rng as rngmod
from .autodiff import Graph, Node
from .blocks import block_forward_ct, block_forward_dt, flow_forward
from .bundle import ModelBundle
from .embeddings import head_scores
from .errors import ConfigError, WorkerError
from .inference import evaluate
from .metrics import MetricsRow, MetricsWriter
from .optim import ParamStore, optimizer_step
from .schedules import gamma_graph, kl_to_standard_node, snr_diff


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = rngmod.stream(seed, "shuffle", epoch).permutation(n)
    return [order[lo:lo + batch_size] for lo in range(0, n, batch_size)]


def _batch(dataset, idx, dtype):
    return np.asarray(dataset.images[idx], dtype=dtype), dataset.labels[idx]


def _step(stores: list[ParamStore], grads: dict, opt) -> None:
    for store in stores:
        sub = {k: v for k, v in grads.items() if k in store.params}
        if sub:
            optimizer_step(store, sub, opt)


def _noisy(g: Graph, U: Node, alpha_bar: float, eps: np.ndarray) -> Node:
    """sqrt(ab) U + sqrt(1 - ab) eps, with a fixed scalar ab."""
    return g.add(g.scale(U, c=math.sqrt(alpha_bar)), g.const(math.sqrt(1.0 - alpha_bar) * eps))


def _ce(g, bundle, z, y, W):
    scores = head_scores(g, bundle.head, bundle.head.store.nodes(g), z, W)
    return g.mean(g.cross_entropy(scores, labels=y))


def _total(g, terms):
    parts = [terms[k] for k in ("ce", "kl", "l2") if k in terms]
    loss = parts[0]
    for p in parts[1:]:
        loss = g.add(loss, p)
    return loss


# --- discrete time -------------------------------------------------------------

def noprop_dt_loss(g: Graph, bundle: ModelBundle, x, y, t: int, block_stream, head_stream,
                   terms=("ce", "kl", "l2"), denoiser=None) -> dict[str, Node]:
    """Per-batch DT objective for block ``t``.

    l2 = (T/2) eta (SNR(t) - SNR(t-1)) mean ||u_hat(z_{t-1}, x) - u_y||^2, with
    z_{t-1} drawn from q(z_{t-1} | y).  ce is the head's cross-entropy on a
    sample of z_T and kl the prior-matching term at t = 0.  ``denoiser``
    replaces the block with any callable (graph, z_node, x_node) -> u_hat node.
    """
    cfg, sched = bundle.config, bundle.schedule
    W = bundle.embedding.node(g)
    Y = np.eye(bundle.embedding.m, dtype=g.dtype)[y]
    U = g.linear(g.const(Y), W)
    xn = g.const(x)
    out: dict[str, Node] = {}
    if "l2" in terms:
        ab_prev = float(sched.alpha_bar[t - 1])
        z = _noisy(g, U, ab_prev, block_stream.standard_normal(U.shape))
        if denoiser is not None:
            u_hat = denoiser(g, z, xn)
        else:
            name = f"block{t}"
            u_hat = block_forward_dt(g, bundle.block_cfg, bundle.blocks[name], name, z, xn, W, block_stream)
        coef = 0.5 * sched.T * cfg.eta * snr_diff(t, sched)
        out["l2"] = g.scale(g.mean(g.sq_l2(g.sub(u_hat, U))), c=coef)
    if "ce" in terms:
        zT = _noisy(g, U, float(sched.alpha_bar[sched.T]), head_stream.standard_normal(U.shape))
        out["ce"] = _ce(g, bundle, zT, y, W)
    if "kl" in terms:
        out["kl"] = g.mean(kl_to_standard_node(g, U, float(sched.alpha_bar[0])))
    out["loss"] = _total(g, out)
    return out


def _dt_streams(seed, t, epoch, bi):
    return rngmod.stream(seed, "dt-block", t, epoch, bi), rngmod.stream(seed, "dt-head", t, epoch, bi)


class _EpochStats:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}
        self.peak = 0

    def add(self, terms: dict[str, Node], g: Graph):
        for k in ("ce", "kl", "l2"):
            if k in terms:
                self.sums[k] = self.sums.get(k, 0.0) + float(terms[k].value)
                self.counts[k] = self.counts.get(k, 0) + 1
        self.peak = max(self.peak, len(g))

    def mean(self, k):
        return self.sums[k] / self.counts[k] if self.counts.get(k) else None


def _epoch_row(bundle, epoch, block, stats, train, test, t0, evaluate_accuracy=True):
    cfg = bundle.config
    row = MetricsRow(epoch, block, stats.mean("ce"), stats.mean("kl"), stats.mean("l2"), peak_nodes=stats.peak)
    if evaluate_accuracy:
        if cfg.eval_train and train is not None:
            row.train_acc = evaluate(bundle, train, rngmod.stream(cfg.seed, "eval", "train", epoch))
        if cfg.eval_test and test is not None:
            row.test_acc = evaluate(bundle, test, rngmod.stream(cfg.seed, "eval", "test", epoch))
    row.wall_seconds = time.perf_counter() - t0
    return row


def _finish(bundle, epoch):
    bundle.cursor["epoch"] = epoch + 1
    bundle.trained = True


def train_noprop_dt(bundle: ModelBundle, dataset, test=None, metrics: MetricsWriter | None = None) -> ModelBundle:
    """Sequential DT training: epochs, then blocks t = 1..T, then minibatches."""
    cfg = bundle.config
    metrics = metrics or MetricsWriter()
    opt = cfg.optimizer_config()
    t0 = time.perf_counter()
    for epoch in range(bundle.cursor["epoch"], cfg.epochs):
        batches = batch_indices(len(dataset), cfg.batch_size, cfg.seed, epoch)
        total = _EpochStats()
        for t in range(1, cfg.T + 1):
            store = bundle.blocks[f"block{t}"]
            stats = _EpochStats()
            for bi, idx in enumerate(batches):
                x, y = _batch(dataset, idx, cfg.dtype)
                g = Graph(training=True, dtype=cfg.dtype)
                terms = noprop_dt_loss(g, bundle, x, y, t, *_dt_streams(cfg.seed, t, epoch, bi))
                grads = g.backward(terms["loss"])
                _step([store, bundle.head.store, bundle.embedding.store], grads, opt)
                store.update_buffers(g.state_updates)
                stats.add(terms, g)
                total.add(terms, g)
            metrics.write(_epoch_row(bundle, epoch, f"block{t}", stats, None, None, t0, False))
        metrics.write(_epoch_row(bundle, epoch, "all", total, dataset, test, t0))
        _finish(bundle, epoch)
    bundle.trained = True
    return bundle


# --- parallel discrete time ----------------------------------------------------

_SHARED: dict = {}


def _train_block_job(bundle: ModelBundle, t: int, epoch: int):
    """One epoch of the l2 term for block ``t``; runs inside a worker process."""
    dataset = _SHARED["train"]
    cfg = bundle.config
    opt = cfg.optimizer_config()
    store = bundle.blocks[f"block{t}"]
    stats = _EpochStats()
    for bi, idx in enumerate(batch_indices(len(dataset), cfg.batch_size, cfg.seed, epoch)):
        x, y = _batch(dataset, idx, cfg.dtype)
        g = Graph(training=True, dtype=cfg.dtype)
        bs, hs = _dt_streams(cfg.seed, t, epoch, bi)
        terms = noprop_dt_loss(g, bundle, x, y, t, bs, hs, terms=("l2",))
        _step([store], g.backward(terms["loss"]), opt)
        store.update_buffers(g.state_updates)
        stats.add(terms, g)
    return store, stats


def _train_head_job(bundle: ModelBundle, epoch: int):
    """The head's share of every DT update in one epoch, replayed in the sequential order."""
    dataset = _SHARED["train"]
    cfg = bundle.config
    opt = cfg.optimizer_config()
    per_t = {}
    for t in range(1, cfg.T + 1):
        stats = _EpochStats()
        for bi, idx in enumerate(batch_indices(len(dataset), cfg.batch_size, cfg.seed, epoch)):
            x, y = _batch(dataset, idx, cfg.dtype)
            g = Graph(training=True, dtype=cfg.dtype)
            bs, hs = _dt_streams(cfg.seed, t, epoch, bi)
            terms = noprop_dt_loss(g, bundle, x, y, t, bs, hs, terms=("ce", "kl"))
            _step([bundle.head.store], g.backward(terms["loss"]), opt)
            stats.add(terms, g)
        per_t[t] = stats
    return bundle.head.store, per_t


def _safe(fn, *args):
    try:
        return True, fn(*args)
    except Exception as exc:  # reported back to the parent as a WorkerError entry
        return False, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"


def _view(bundle: ModelBundle, names) -> ModelBundle:
    return dataclasses.replace(bundle, blocks={n: bundle.blocks[n] for n in names})


def parallel_train_dt(bundle: ModelBundle, dataset, workers: int | None = None, test=None,
                      metrics: MetricsWriter | None = None) -> ModelBundle:
    """DT training with the T blocks (and the head) updated in separate processes.

    With fixed embeddings a block's gradient depends on nothing but its own
    parameters, so running each block's epoch in isolation reproduces the
    sequential parameters.  Results are merged at every epoch boundary.
    """
    cfg = bundle.config
    if bundle.embedding.trainable:
        raise ConfigError("parallel block training requires fixed one-hot embeddings")
    if cfg.method != "dt":
        raise ConfigError("parallel training is only defined for dt")
    workers = workers or cfg.workers
    metrics = metrics or MetricsWriter()
    t0 = time.perf_counter()
    _SHARED["train"] = dataset
    ctx = mp.get_context("fork")
    try:
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for epoch in range(bundle.cursor["epoch"], cfg.epochs):
                block_futs = {t: pool.submit(_safe, _train_block_job, _view(bundle, [f"block{t}"]), t, epoch)
                              for t in range(1, cfg.T + 1)}
                head_fut = pool.submit(_safe, _train_head_job, _view(bundle, []), epoch)
                failures, completed = {}, {}
                for t, fut in block_futs.items():
                    ok, res = fut.result()
                    (completed if ok else failures)[f"block{t}"] = res
                ok, head_res = head_fut.result()
                if not ok:
                    failures["head"] = head_res
                for name, (store, _) in completed.items():
                    bundle.blocks[name] = store
                if ok:
                    bundle.head.store = head_res[0]
                if failures:
                    raise WorkerError(failures, {n: s for n, (s, _) in completed.items()})
                total = _EpochStats()
                for t in range(1, cfg.T + 1):
                    stats = completed[f"block{t}"][1]
                    head_stats = head_res[1][t]
                    stats.sums.update(head_stats.sums)
                    stats.counts.update(head_stats.counts)
                    for k in stats.sums:
                        total.sums[k] = total.sums.get(k, 0.0) + stats.sums[k]
                        total.counts[k] = total.counts.get(k, 0) + stats.counts[k]
                    total.peak = max(total.peak, stats.peak, head_stats.peak)
                    stats.peak = max(stats.peak, head_stats.peak)
                    metrics.write(_epoch_row(bundle, epoch, f"block{t}", stats, None, None, t0, False))
                metrics.write(_epoch_row(bundle, epoch, "all", total, dataset, test, t0))
                _finish(bundle, epoch)
    finally:
        _SHARED.pop("train", None)
    bundle.trained = True
    return bundle


# --- continuous time -------------------------------------------------------------

def noprop_ct_loss(g: Graph, bundle: ModelBundle, x, y, stream, denoiser=None) -> dict[str, Node]:
    """Per-batch CT objective with t ~ U(0, 1) per example.

    l2 = (eta / 2) mean SNR'(t) ||u_hat(z_t, x, t) - u_y||^2, where z_t is built
    inside the graph so the schedule parameters receive gradients through
    alpha_bar(t) as well as SNR'(t).
    """
    cfg = bundle.config
    W = bundle.embedding.node(g)
    Y = np.eye(bundle.embedding.m, dtype=g.dtype)[y]
    U = g.linear(g.const(Y), W)
    B, d = U.shape
    t = stream.uniform(size=B)
    eps_t = stream.standard_normal((B, d))
    eps_1 = stream.standard_normal((B, d))
    if cfg.train_gamma:
        gp = bundle.gamma.nodes(g)
    else:
        gp = {k: g.const(v) for k, v in bundle.gamma.store.params.items()}
    tn = g.const(t)
    sch = gamma_graph(g, gp, tn)
    sch0 = gamma_graph(g, gp, g.const(np.zeros(1)))
    sch1 = gamma_graph(g, gp, g.const(np.ones(1)))
    one = g.const(1.0)

    def sample(ab, eps):
        ab = g.reshape(ab, shape=(-1, 1))
        return g.add(g.mul(g.sqrt(ab), U), g.mul(g.sqrt(g.sub(one, ab)), g.const(eps)))

    z_t = sample(sch["alpha_bar"], eps_t)
    xn = g.const(x)
    if denoiser is not None:
        u_hat = denoiser(g, z_t, xn, tn)
    else:
        u_hat = block_forward_ct(g, bundle.block_cfg, bundle.blocks["block"], "block", z_t, xn, tn, W, stream)
    out = {
        "ce": _ce(g, bundle, sample(sch1["alpha_bar"], eps_1), y, W),
        "kl": g.mean(kl_to_standard_node(g, U, sch0["alpha_bar"])),
        "l2": g.scale(g.mean(g.mul(sch["snr_prime"], g.sq_l2(g.sub(u_hat, U)))), c=0.5 * cfg.eta),
    }
    out["loss"] = _total(g, out)
    return out


# --- flow matching -----------------------------------------------------------------

def fm_loss(g: Graph, bundle: ModelBundle, x, y, stream, field=None, anchored: bool = False) -> dict[str, Node]:
    """Conditional flow matching on z_t = t u_y + (1 - t) z_0 + sigma eps.

    The regression target is u_y - z_0.  With ``anchored`` the extrapolated
    endpoint z_t + (1 - t) v is also classified by the head (cross-entropy),
    which keeps a trainable embedding from collapsing.  ``field`` replaces the
    block with any callable (graph, z_node, x_node, t_node) -> v node.
    """
    cfg = bundle.config
    W = bundle.embedding.node(g)
    Y = np.eye(bundle.embedding.m, dtype=g.dtype)[y]
    U = g.linear(g.const(Y), W)
    B, d = U.shape
    t = stream.uniform(size=B)
    z0 = stream.standard_normal((B, d))
    eps = stream.standard_normal((B, d))
    tc = t[:, None]
    z_t = g.add(g.mul(g.const(tc), U), g.const((1 - tc) * z0 + cfg.fm_sigma * eps))
    xn, tn = g.const(x), g.const(t)
    if field is not None:
        v = field(g, z_t, xn, tn)
    else:
        v = flow_forward(g, bundle.block_cfg, bundle.blocks["block"], "block", z_t, xn, tn, W, stream)
    out = {"l2": g.mean(g.sq_l2(g.sub(v, g.sub(U, g.const(z0)))))}
    if anchored:
        z1 = g.add(z_t, g.mul(g.const(1 - tc), v))
        out["ce"] = _ce(g, bundle, z1, y, W)
    out["loss"] = _total(g, out)
    return out


def fm_loss_anchored(g: Graph, bundle: ModelBundle, x, y, stream, field=None) -> dict[str, Node]:
    return fm_loss(g, bundle, x, y, stream, field, anchored=True)


# --- end-to-end baseline -----------------------------------------------------------

def backprop_loss(g: Graph, bundle: ModelBundle, x, y, stream) -> dict[str, Node]:
    """Cross-entropy after the full chain z_t = z_{t-1} + tanh(w_t) (u_hat_t - z_{t-1})."""
    cfg = bundle.config
    W = bundle.embedding.node(g)
    xn = g.const(x)
    z = g.const(stream.standard_normal((len(x), bundle.embedding.d)))
    bp = bundle.baseline.nodes(g)
    for t in range(1, cfg.T + 1):
        name = f"block{t}"
        u_hat = block_forward_dt(g, bundle.block_cfg, bundle.blocks[name], name, z, xn, W, stream)
        z = g.add(z, g.mul(g.tanh(bp[f"baseline/w{t}"]), g.sub(u_hat, z)))
    out = {"ce": _ce(g, bundle, z, y, W)}
    out["loss"] = out["ce"]
    return out


# --- shared loop for single-graph methods ---------------------------------------------

def _train_joint(bundle: ModelBundle, dataset, test, metrics, loss_fn, key: str) -> ModelBundle:
    cfg = bundle.config
    metrics = metrics or MetricsWriter()
    opt = cfg.optimizer_config()
    stores = list(bundle.stores().values())
    t0 = time.perf_counter()
    for epoch in range(bundle.cursor["epoch"], cfg.epochs):
        stats = _EpochStats()
        for bi, idx in enumerate(batch_indices(len(dataset), cfg.batch_size, cfg.seed, epoch)):
            x, y = _batch(dataset, idx, cfg.dtype)
            g = Graph(training=True, dtype=cfg.dtype)
            terms = loss_fn(g, bundle, x, y, rngmod.stream(cfg.seed, key, epoch, bi))
            _step(stores, g.backward(terms["loss"]), opt)
            for store in bundle.blocks.values():
                store.update_buffers(g.state_updates)
            stats.add(terms, g)
        metrics.write(_epoch_row(bundle, epoch, "all", stats, dataset, test, t0))
        _finish(bundle, epoch)
    bundle.trained = True
    return bundle


def train_noprop_ct(bundle, dataset, test=None, metrics=None) -> ModelBundle:
    return _train_joint(bundle, dataset, test, metrics, noprop_ct_loss, "ct")


def train_noprop_fm(bundle, dataset, test=None, metrics=None) -> ModelBundle:
    anchored = bundle.embedding.trainable
    return _train_joint(bundle, dataset, test, metrics,
                        lambda g, b, x, y, s: fm_loss(g, b, x, y, s, anchored=anchored), "fm")


def train_backprop_baseline(bundle, dataset, test=None, metrics=None) -> ModelBundle:
    return _train_joint(bundle, dataset, test, metrics, backprop_loss, "backprop")


def train(bundle: ModelBundle, dataset, test=None, metrics=None) -> ModelBundle:
    """Dispatch on ``bundle.config.method`` (and ``parallel`` for dt)."""
    method = bundle.method
    if method == "dt":
        if bundle.config.parallel:
            return parallel_train_dt(bundle, dataset, test=test, metrics=metrics)
        return train_noprop_dt(bundle, dataset, test, metrics)
    return {"ct": train_noprop_ct, "fm": train_noprop_fm, "backprop": train_backprop_baseline}[method](
        bundle, dataset, test, metrics)
