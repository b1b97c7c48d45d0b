"""Label prediction for every training method."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .autodiff import Graph
from .blocks import block_forward_ct, block_forward_dt, flow_forward
from .bundle import ModelBundle
from .embeddings import head_scores
from .errors import ConfigError, StateError
from .schedules import PosteriorCoefficients, gamma_eval, posterior_coefficients, posterior_from_alpha_bars


@dataclass(frozen=True)
class InferenceConfig:
    steps: int = 0                 # 0: method default
    stochastic: bool = True
    decision: str = ""             # "" picks the method default

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("inference steps must be >= 1 (or 0 for the default)")
        if self.decision not in ("", "head-argmax", "nearest-embedding"):
            raise ConfigError(f"unknown decision rule {self.decision!r}")


def dt_forward_step(z_prev, x, denoise, coeffs: PosteriorCoefficients, stream=None):
    """z_next = a * denoise(z_prev, x) + b * z_prev + sqrt(c) * eps."""
    z_next = coeffs.a * denoise(z_prev, x) + coeffs.b * z_prev
    if stream is not None and coeffs.c > 0:
        z_next = z_next + math.sqrt(coeffs.c) * stream.standard_normal(z_prev.shape)
    return z_next


def nearest_embedding(z, rows):
    """Index of the closest embedding row; equal distances resolve to the lowest index."""
    z = np.atleast_2d(z)
    d2 = ((z[:, None, :] - rows[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1), d2


def head_probs(bundle: ModelBundle, z):
    g = Graph(dtype=bundle.config.dtype)
    W = g.const(bundle.embedding.rows)
    scores = head_scores(g, bundle.head, bundle.head.store.nodes(g), g.const(z), W)
    return np.array(g.softmax(scores).value)


def _decide(bundle, z, decision):
    if decision == "nearest-embedding":
        pred, d2 = nearest_embedding(z, bundle.embedding.rows)
        return pred, d2
    probs = head_probs(bundle, z)
    return np.argmax(probs, axis=1), probs


def _require_trained(bundle, method):
    if bundle.method != method:
        raise ConfigError(f"bundle was built for {bundle.method!r}, not {method!r}")
    if not bundle.trained:
        raise StateError("bundle has not been trained")


def _eval_dt_block(bundle, t, z, x):
    g = Graph(dtype=bundle.config.dtype)
    name = f"block{t}"
    out = block_forward_dt(g, bundle.block_cfg, bundle.blocks[name], name, g.const(z), g.const(x),
                           g.const(bundle.embedding.rows))
    return np.array(out.value)


def _eval_timed_block(bundle, z, x, t, flow=False):
    g = Graph(dtype=bundle.config.dtype)
    fn = flow_forward if flow else block_forward_ct
    tn = g.const(np.full(len(x), t))
    out = fn(g, bundle.block_cfg, bundle.blocks["block"], "block", g.const(z), g.const(x), tn,
             g.const(bundle.embedding.rows))
    return np.array(out.value)


def _chunks(x, size):
    for lo in range(0, len(x), size):
        yield x[lo:lo + size]


def _run_chunked(fn, bundle, x, stream, chunk):
    x = np.asarray(x, dtype=bundle.config.dtype)
    preds, aux = [], []
    for xc in _chunks(x, chunk or len(x)):
        p, a = fn(bundle, xc, stream)
        preds.append(p)
        aux.append(a)
    return np.concatenate(preds), np.concatenate(aux)


def infer_dt(bundle: ModelBundle, x, cfg: InferenceConfig = InferenceConfig(), stream=None, chunk=0):
    """Run the stochastic residual chain z_0 -> z_T and classify z_T."""
    _require_trained(bundle, "dt")
    stream = stream if stream is not None else rngmod.stream(bundle.config.seed, "infer")
    sched = bundle.schedule

    def run(b, xc, st):
        z = st.standard_normal((len(xc), b.embedding.d)).astype(xc.dtype)
        for t in range(1, sched.T + 1):
            z = dt_forward_step(z, xc, lambda zz, xx: _eval_dt_block(b, t, zz, xx),
                                posterior_coefficients(t, sched), st if cfg.stochastic else None)
        return _decide(b, z, cfg.decision or "head-argmax")

    return _run_chunked(run, bundle, x, stream, chunk)


def infer_ct(bundle: ModelBundle, x, cfg: InferenceConfig = InferenceConfig(), stream=None, chunk=0):
    """Ancestral sampling on the grid t_i = i / steps, noise-free on the last step."""
    _require_trained(bundle, "ct")
    stream = stream if stream is not None else rngmod.stream(bundle.config.seed, "infer")
    n = cfg.steps or bundle.config.steps_for_inference
    grid = np.arange(n + 1) / n
    _, ab, _ = gamma_eval(bundle.gamma, grid)

    def run(b, xc, st):
        z = st.standard_normal((len(xc), b.embedding.d)).astype(xc.dtype)
        for i in range(1, n + 1):
            coeffs = posterior_from_alpha_bars(float(ab[i - 1]), float(ab[i]))
            noisy = cfg.stochastic and i < n
            z = dt_forward_step(z, xc, lambda zz, xx: _eval_timed_block(b, zz, xx, grid[i - 1]),
                                coeffs, st if noisy else None)
        return _decide(b, z, cfg.decision or "head-argmax")

    return _run_chunked(run, bundle, x, stream, chunk)


def euler_integrate(field, z0, steps: int):
    """Explicit Euler from t=0 to t=1 with ``steps`` equal steps; field(z, t) -> dz/dt."""
    z = z0
    h = 1.0 / steps
    for i in range(steps):
        z = z + h * field(z, i * h)
    return z


def infer_fm(bundle: ModelBundle, x, cfg: InferenceConfig = InferenceConfig(), stream=None, chunk=0):
    """Euler-integrate the learned field from noise and pick the nearest embedding."""
    _require_trained(bundle, "fm")
    stream = stream if stream is not None else rngmod.stream(bundle.config.seed, "infer")
    n = cfg.steps or bundle.config.steps_for_inference

    def run(b, xc, st):
        z0 = st.standard_normal((len(xc), b.embedding.d)).astype(xc.dtype)
        z = euler_integrate(lambda zz, t: _eval_timed_block(b, zz, xc, t, flow=True), z0, n)
        return _decide(b, z, cfg.decision or "nearest-embedding")

    return _run_chunked(run, bundle, x, stream, chunk)


def backprop_chain(bundle: ModelBundle, x, z0):
    """Deterministic forward of the backprop baseline from ``z0``; returns z_T."""
    z = z0
    for t in range(1, bundle.config.T + 1):
        alpha = math.tanh(float(bundle.baseline.params[f"baseline/w{t}"]))
        z = (1 - alpha) * z + alpha * _eval_dt_block(bundle, t, z, x)
    return z


def infer_backprop(bundle: ModelBundle, x, cfg: InferenceConfig = InferenceConfig(), stream=None, chunk=0):
    _require_trained(bundle, "backprop")
    stream = stream if stream is not None else rngmod.stream(bundle.config.seed, "infer")

    def run(b, xc, st):
        z0 = st.standard_normal((len(xc), b.embedding.d)).astype(xc.dtype)
        return _decide(b, backprop_chain(b, xc, z0), cfg.decision or "head-argmax")

    return _run_chunked(run, bundle, x, stream, chunk)


INFER = {"dt": infer_dt, "ct": infer_ct, "fm": infer_fm, "backprop": infer_backprop}


def predict(bundle: ModelBundle, x, stream=None, steps: int = 0, chunk: int = 0):
    pred, _ = INFER[bundle.method](bundle, x, InferenceConfig(steps=steps), stream, chunk or bundle.config.eval_batch)
    return pred


def evaluate(bundle: ModelBundle, dataset, stream=None, steps: int = 0) -> float:
    """Accuracy of :func:`predict` on ``dataset``; runs even mid-training."""
    was = bundle.trained
    bundle.trained = True
    try:
        pred = predict(bundle, dataset.images, stream, steps)
    finally:
        bundle.trained = was
    return float(np.mean(pred == dataset.labels))
