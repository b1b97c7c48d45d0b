"""Independent numerical oracles behind the ``check`` subcommand.

Every check returns a :class:`CheckResult`; :func:`run_checks` runs them all.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .autodiff import PRIMITIVES, Graph, grad_check
from .blocks import BlockConfig, block_forward_ct, block_forward_dt, flow_forward, init_block
from .bundle import build_bundle
from .config import default_config
from .data import synth_blobs
from .embeddings import Head, head_scores
from .schedules import (TrainableGamma, cosine_alpha_bar, gamma_graph, gaussian_kl_to_standard,
                        kl_to_standard_node, posterior_coefficients, posterior_from_alpha_bars, snr,
                        snr_diff)
from .trainers import noprop_dt_loss

GRAD_TOL = 1e-5
_trapz = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.value:.3e} (tol {self.tolerance:g}) {self.detail}".rstrip()


def _project(g, out, seed=0):
    """Scalar loss sum(out * R) with a fixed random R, so every output entry is exercised."""
    R = np.random.default_rng(seed).standard_normal(out.shape)
    return g.sum(g.mul(out, g.const(R)))


# Each case: (input arrays, build(g, nodes) -> output node).  Inputs are all treated as parameters.
def _primitive_cases():
    r = np.random.default_rng(7)
    n = lambda *s: r.standard_normal(s)
    pos = lambda *s: r.uniform(0.5, 2.0, s)
    labels = np.array([0, 2, 1, 2])
    return {
        "linear": ({"x": n(4, 3), "w": n(3, 5), "b": n(5)}, lambda g, p: g.linear(p["x"], p["w"], p["b"])),
        "matmul": ({"a": n(4, 3), "b": n(5, 3)}, lambda g, p: g.matmul(p["a"], p["b"], transpose_b=True)),
        "conv2d": ({"x": n(2, 5, 5, 2), "w": n(3, 3, 2, 3), "b": n(3)},
                   lambda g, p: g.conv2d(p["x"], p["w"], p["b"], stride=2, pad=1)),
        "relu": ({"x": n(4, 5)}, lambda g, p: g.relu(p["x"])),
        "tanh": ({"x": n(4, 5)}, lambda g, p: g.tanh(p["x"])),
        "sigmoid": ({"x": n(4, 5)}, lambda g, p: g.sigmoid(p["x"])),
        "softplus": ({"x": n(4, 5)}, lambda g, p: g.softplus(p["x"])),
        "exp": ({"x": n(4, 5)}, lambda g, p: g.exp(p["x"])),
        "log": ({"x": pos(4, 5)}, lambda g, p: g.log(p["x"])),
        "sqrt": ({"x": pos(4, 5)}, lambda g, p: g.sqrt(p["x"])),
        "batchnorm": ({"x": n(6, 4) * 2, "gamma": n(4), "beta": n(4)},
                      lambda g, p: g.batchnorm(p["x"], p["gamma"], p["beta"])),
        "softmax": ({"x": n(4, 5)}, lambda g, p: g.softmax(p["x"])),
        "log_softmax": ({"x": n(4, 5)}, lambda g, p: g.log_softmax(p["x"])),
        "concat": ({"a": n(4, 2), "b": n(4, 3)}, lambda g, p: g.concat(p["a"], p["b"], axis=1)),
        "add": ({"a": n(4, 5), "b": n(5)}, lambda g, p: g.add(p["a"], p["b"])),
        "sub": ({"a": n(4, 1), "b": n(4, 5)}, lambda g, p: g.sub(p["a"], p["b"])),
        "mul": ({"a": n(4, 5), "b": n(1, 5)}, lambda g, p: g.mul(p["a"], p["b"])),
        "div": ({"a": n(4, 5), "b": pos(4, 1)}, lambda g, p: g.div(p["a"], p["b"])),
        "scale": ({"x": n(4, 5)}, lambda g, p: g.scale(p["x"], c=-1.7)),
        "sum": ({"x": n(4, 5)}, lambda g, p: g.sum(p["x"], axis=1)),
        "mean": ({"x": n(4, 5)}, lambda g, p: g.mean(p["x"], axis=0, keepdims=True)),
        "sq_l2": ({"x": n(4, 5)}, lambda g, p: g.sq_l2(p["x"])),
        "cross_entropy": ({"x": n(4, 3)}, lambda g, p: g.cross_entropy(p["x"], labels=labels)),
        "time_embedding": ({"t": r.uniform(0, 1, 5)},
                           lambda g, p: g.time_embedding(p["t"], dim=6, scale=10.0)),
        "max_pool2d": ({"x": n(2, 4, 4, 3)}, lambda g, p: g.max_pool2d(p["x"], size=2)),
        "dropout": ({"x": n(4, 5)},
                    lambda g, p: g.dropout(p["x"], keep_prob=0.7, stream=rngmod.stream(0, "check-dropout"))),
        "reshape": ({"x": n(4, 6)}, lambda g, p: g.reshape(p["x"], shape=(2, 12))),
    }


def check_primitives(tol: float = GRAD_TOL) -> list[CheckResult]:
    cases = _primitive_cases()
    missing = sorted(set(PRIMITIVES) - set(cases))
    out = []
    for name, (params, build) in cases.items():
        rep = grad_check(lambda g, p, b=build: _project(g, b(g, p)), params, tolerance=tol)
        out.append(CheckResult(f"grad {name}", rep.passed, rep.max_rel_err, tol))
    if missing:
        out.append(CheckResult("grad coverage", False, float(len(missing)), 0, "unchecked: " + ", ".join(missing)))
    return out


def _block_case(kind, arch, d, m=3, input_shape=(6,), dropout=0.0):
    cfg = BlockConfig(kind, input_shape, d, m, arch=arch, hidden=6, conv_channels=(2, 3), time_dim=4,
                      dropout=dropout)
    store = init_block(cfg, "b", rngmod.stream(0, "check-block", kind, arch), np.float64)
    r = np.random.default_rng(3)
    B = 4
    x = r.uniform(0, 1, (B,) + tuple(input_shape))
    z = r.standard_normal((B, d))
    t = r.uniform(0, 1, B)
    W = r.standard_normal((m, d))

    def build(g, p):
        fwd = {"dt": block_forward_dt, "ct": block_forward_ct, "fm": flow_forward}[kind]
        stream = rngmod.stream(0, "check-dropout")
        args = (g.const(z), g.const(x)) if kind == "dt" else (g.const(z), g.const(x), g.const(t))
        # parameter names are deduplicated per graph, so the block reuses the perturbed leaves in p
        out = fwd(g, cfg, store, "b", *args, p["W"], stream=stream)
        return _project(g, out, 1)

    return dict(store.params, W=W), build


def check_blocks(tol: float = GRAD_TOL) -> list[CheckResult]:
    cases = {
        "block dt/mlp": _block_case("dt", "mlp", 3),
        "block dt/mlp+dropout": _block_case("dt", "mlp", 3, dropout=0.3),
        "block dt/conv": _block_case("dt", "conv", 3, input_shape=(8, 8, 1)),
        "block dt/conv label-as-image": _block_case("dt", "conv", 64, input_shape=(8, 8, 1)),
        "block ct/mlp": _block_case("ct", "mlp", 3),
        "block fm/mlp": _block_case("fm", "mlp", 3),
    }
    out = []
    for name, (params, build) in cases.items():
        rep = grad_check(build, params, tolerance=tol)
        out.append(CheckResult(f"grad {name}", rep.passed, rep.max_rel_err, tol))
    out.extend(_check_heads_and_schedule(tol))
    return out


def _check_heads_and_schedule(tol):
    r = np.random.default_rng(11)
    out = []
    labels = np.array([0, 1, 2, 1])
    z = r.standard_normal((4, 3))
    for kind in ("softmax", "radial"):
        head = Head.init(kind, 3, 3, rngmod.stream(0, "check-head"), sigma=0.8)
        params = dict(head.store.params, W=r.standard_normal((3, 3)))

        def build(g, p, head=head):
            s = head_scores(g, head, p, g.const(z), p["W"])
            return g.mean(g.cross_entropy(s, labels=labels))

        rep = grad_check(build, params, tolerance=tol)
        out.append(CheckResult(f"grad head {kind}", rep.passed, rep.max_rel_err, tol))
    gm = TrainableGamma.init(hidden=4)
    params = dict(gm.store.params)
    params["gamma/w2"] = r.standard_normal(4) * 0.5
    tt = r.uniform(0, 1, 5)
    U = r.standard_normal((5, 3))

    def build_gamma(g, p):
        sch = gamma_graph(g, p, g.const(tt))
        s0 = gamma_graph(g, p, g.const(np.zeros(1)))
        total = g.add(g.sum(sch["snr_prime"]), g.sum(sch["alpha_bar"]))
        return g.add(total, g.sum(kl_to_standard_node(g, g.const(U), s0["alpha_bar"])))

    rep = grad_check(build_gamma, params, tolerance=tol)
    out.append(CheckResult("grad learned schedule", rep.passed, rep.max_rel_err, tol))
    return out


def bayes_posterior_1d(ab_prev: float, ab_cur: float, u: float, z_prev: float, n: int = 400_001):
    """Mean and variance of q(z_t | z_{t-1}, y) by quadrature of Bayes' rule in one dimension.

    Uses q(z_t | y) = N(sqrt(ab_cur) u, 1 - ab_cur) as prior and the one-step
    noising kernel q(z_{t-1} | z_t) = N(sqrt(alpha) z_t, 1 - alpha), alpha = ab_prev / ab_cur,
    as likelihood.
    """
    alpha = ab_prev / ab_cur
    centre = math.sqrt(ab_cur) * u
    half = 12.0 * math.sqrt(1 - ab_cur)
    zs = np.linspace(centre - half, centre + half, n)
    log_prior = -0.5 * (zs - centre) ** 2 / (1 - ab_cur)
    log_lik = -0.5 * (z_prev - math.sqrt(alpha) * zs) ** 2 / (1 - alpha)
    logw = log_prior + log_lik
    w = np.exp(logw - logw.max())
    Z = _trapz(w, zs)
    mean = _trapz(w * zs, zs) / Z
    var = _trapz(w * (zs - mean) ** 2, zs) / Z
    return mean, var


def check_bayes(pairs: int = 100, tol: float = 1e-3, seed: int = 0) -> CheckResult:
    r = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        ab_cur = r.uniform(0.05, 0.95)
        ab_prev = ab_cur * r.uniform(0.05, 0.95)
        u, zp = r.standard_normal(2)
        co = posterior_from_alpha_bars(ab_prev, ab_cur)
        mean, var = bayes_posterior_1d(ab_prev, ab_cur, u, zp)
        worst = max(worst, abs(mean - (co.a * u + co.b * zp)), abs(var - co.c))
    sched = cosine_alpha_bar(10)
    for t in range(1, 11):
        co = posterior_coefficients(t, sched)
        ab_prev, ab_cur = sched.alpha_bar[t - 1], sched.alpha_bar[t]
        mean, var = bayes_posterior_1d(ab_prev, ab_cur, 0.7, -0.4)
        worst = max(worst, abs(mean - (co.a * 0.7 - co.b * 0.4)), abs(var - co.c))
    return CheckResult(f"posterior vs Bayes quadrature ({pairs} pairs + cosine T=10)", worst < tol, worst, tol)


def check_kl_monte_carlo(samples: int = 1_000_000, tol: float = 0.01, seed: int = 0) -> list[CheckResult]:
    r = np.random.default_rng(seed)
    out = []
    for u, ab0 in ((np.array([1.0, -0.5, 0.3]), 0.5), (np.eye(4)[2], 0.2), (np.array([0.6, 0.8]), 0.9)):
        d = len(u)
        mu, sd = math.sqrt(ab0) * u, math.sqrt(1 - ab0)
        z = mu + sd * r.standard_normal((samples, d))
        log_q = -0.5 * np.sum(((z - mu) / sd) ** 2, axis=1) - d * math.log(sd)
        log_p = -0.5 * np.sum(z * z, axis=1)
        mc = float(np.mean(log_q - log_p))
        exact = float(gaussian_kl_to_standard(u, ab0))
        rel = abs(mc - exact) / exact
        out.append(CheckResult(f"KL vs Monte Carlo (d={d}, ab0={ab0})", rel < tol, rel, tol))
    return out


def check_telescoping(tol: float = 1e-10) -> CheckResult:
    worst = 0.0
    for T in (1, 2, 5, 10, 100, 1000):
        sched = cosine_alpha_bar(T)
        total = math.fsum(snr_diff(t, sched) for t in range(1, T + 1))
        worst = max(worst, abs(total - (snr(T, sched) - snr(0, sched))))
    return CheckResult("telescoping sum of SNR differences", worst < tol, worst, tol)


def check_unbiasedness(tol: float = 1e-10) -> CheckResult:
    """E_t over uniform t of the T-scaled block term equals the sum over all blocks."""
    data = synth_blobs(8, 2, seed=0)
    cfg = default_config("dt", T=6, hidden=8, eta=0.3, batch_size=16)
    bundle = build_bundle(cfg, data.input_shape, 2, data)
    x, y = data.images, data.labels
    sampled, direct = [], []
    for t in range(1, cfg.T + 1):
        g = Graph(training=True)
        terms = noprop_dt_loss(g, bundle, x, y, t, rngmod.stream(1, "u", t), rngmod.stream(1, "h", t),
                               terms=("l2",))
        sampled.append(float(terms["l2"].value))
        # direct evaluation of the un-scaled summand for the same noise draw
        st = rngmod.stream(1, "u", t)
        U = np.eye(2)[y]
        ab = bundle.schedule.alpha_bar[t - 1]
        z = math.sqrt(ab) * U + math.sqrt(1 - ab) * st.standard_normal(U.shape)
        g2 = Graph(training=True)
        name = f"block{t}"
        u_hat = block_forward_dt(g2, bundle.block_cfg, bundle.blocks[name], name, g2.const(z), g2.const(x),
                                 g2.const(np.eye(2)), st).value
        mse = float(np.mean(np.sum((u_hat - U) ** 2, axis=1)))
        direct.append(0.5 * cfg.eta * snr_diff(t, bundle.schedule) * mse)
    mean_sampled = math.fsum(sampled) / cfg.T
    full = math.fsum(direct)
    rel = abs(mean_sampled - full) / max(abs(full), 1e-300)
    return CheckResult("unbiasedness of the sampled block term", rel < tol, rel, tol)


def run_checks(verbose=print) -> list[CheckResult]:
    results = []
    groups = (check_primitives, check_blocks, lambda: [check_bayes()], check_kl_monte_carlo,
              lambda: [check_telescoping()], lambda: [check_unbiasedness()])
    t0 = time.perf_counter()
    for fn in groups:
        for res in fn():
            results.append(res)
            if verbose:
                verbose(res.line())
    if verbose:
        verbose(f"{sum(r.passed for r in results)}/{len(results)} checks passed "
                f"in {time.perf_counter() - t0:.1f}s")
    return results
