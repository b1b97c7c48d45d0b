"""Variance-preserving noise schedules and their Gaussian algebra.

Time runs from noise to signal: ``alpha_bar[0]`` is the noisiest level and
``alpha_bar[T]`` the cleanest, so the signal-to-noise ratio increases in t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node
from .errors import ConfigError, RangeError
from .optim import ParamStore


@dataclass(frozen=True)
class DiscreteSchedule:
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 2:
            raise ConfigError("a discrete schedule needs at least two levels")
        if np.any(ab <= 0) or np.any(ab >= 1):
            raise ConfigError("alpha_bar values must lie strictly inside (0, 1)")
        if np.any(np.diff(ab) < 0):
            raise ConfigError("alpha_bar must be non-decreasing in t")
        ab.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)


@dataclass(frozen=True)
class PosteriorCoefficients:
    a: float
    b: float
    c: float


def cosine_alpha_bar(T: int, s: float = 0.008, clip: tuple[float, float] = (1e-4, 0.999)) -> DiscreteSchedule:
    """Cosine schedule, time-reversed so that ``alpha_bar`` grows with t."""
    lo, hi = clip
    if not (0 < lo < hi < 1):
        raise ConfigError(f"invalid clip bounds {clip}")
    if T < 1:
        raise ConfigError("T must be at least 1")

    def f(u):
        return np.cos(((u / T) + s) / (1 + s) * np.pi / 2) ** 2

    t = np.arange(T + 1, dtype=np.float64)
    return DiscreteSchedule(np.clip(f(T - t) / f(0.0), lo, hi))


def posterior_from_alpha_bars(ab_prev: float, ab_cur: float) -> PosteriorCoefficients:
    """Coefficients of q(z_cur | z_prev, y) = N(a u_y + b z_prev, c)."""
    alpha = ab_prev / ab_cur
    denom = 1.0 - ab_prev
    a = math.sqrt(ab_cur) * (1.0 - alpha) / denom
    b = math.sqrt(alpha) * (1.0 - ab_cur) / denom
    c = (1.0 - ab_cur) * (1.0 - alpha) / denom
    return PosteriorCoefficients(a, b, max(c, 0.0))


def posterior_coefficients(t: int, sched: DiscreteSchedule) -> PosteriorCoefficients:
    if not 1 <= t <= sched.T:
        raise RangeError(f"step {t} outside 1..{sched.T}")
    return posterior_from_alpha_bars(float(sched.alpha_bar[t - 1]), float(sched.alpha_bar[t]))


def snr(t: int, sched: DiscreteSchedule) -> float:
    if not 0 <= t <= sched.T:
        raise RangeError(f"step {t} outside 0..{sched.T}")
    ab = float(sched.alpha_bar[t])
    return ab / (1.0 - ab)


def snr_diff(t: int, sched: DiscreteSchedule) -> float:
    if not 1 <= t <= sched.T:
        raise RangeError(f"step {t} outside 1..{sched.T}")
    return snr(t, sched) - snr(t - 1, sched)


def sample_q_marginal(u_y: np.ndarray, alpha_bar, stream: np.random.Generator) -> np.ndarray:
    """Draw z ~ N(sqrt(alpha_bar) u_y, 1 - alpha_bar) by reparameterisation.

    ``alpha_bar`` may be a scalar or broadcast against the leading axis of ``u_y``.
    """
    u_y = np.asarray(u_y)
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (u_y.ndim - ab.ndim))
    eps = stream.standard_normal(u_y.shape)
    return (np.sqrt(ab) * u_y + np.sqrt(1.0 - ab) * eps).astype(u_y.dtype if u_y.dtype.kind == "f" else np.float64)


def gaussian_kl_to_standard(u_y: np.ndarray, alpha_bar0: float):
    """KL( N(sqrt(ab0) u, (1 - ab0) I) || N(0, I) ), over the last axis of ``u_y``."""
    u_y = np.asarray(u_y, dtype=np.float64)
    d = u_y.shape[-1]
    sq = np.sum(u_y * u_y, axis=-1)
    return 0.5 * (alpha_bar0 * sq + d * (1 - alpha_bar0) - d - d * np.log1p(-alpha_bar0))


def kl_to_standard_node(g: Graph, u: Node, alpha_bar0) -> Node:
    """Graph version of :func:`gaussian_kl_to_standard`; ``alpha_bar0`` may be a node."""
    d = u.shape[-1]
    sq = g.sq_l2(u)
    if isinstance(alpha_bar0, Node):
        one_minus = g.sub(g.const(1.0), alpha_bar0)
        inner = g.add(g.mul(alpha_bar0, sq), g.scale(g.add(one_minus, g.scale(g.log(one_minus), c=-1.0)), c=float(d)))
        return g.add(g.scale(inner, c=0.5), g.const(-0.5 * d))
    ab = float(alpha_bar0)
    const = 0.5 * (d * (1 - ab) - d - d * math.log1p(-ab))
    return g.add(g.scale(sq, c=0.5 * ab), g.const(const))


# --- trainable continuous schedule ---------------------------------------------

GAMMA_KEYS = ("gamma/gamma0", "gamma/gamma1", "gamma/w1", "gamma/b1", "gamma/w2")


@dataclass
class TrainableGamma:
    """gamma(t) = gamma0 + (gamma1 - gamma0) (1 - normalised monotone net(t)).

    The inner net is sum_k softplus(w2_k) * sigmoid(softplus(w1_k) t + b1_k),
    nondecreasing in t because both weight vectors pass through softplus.
    """

    store: ParamStore

    @classmethod
    def init(cls, gamma0: float = -7.0, gamma1: float = 7.0, hidden: int = 8, dtype=np.float64):
        store = ParamStore()
        slope = 6.0
        raw = math.log(math.expm1(slope))
        centers = np.linspace(0.05, 0.95, hidden)
        store.add("gamma/gamma0", gamma0, dtype)
        store.add("gamma/gamma1", gamma1, dtype)
        store.add("gamma/w1", np.full(hidden, raw), dtype)
        store.add("gamma/b1", -slope * centers, dtype)
        store.add("gamma/w2", np.zeros(hidden), dtype)
        return cls(store)

    def nodes(self, g: Graph) -> dict[str, Node]:
        return self.store.nodes(g, GAMMA_KEYS)


def gamma_graph(g: Graph, p: dict[str, Node], t: Node) -> dict[str, Node]:
    """Build gamma, alpha_bar, snr and the analytic derivatives at times ``t`` (shape (B,))."""
    w1 = g.softplus(p["gamma/w1"])
    w2 = g.softplus(p["gamma/w2"])
    b1 = p["gamma/b1"]

    def net(tn):
        h = g.add(g.mul(g.reshape(tn, shape=(-1, 1)), w1), b1)
        s = g.sigmoid(h)
        return s, g.sum(g.mul(s, w2), axis=1)

    _, g_lo = net(g.const(np.zeros(1)))
    _, g_hi = net(g.const(np.ones(1)))
    s, g_t = net(t)
    span = g.sub(g_hi, g_lo)
    gbar = g.div(g.sub(g_t, g_lo), span)
    one = g.const(1.0)
    dgap = g.sub(p["gamma/gamma1"], p["gamma/gamma0"])
    gamma = g.add(p["gamma/gamma0"], g.mul(dgap, g.sub(one, gbar)))
    ds = g.mul(s, g.sub(one, s))
    dnet = g.sum(g.mul(ds, g.mul(w1, w2)), axis=1)
    gamma_prime = g.scale(g.div(g.mul(dgap, dnet), span), c=-1.0)
    snr_t = g.exp(g.scale(gamma, c=-1.0))
    snr_prime = g.scale(g.mul(gamma_prime, snr_t), c=-1.0)
    alpha_bar = g.sigmoid(g.scale(gamma, c=-1.0))
    return {"gamma": gamma, "gamma_prime": gamma_prime, "snr": snr_t, "snr_prime": snr_prime,
            "alpha_bar": alpha_bar}


def _gamma_values(gm: TrainableGamma, t):
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    g = Graph()
    out = gamma_graph(g, gm.nodes(g), g.const(t_arr))
    vals = {k: np.array(v.value, dtype=np.float64) for k, v in out.items()}
    if np.ndim(t) == 0:
        vals = {k: float(v[0]) for k, v in vals.items()}
    return vals


def gamma_eval(gm: TrainableGamma, t):
    """Return (gamma(t), alpha_bar(t), SNR(t)) for scalar or array ``t`` in [0, 1]."""
    v = _gamma_values(gm, t)
    return v["gamma"], v["alpha_bar"], v["snr"]


def gamma_prime(gm: TrainableGamma, t):
    return _gamma_values(gm, t)["gamma_prime"]


def snr_prime(gm: TrainableGamma, t):
    return _gamma_values(gm, t)["snr_prime"]
