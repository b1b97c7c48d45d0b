"""Parameter stores and the Adam/AdamW update."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParameterNameError


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")


@dataclass
class ParamStore:
    """Named parameters plus their optimizer slots and non-trainable buffers.

    Arrays are replaced, never written in place, so a graph that captured a
    parameter keeps seeing the value it was built with.
    """

    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, value, dtype=np.float64) -> None:
        if name in self.params or name in self.buffers:
            raise ParameterNameError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=dtype)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.steps[name] = 0

    def add_buffer(self, name: str, value, dtype=np.float64) -> None:
        if name in self.params or name in self.buffers:
            raise ParameterNameError(f"duplicate parameter name {name!r}")
        self.buffers[name] = np.array(value, dtype=dtype)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def nodes(self, graph, names=None):
        """Register parameters as leaves of ``graph``; returns name -> node."""
        return {k: graph.param(k, self.params[k]) for k in (names or self.params)}

    def update_buffers(self, updates: dict[str, np.ndarray]) -> None:
        for k, val in updates.items():
            if k in self.buffers:
                self.buffers[k] = np.array(val, dtype=self.buffers[k].dtype)

    def astype(self, dtype) -> "ParamStore":
        cast = lambda d: {k: np.array(v, dtype=dtype) for k, v in d.items()}
        return ParamStore(cast(self.params), cast(self.buffers), cast(self.m), cast(self.v), dict(self.steps))

    def copy(self) -> "ParamStore":
        dup = lambda d: {k: v.copy() for k, v in d.items()}
        return ParamStore(dup(self.params), dup(self.buffers), dup(self.m), dup(self.v), dict(self.steps))


def optimizer_step(store: ParamStore, grads: dict[str, np.ndarray], cfg: OptimizerConfig) -> ParamStore:
    """One Adam or AdamW step on the parameters named in ``grads``.

    AdamW shrinks the parameter directly by ``lr * wd * p``; Adam adds
    ``wd * p`` to the gradient before the moment updates.
    """
    unknown = [k for k in grads if k not in store.params]
    if unknown:
        raise ParameterNameError(f"gradient for unknown parameter(s): {unknown}")
    b1, b2 = cfg.beta1, cfg.beta2
    for name, g in grads.items():
        p = store.params[name]
        if g.shape != p.shape:
            raise ParameterNameError(f"gradient shape {g.shape} does not match {name!r} {p.shape}")
        if cfg.kind == "adam" and cfg.weight_decay:
            g = g + cfg.weight_decay * p
        k = store.steps[name] + 1
        m = b1 * store.m[name] + (1 - b1) * g
        v = b2 * store.v[name] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** k)
        vhat = v / (1 - b2 ** k)
        if cfg.kind == "adamw" and cfg.weight_decay:
            p = p * (1 - cfg.lr * cfg.weight_decay)
        store.params[name] = (p - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype, copy=False)
        store.m[name] = m.astype(p.dtype, copy=False)
        store.v[name] = v.astype(p.dtype, copy=False)
        store.steps[name] = k
    return store
