"""Denoising blocks and the flow block.

Each block maps (z, x[, t]) to class logits through separate image, label
and (optionally) time pathways that are concatenated and mixed by a small
fully-connected stack.  The output is then

* ``softmax(logits) @ W_embed`` for the diffusion blocks (a convex
  combination of class embeddings), or
* ``logits @ W_embed`` for the flow block (any vector in the row space).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node
from .errors import ConfigError, ShapeError
from .optim import ParamStore


@dataclass(frozen=True)
class BlockConfig:
    kind: str                      # dt | ct | fm
    input_shape: tuple
    d: int
    m: int
    arch: str = "mlp"              # mlp | conv
    hidden: int = 256
    conv_channels: tuple = (32, 64)
    time_dim: int = 64
    batchnorm: bool = True
    dropout: float = 0.0
    bn_eps: float = 1e-6
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in ("dt", "ct", "fm"):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.arch not in ("mlp", "conv"):
            raise ConfigError(f"unknown block arch {self.arch!r}")
        if self.arch == "conv" and len(self.input_shape) != 3:
            raise ConfigError(f"conv blocks need (H, W, C) inputs, got {self.input_shape}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def timed(self) -> bool:
        return self.kind != "dt"

    @property
    def use_bn(self) -> bool:
        # continuous-time models carry no batchnorm
        return self.batchnorm and self.kind == "dt"

    @property
    def label_as_image(self) -> bool:
        return self.arch == "conv" and self.d == math.prod(self.input_shape)


def _dense_init(store, name, fan_in, fan_out, rng, gain=2.0, dtype=np.float64, bias=True):
    store.add(name + "/w", rng.standard_normal((fan_in, fan_out)) * math.sqrt(gain / fan_in), dtype)
    if bias:  # a bias feeding batchnorm is cancelled by the mean subtraction, so it is omitted
        store.add(name + "/b", np.zeros(fan_out), dtype)


def _bn_init(store, name, width, dtype):
    store.add(name + "/gamma", np.ones(width), dtype)
    store.add(name + "/beta", np.zeros(width), dtype)
    store.add_buffer(name + "/running_mean", np.zeros(width), dtype)
    store.add_buffer(name + "/running_var", np.ones(width), dtype)


def _conv_module_init(store, name, cfg, rng, dtype):
    h, w, c = cfg.input_shape
    for i, co in enumerate(cfg.conv_channels):
        store.add(f"{name}/conv{i}/w", rng.standard_normal((3, 3, c, co)) * math.sqrt(2.0 / (9 * c)), dtype)
        if not cfg.use_bn:
            store.add(f"{name}/conv{i}/b", np.zeros(co), dtype)
        if cfg.use_bn:
            _bn_init(store, f"{name}/conv{i}/bn", co, dtype)
        c = co
        h, w = h // 2, w // 2
    _dense_init(store, f"{name}/fc", h * w * c, cfg.hidden, rng, dtype=dtype, bias=not cfg.use_bn)
    if cfg.use_bn:
        _bn_init(store, f"{name}/fc/bn", cfg.hidden, dtype)


def init_block(cfg: BlockConfig, prefix: str, rng: np.random.Generator, dtype=np.float64) -> ParamStore:
    """Fresh parameters for one block, every name under ``prefix``."""
    s = ParamStore()
    hdim = cfg.hidden
    if cfg.arch == "conv":
        _conv_module_init(s, f"{prefix}/img", cfg, rng, dtype)
    else:
        _dense_init(s, f"{prefix}/img/fc0", math.prod(cfg.input_shape), hdim, rng, dtype=dtype, bias=not cfg.use_bn)
        _dense_init(s, f"{prefix}/img/fc1", hdim, hdim, rng, dtype=dtype)
        if cfg.use_bn:
            _bn_init(s, f"{prefix}/img/fc0/bn", hdim, dtype)
    if cfg.label_as_image:
        _conv_module_init(s, f"{prefix}/lab", cfg, rng, dtype)
    else:
        _dense_init(s, f"{prefix}/lab/fc0", cfg.d, hdim, rng, dtype=dtype, bias=not cfg.use_bn)
        _dense_init(s, f"{prefix}/lab/fc1", hdim, hdim, rng, dtype=dtype)
        if cfg.use_bn:
            _bn_init(s, f"{prefix}/lab/fc0/bn", hdim, dtype)
    width = 2 * hdim
    if cfg.timed:
        _dense_init(s, f"{prefix}/time/fc", cfg.time_dim, hdim, rng, dtype=dtype)
        width += hdim
    _dense_init(s, f"{prefix}/mix/fc0", width, hdim, rng, dtype=dtype, bias=not cfg.use_bn)
    if cfg.use_bn:
        _bn_init(s, f"{prefix}/mix/fc0/bn", hdim, dtype)
    _dense_init(s, f"{prefix}/mix/fc1", hdim, hdim // 2, rng, dtype=dtype)
    _dense_init(s, f"{prefix}/mix/out", hdim // 2, cfg.m, rng, gain=1.0, dtype=dtype)
    return s


class _Builder:
    """Shared state while one block is written into a graph."""

    def __init__(self, g: Graph, cfg: BlockConfig, store: ParamStore, stream=None):
        self.g, self.cfg, self.store, self.stream = g, cfg, store, stream
        self.p = store.nodes(g)

    def bn(self, name, h):
        if not self.cfg.use_bn:
            return h
        buf = self.store.buffers
        return self.g.batchnorm(h, self.p[name + "/gamma"], self.p[name + "/beta"],
                                eps=self.cfg.bn_eps, momentum=self.cfg.bn_momentum, state_key=name,
                                running_mean=buf[name + "/running_mean"], running_var=buf[name + "/running_var"])

    def dense(self, name, h, bn=False, act=True):
        g = self.g
        wb = [self.p[name + "/w"]] + ([self.p[name + "/b"]] if name + "/b" in self.p else [])
        h = g.linear(h, *wb)
        if bn:
            h = self.bn(name + "/bn", h)
        return g.relu(h) if act else h

    def conv_module(self, name, x):
        g = self.g
        h = x
        for i in range(len(self.cfg.conv_channels)):
            wb = [self.p[f"{name}/conv{i}/w"]] + ([self.p[f"{name}/conv{i}/b"]] if f"{name}/conv{i}/b" in self.p else [])
            h = g.conv2d(h, *wb, stride=1, pad=1)
            h = self.bn(f"{name}/conv{i}/bn", h)
            h = g.max_pool2d(g.relu(h), size=2)
        h = g.reshape(h, shape=(h.shape[0], -1))
        return self.dense(f"{name}/fc", h, bn=True)

    def dropout(self, h):
        if self.cfg.dropout > 0 and self.g.training:
            if self.stream is None:
                raise ConfigError("dropout in train mode needs a random stream")
            return self.g.dropout(h, keep_prob=1.0 - self.cfg.dropout, stream=self.stream)
        return h


def block_logits(g: Graph, cfg: BlockConfig, store: ParamStore, prefix: str, z: Node, x: Node,
                 t: Node | None = None, stream=None) -> Node:
    b = _Builder(g, cfg, store, stream)
    B = x.shape[0]
    if z.shape != (B, cfg.d):
        raise ShapeError(f"block: latent {z.shape} does not match (batch, d) = {(B, cfg.d)}")
    if tuple(x.shape[1:]) != tuple(cfg.input_shape):
        raise ShapeError(f"block: input {x.shape} does not match configured {cfg.input_shape}")
    if cfg.arch == "conv":
        hx = b.conv_module(f"{prefix}/img", x)
    else:
        hx = b.dense(f"{prefix}/img/fc0", g.reshape(x, shape=(B, -1)), bn=True)
        hx = b.dense(f"{prefix}/img/fc1", hx)
    if cfg.label_as_image:
        hz = b.conv_module(f"{prefix}/lab", g.reshape(z, shape=(B,) + tuple(cfg.input_shape)))
    else:
        hz0 = b.dense(f"{prefix}/lab/fc0", z, bn=True)
        hz = g.add(b.dense(f"{prefix}/lab/fc1", hz0), hz0)
    parts = [b.dropout(hx), hz]
    if cfg.timed:
        if t is None or t.shape != (B,):
            raise ShapeError(f"block: time input must have shape {(B,)}")
        parts.append(b.dense(f"{prefix}/time/fc", g.time_embedding(t, dim=cfg.time_dim)))
    h = g.concat(*parts, axis=1)
    h = b.dense(f"{prefix}/mix/fc0", h, bn=True)
    h = b.dense(f"{prefix}/mix/fc1", h)
    return b.dense(f"{prefix}/mix/out", h, act=False)


def block_forward_dt(g, cfg, store, prefix, z, x, W, stream=None) -> Node:
    """u_hat(z_prev, x): softmax-weighted combination of embedding rows."""
    return g.linear(g.softmax(block_logits(g, cfg, store, prefix, z, x, None, stream)), W)


def block_forward_ct(g, cfg, store, prefix, z, x, t, W, stream=None) -> Node:
    return g.linear(g.softmax(block_logits(g, cfg, store, prefix, z, x, t, stream)), W)


def flow_forward(g, cfg, store, prefix, z, x, t, W, stream=None) -> Node:
    """v(z, x, t): logits used directly as weights on embedding rows."""
    return g.linear(block_logits(g, cfg, store, prefix, z, x, t, stream), W)
