"""ModelBundle: every parameter store a training method owns."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .blocks import BlockConfig, init_block
from .config import TrainConfig
from .embeddings import EmbeddingMatrix, Head
from .errors import ConfigError
from .optim import ParamStore
from .schedules import DiscreteSchedule, TrainableGamma, cosine_alpha_bar


@dataclass
class ModelBundle:
    config: TrainConfig
    block_cfg: BlockConfig
    embedding: EmbeddingMatrix
    head: Head
    blocks: dict[str, ParamStore]
    schedule: DiscreteSchedule | None = None
    gamma: TrainableGamma | None = None
    baseline: ParamStore | None = None
    trained: bool = False
    cursor: dict = field(default_factory=lambda: {"epoch": 0})

    @property
    def method(self) -> str:
        return self.config.method

    def block_names(self) -> list[str]:
        return list(self.blocks)

    def stores(self) -> dict[str, ParamStore]:
        out = dict(self.blocks)
        out["head"] = self.head.store
        out["embed"] = self.embedding.store
        if self.gamma is not None:
            out["gamma"] = self.gamma.store
        if self.baseline is not None:
            out["baseline"] = self.baseline
        return out


def block_kind(method: str) -> str:
    return {"dt": "dt", "backprop": "dt", "ct": "ct", "fm": "fm"}[method]


def make_embedding(cfg: TrainConfig, m: int, dataset=None) -> EmbeddingMatrix:
    dtype = cfg.dtype
    if cfg.embedding == "one-hot":
        return EmbeddingMatrix.one_hot(m, dtype)
    if cfg.embedding == "learned":
        return EmbeddingMatrix.learned(m, cfg.embed_dim, rngmod.stream(cfg.seed, "init", "embed"), dtype)
    if dataset is None:
        raise ConfigError("prototype embeddings need the training set")
    return EmbeddingMatrix.prototype(dataset.images, dataset.labels, m, dtype)


def build_bundle(cfg: TrainConfig, input_shape: tuple, m: int, dataset=None) -> ModelBundle:
    """Fresh, seeded parameters for ``cfg.method``; every store is initialised from its own stream."""
    dtype = cfg.dtype
    emb = make_embedding(cfg, m, dataset)
    bcfg = BlockConfig(block_kind(cfg.method), tuple(input_shape), emb.d, m, arch=cfg.arch, hidden=cfg.hidden,
                       conv_channels=tuple(cfg.conv_channels), time_dim=cfg.time_dim, batchnorm=cfg.batchnorm,
                       dropout=cfg.dropout)
    head = Head.init(cfg.head, emb.d, m, rngmod.stream(cfg.seed, "init", "head"), cfg.radial_sigma, dtype,
                     rows=emb.rows)
    bundle_kwargs = {}
    if cfg.method in ("dt", "backprop"):
        blocks = {f"block{t}": init_block(bcfg, f"block{t}", rngmod.stream(cfg.seed, "init", "block", t), dtype)
                  for t in range(1, cfg.T + 1)}
        bundle_kwargs["schedule"] = cosine_alpha_bar(cfg.T)
    else:
        blocks = {"block": init_block(bcfg, "block", rngmod.stream(cfg.seed, "init", "block", 0), dtype)}
    if cfg.method == "ct":
        bundle_kwargs["gamma"] = TrainableGamma.init(cfg.gamma0, cfg.gamma1, cfg.gamma_hidden, dtype)
    if cfg.method == "backprop":
        base = ParamStore()
        for t in range(1, cfg.T + 1):
            base.add(f"baseline/w{t}", cfg.baseline_w_init, dtype)
        bundle_kwargs["baseline"] = base
    return ModelBundle(cfg, bcfg, emb, head, blocks, **bundle_kwargs)
