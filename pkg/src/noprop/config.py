"""Training configuration and the ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .optim import OptimizerConfig

METHODS = ("dt", "ct", "fm", "backprop")


@dataclass
class TrainConfig:
    method: str = "dt"
    dataset: str = "blobs"
    data_dir: str = ""
    T: int = 10
    batch_size: int = 128
    epochs: int = 10
    eta: float = 0.1
    optimizer: str = "adamw"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    weight_decay: float = 1e-3
    embedding: str = "one-hot"
    embed_dim: int = 20
    head: str = "softmax"
    radial_sigma: float = 1.0
    seed: int = 0
    parallel: bool = False
    workers: int = 1
    fm_sigma: float = 0.1
    arch: str = "mlp"
    hidden: int = 256
    conv_channels: tuple = (32, 64)
    time_dim: int = 64
    batchnorm: bool = True
    dropout: float = 0.0
    precision: int = 64
    inference_steps: int = 0          # 0: T for dt/backprop, 1000 for ct/fm
    eval_batch: int = 1000
    eval_train: bool = True
    eval_test: bool = True
    train_gamma: bool = True
    gamma_hidden: int = 8
    gamma0: float = -7.0
    gamma1: float = 7.0
    baseline_w_init: float = 0.5
    blobs_n: int = 100
    blobs_classes: int = 2
    blobs_sep: float = 10.0
    blobs_std: float = 1.0
    train_limit: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.embedding not in ("one-hot", "learned", "prototype"):
            raise ConfigError(f"unknown embedding mode {self.embedding!r}")
        if self.head not in ("softmax", "radial"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.method in ("dt", "ct") and not self.eta > 0:
            raise ConfigError("eta must be positive for dt/ct")
        if self.parallel and self.embedding != "one-hot":
            raise ConfigError("parallel block training requires fixed one-hot embeddings")
        if self.parallel and self.method != "dt":
            raise ConfigError("parallel training is only defined for dt")
        if self.T < 1 or self.batch_size < 1 or self.epochs < 0 or self.workers < 1:
            raise ConfigError("T, batch_size and workers must be positive; epochs non-negative")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.method == "fm" and not self.fm_sigma > 0:
            raise ConfigError("fm_sigma must be positive")
        if self.inference_steps < 0:
            raise ConfigError("inference_steps must be non-negative")
        self.optimizer_config()

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(self.optimizer, self.lr, self.beta1, self.beta2, self.opt_eps, self.weight_decay)

    @property
    def dtype(self):
        import numpy as np
        return np.float64 if self.precision == 64 else np.float32

    @property
    def steps_for_inference(self) -> int:
        if self.inference_steps:
            return self.inference_steps
        return self.T if self.method in ("dt", "backprop") else 1000

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)


METHOD_DEFAULTS = {
    "dt": dict(optimizer="adamw", eta=0.1, T=10),
    "backprop": dict(optimizer="adamw", T=10),
    "ct": dict(optimizer="adam", eta=1.0),
    "fm": dict(optimizer="adam"),
}


DATASET_DEFAULTS = {
    "blobs": dict(batch_size=16, epochs=20, hidden=64),
    # full-train-set evaluation every epoch would cost about a third of the run on CPU
    "mnist": dict(arch="conv", precision=32, epochs=5, batch_size=128, eval_train=False),
}


def default_config(method: str = "dt", **overrides) -> TrainConfig:
    """Per-method defaults (optimiser, eta, T), then per-dataset defaults, then ``overrides``."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    values = dict(METHOD_DEFAULTS[method], method=method)
    values.update(DATASET_DEFAULTS.get(overrides.get("dataset", "blobs"), {}))
    values.update(overrides)
    return make_config(values)


def make_config(values: dict) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return TrainConfig(**values)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(key: str, text: str):
    """Convert ``text`` to the type of TrainConfig field ``key``."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    if key not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    default = fields[key].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, val)
    return out


def load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def dump_config_text(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.snapshot().items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(i) for i in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
