"""Class-embedding matrix and the two class-probability heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node
from .errors import ConfigError, DataError, RangeError
from .optim import ParamStore

EMBED_KEY = "embed/W"
MODES = ("one-hot", "learned", "prototype")


@dataclass
class EmbeddingMatrix:
    """Rows are the class embeddings u_y; shape (m, d)."""

    mode: str
    store: ParamStore

    @property
    def rows(self) -> np.ndarray:
        return self.store.params[EMBED_KEY]

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @property
    def trainable(self) -> bool:
        return self.mode != "one-hot"

    def node(self, g: Graph) -> Node:
        return g.param(EMBED_KEY, self.rows) if self.trainable else g.const(self.rows)

    @classmethod
    def one_hot(cls, m: int, dtype=np.float64):
        store = ParamStore()
        store.add(EMBED_KEY, np.eye(m), dtype)
        return cls("one-hot", store)

    @classmethod
    def learned(cls, m: int, d: int, rng: np.random.Generator, dtype=np.float64):
        """Orthonormal rows when d >= m, otherwise Gaussian rows scaled by 1/sqrt(d)."""
        if d >= m:
            q, r = np.linalg.qr(rng.standard_normal((d, m)))
            rows = (q * np.sign(np.diag(r))).T
        else:
            rows = rng.standard_normal((m, d)) / np.sqrt(d)
        store = ParamStore()
        store.add(EMBED_KEY, rows, dtype)
        return cls("learned", store)

    @classmethod
    def prototype(cls, images: np.ndarray, labels: np.ndarray, m: int, dtype=np.float64):
        store = ParamStore()
        store.add(EMBED_KEY, prototype_rows(images, labels, m), dtype)
        return cls("prototype", store)


def embed(W: EmbeddingMatrix, y: int) -> np.ndarray:
    if not 0 <= y < W.m:
        raise RangeError(f"class {y} outside 0..{W.m - 1}")
    return W.rows[y].copy()


def _median_distance_argmin(x: np.ndarray, chunk: int = 1024) -> int:
    """Index of the row with the smallest median distance to the other rows."""
    n = len(x)
    if n <= 2:
        return 0
    x = x.astype(np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    gram = x @ x.T
    best, best_i = np.inf, 0
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d2 = sq[lo:hi, None] + sq[None, :] - 2.0 * gram[lo:hi]
        dist = np.sqrt(np.maximum(d2, 0.0))
        keep = np.ones_like(dist, dtype=bool)
        keep[np.arange(hi - lo), np.arange(lo, hi)] = False
        med = np.median(dist[keep].reshape(hi - lo, n - 1), axis=1)
        i = int(np.argmin(med))
        if med[i] < best:
            best, best_i = med[i], lo + i
    return best_i


def prototype_rows(images: np.ndarray, labels: np.ndarray, m: int) -> np.ndarray:
    """Per class, the flattened image with the smallest median intra-class distance.

    Ties go to the lowest dataset index.
    """
    flat = np.asarray(images).reshape(len(images), -1)
    labels = np.asarray(labels)
    rows = []
    for c in range(m):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            raise DataError(f"class {c} has no examples")
        rows.append(flat[idx[_median_distance_argmin(flat[idx])]])
    return np.stack(rows).astype(np.float64)


def init_prototype(W: EmbeddingMatrix, dataset) -> EmbeddingMatrix:
    rows = prototype_rows(dataset.images, dataset.labels, W.m)
    if rows.shape != W.rows.shape:
        raise ConfigError(f"prototype rows {rows.shape} do not fit embedding {W.rows.shape}")
    W.store.params[EMBED_KEY] = rows.astype(W.rows.dtype)
    W.mode = "prototype"
    return W


# --- heads ------------------------------------------------------------------------


@dataclass
class Head:
    """Linear layer d -> m followed by softmax, or the radial-distance variant."""

    kind: str
    store: ParamStore
    sigma: float = 1.0

    @classmethod
    def init(cls, kind: str, d: int, m: int, rng: np.random.Generator, sigma: float = 1.0, dtype=np.float64,
             rows: np.ndarray | None = None):
        """Random Gaussian weights, or, given embedding ``rows``, weights aligned with them.

        The aligned start scores class k by <z, u_k> / mean ||u||^2, so an
        end-to-end chain is pulled toward u_y for every class from the first
        step; a random start can map two classes to the same embedding and
        leave the chain stuck with them merged.
        """
        if kind not in ("softmax", "radial"):
            raise ConfigError(f"unknown head kind {kind!r}")
        if not sigma > 0:
            raise ConfigError("radial head bandwidth must be positive")
        store = ParamStore()
        if rows is not None:
            rows = np.asarray(rows, dtype=np.float64)
            if rows.shape != (m, d):
                raise ConfigError(f"embedding rows {rows.shape} do not match head ({m}, {d})")
            weight = rows.T / np.mean(np.sum(rows ** 2, axis=1))
        else:
            weight = rng.standard_normal((d, m)) / np.sqrt(d)
        store.add("head/W", weight, dtype)
        store.add("head/b", np.zeros(m), dtype)
        return cls(kind, store, sigma)


def head_scores(g: Graph, head: Head, p: dict[str, Node], z: Node, W: Node | None = None) -> Node:
    """Unnormalised log-probabilities over classes for latent ``z`` (shape (B, d))."""
    logits = g.linear(z, p["head/W"], p["head/b"])
    if head.kind == "softmax":
        return logits
    y_tilde = g.linear(g.softmax(logits), W)
    cross = g.matmul(y_tilde, W, transpose_b=True)
    d2 = g.add(g.sub(g.reshape(g.sq_l2(y_tilde), shape=(-1, 1)), g.scale(cross, c=2.0)), g.sq_l2(W))
    return g.scale(d2, c=-0.5 / head.sigma ** 2)


def _head_probs(head: Head, z, rows=None):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    g = Graph()
    W = g.const(rows) if rows is not None else None
    probs = g.softmax(head_scores(g, head, head.store.nodes(g), g.const(z), W))
    return np.array(probs.value)


def softmax_head(h: Head, z) -> np.ndarray:
    out = _head_probs(h, z)
    return out[0] if np.ndim(z) == 1 else out


def radial_head(h: Head, W: EmbeddingMatrix, z) -> np.ndarray:
    out = _head_probs(h, z, W.rows)
    return out[0] if np.ndim(z) == 1 else out
