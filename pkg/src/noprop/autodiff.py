"""Block-scoped reverse-mode differentiation over numpy arrays.

A :class:`Graph` is an append-only tape.  Leaves are parameters (named) or
constants; every other node is the result of one primitive.  ``backward``
walks the tape in reverse and returns gradients keyed by parameter name.

Arrays are channel-last (``B, H, W, C``) wherever spatial layout matters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NonFiniteError, ShapeError, UnsupportedOp


class Node:
    __slots__ = ("id", "op", "inputs", "value", "saved", "attrs", "name", "requires_grad")

    def __init__(self, id, op, inputs, value, saved=None, attrs=None, name=None, requires_grad=False):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.saved = saved
        self.attrs = attrs or {}
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.value.shape})"


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- primitives ---------------------------------------------------------------
# Each primitive is a pair (forward, backward).
#   forward(graph, xs, attrs) -> (out, saved)
#   backward(g, xs, out, saved, attrs, needs) -> sequence of grads (None allowed)


def _linear_fwd(graph, xs, attrs):
    x, w = xs[0], xs[1]
    b = xs[2] if len(xs) > 2 else None
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x @ w
    if b is not None:
        out = out + b
    return out, None


def _linear_bwd(g, xs, out, saved, attrs, needs):
    x, w = xs[0], xs[1]
    g2 = g.reshape(-1, w.shape[1])
    x2 = x.reshape(-1, w.shape[0])
    dx = (g2 @ w.T).reshape(x.shape) if needs[0] else None
    dw = x2.T @ g2 if needs[1] else None
    grads = [dx, dw]
    if len(xs) > 2:
        grads.append(g2.sum(axis=0) if needs[2] else None)
    return grads


def _matmul_fwd(graph, xs, attrs):
    a, b = xs
    tb = attrs.get("transpose_b", False)
    bb = b.T if tb else b
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != bb.shape[0]:
        raise ShapeError(f"matmul: {a.shape} incompatible with {b.shape} (transpose_b={tb})")
    return a @ bb, None


def _matmul_bwd(g, xs, out, saved, attrs, needs):
    a, b = xs
    tb = attrs.get("transpose_b", False)
    bb = b.T if tb else b
    da = g @ bb.T if needs[0] else None
    db = None
    if needs[1]:
        db = a.T @ g
        if tb:
            db = db.T
    return da, db


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _conv2d_fwd(graph, xs, attrs):
    x, w = xs[0], xs[1]
    b = xs[2] if len(xs) > 2 else None
    stride = attrs.get("stride", 1)
    pad = attrs.get("pad", 0)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    kh, kw, c, o = w.shape
    B, H, W, _ = x.shape
    ho, wo = _conv_out(H, kh, stride, pad), _conv_out(W, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * ho * wo, kh * kw * c)
    out = cols @ w.reshape(-1, o)
    if b is not None:
        out += b
    return out.reshape(B, ho, wo, o), cols


def _conv2d_bwd(g, xs, out, cols, attrs, needs):
    x, w = xs[0], xs[1]
    stride = attrs.get("stride", 1)
    pad = attrs.get("pad", 0)
    kh, kw, c, o = w.shape
    B, ho, wo, _ = g.shape
    g2 = g.reshape(-1, o)
    dx = dw = db = None
    if needs[1]:
        dw = (cols.T @ g2).reshape(w.shape)
    if len(xs) > 2 and needs[2]:
        db = g2.sum(axis=0)
    if needs[0]:
        dcols = (g2 @ w.reshape(-1, o).T).reshape(B, ho, wo, kh, kw, c)
        H, W = x.shape[1], x.shape[2]
        dxp = np.zeros((B, H + 2 * pad, W + 2 * pad, c), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pad:pad + H, pad:pad + W, :] if pad else dxp
    grads = [dx, dw]
    if len(xs) > 2:
        grads.append(db)
    return grads


def _relu_fwd(graph, xs, attrs):
    return np.maximum(xs[0], 0), None


def _relu_bwd(g, xs, out, saved, attrs, needs):
    return (g * (xs[0] > 0),)


def _tanh_fwd(graph, xs, attrs):
    return np.tanh(xs[0]), None


def _tanh_bwd(g, xs, out, saved, attrs, needs):
    return (g * (1.0 - out * out),)


def _sigmoid_fwd(graph, xs, attrs):
    return _sigmoid(xs[0]), None


def _sigmoid_bwd(g, xs, out, saved, attrs, needs):
    return (g * out * (1.0 - out),)


def _softplus_fwd(graph, xs, attrs):
    return np.logaddexp(0.0, xs[0]), None


def _softplus_bwd(g, xs, out, saved, attrs, needs):
    return (g * _sigmoid(xs[0]),)


def _exp_fwd(graph, xs, attrs):
    return np.exp(xs[0]), None


def _exp_bwd(g, xs, out, saved, attrs, needs):
    return (g * out,)


def _log_fwd(graph, xs, attrs):
    x = xs[0]
    if np.any(x <= 0):
        raise NonFiniteError("log: non-positive input")
    return np.log(x), None


def _log_bwd(g, xs, out, saved, attrs, needs):
    return (g / xs[0],)


def _sqrt_fwd(graph, xs, attrs):
    x = xs[0]
    if np.any(x < 0):
        raise NonFiniteError("sqrt: negative input")
    return np.sqrt(x), None


def _sqrt_bwd(g, xs, out, saved, attrs, needs):
    return (g * 0.5 / out,)


def _batchnorm_fwd(graph, xs, attrs):
    x, gamma, beta = xs
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"batchnorm: affine {gamma.shape}/{beta.shape} vs input {x.shape}")
    eps = attrs.get("eps", 1e-6)
    axes = tuple(range(x.ndim - 1))
    if graph.training:
        n = x.size // x.shape[-1]
        if n < 2:
            raise ShapeError(f"batchnorm: train mode needs more than one value per feature, got {x.shape}")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        key = attrs.get("state_key")
        if key is not None:
            mom = attrs.get("momentum", 0.1)
            rm, rv = attrs["running_mean"], attrs["running_var"]
            graph.state_updates[key + "/running_mean"] = (1 - mom) * rm + mom * mu
            graph.state_updates[key + "/running_var"] = (1 - mom) * rv + mom * var * n / (n - 1)
    else:
        mu, var = attrs["running_mean"], attrs["running_var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def _batchnorm_bwd(g, xs, out, saved, attrs, needs):
    x, gamma, _ = xs
    xhat, inv_std = saved
    axes = tuple(range(x.ndim - 1))
    dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
    dbeta = g.sum(axis=axes) if needs[2] else None
    dx = None
    if needs[0]:
        dxhat = g * gamma
        if attrs.get("_training"):
            n = x.size // x.shape[-1]
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv_std
    return dx, dgamma, dbeta


def _softmax_fwd(graph, xs, attrs):
    x = xs[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, xs, out, saved, attrs, needs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(graph, xs, attrs):
    x = xs[0]
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    return x - lse, None


def _log_softmax_bwd(g, xs, out, saved, attrs, needs):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _concat_fwd(graph, xs, attrs):
    axis = attrs.get("axis", -1)
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: {ref.shape} and {x.shape} differ off axis {axis}")
    return np.concatenate(xs, axis=ax), None


def _concat_bwd(g, xs, out, saved, attrs, needs):
    ax = attrs.get("axis", -1) % g.ndim
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return np.split(g, bounds, axis=ax)


def _add_fwd(graph, xs, attrs):
    _check_broadcast("add", *xs)
    return xs[0] + xs[1], None


def _add_bwd(g, xs, out, saved, attrs, needs):
    return [_unbroadcast(g, x.shape) if n else None for x, n in zip(xs, needs)]


def _sub_fwd(graph, xs, attrs):
    _check_broadcast("sub", *xs)
    return xs[0] - xs[1], None


def _sub_bwd(g, xs, out, saved, attrs, needs):
    a, b = xs
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None)


def _mul_fwd(graph, xs, attrs):
    _check_broadcast("mul", *xs)
    return xs[0] * xs[1], None


def _mul_bwd(g, xs, out, saved, attrs, needs):
    a, b = xs
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _div_fwd(graph, xs, attrs):
    _check_broadcast("div", *xs)
    return xs[0] / xs[1], None


def _div_bwd(g, xs, out, saved, attrs, needs):
    a, b = xs
    return (_unbroadcast(g / b, a.shape) if needs[0] else None,
            _unbroadcast(-g * out / b, b.shape) if needs[1] else None)


def _scale_fwd(graph, xs, attrs):
    return xs[0] * attrs["c"], None


def _scale_bwd(g, xs, out, saved, attrs, needs):
    return (g * attrs["c"],)


def _sum_fwd(graph, xs, attrs):
    return np.sum(xs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None


def _sum_bwd(g, xs, out, saved, attrs, needs):
    x = xs[0]
    axis = attrs.get("axis")
    if axis is not None and not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_fwd(graph, xs, attrs):
    return np.mean(xs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None


def _mean_bwd(g, xs, out, saved, attrs, needs):
    x = xs[0]
    axis = attrs.get("axis")
    count = x.size // max(np.size(out), 1) if axis is not None else x.size
    if axis is not None and not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / count, x.shape).copy(),)


def _sq_l2_fwd(graph, xs, attrs):
    x = xs[0]
    return np.einsum("...i,...i->...", x, x), None


def _sq_l2_bwd(g, xs, out, saved, attrs, needs):
    return (2.0 * xs[0] * np.expand_dims(g, -1),)


def _cross_entropy_fwd(graph, xs, attrs):
    logits = xs[0]
    labels = np.asarray(attrs["labels"])
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    m = logits.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[:, 0]
    return lse - logits[np.arange(len(labels)), labels], lse


def _cross_entropy_bwd(g, xs, out, lse, attrs, needs):
    logits = xs[0]
    labels = np.asarray(attrs["labels"])
    p = np.exp(logits - lse[:, None])
    p[np.arange(len(labels)), labels] -= 1.0
    return (p * g[:, None],)


def _time_freqs(attrs, dtype):
    half = attrs["dim"] // 2
    return attrs.get("scale", 1000.0) * np.exp(
        -np.log(attrs.get("max_period", 10000.0)) * np.arange(half, dtype=dtype) / half)


def _time_embedding_fwd(graph, xs, attrs):
    t = xs[0]
    if t.ndim != 1 or attrs["dim"] % 2:
        raise ShapeError(f"time_embedding: needs 1-d times and even dim, got {t.shape}, dim={attrs['dim']}")
    args = t[:, None] * _time_freqs(attrs, t.dtype)
    return np.concatenate([np.sin(args), np.cos(args)], axis=1), args


def _time_embedding_bwd(g, xs, out, args, attrs, needs):
    half = attrs["dim"] // 2
    f = _time_freqs(attrs, g.dtype)
    return (((g[:, :half] * np.cos(args) - g[:, half:] * np.sin(args)) * f).sum(axis=1),)


def _max_pool2d_fwd(graph, xs, attrs):
    x = xs[0]
    s = attrs.get("size", 2)
    if x.ndim != 4 or x.shape[1] % s or x.shape[2] % s:
        raise ShapeError(f"max_pool2d: input {x.shape} not divisible by window {s}")
    B, H, W, C = x.shape
    xt = x.reshape(B, H // s, s, W // s, s, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // s, W // s, C, s * s)
    idx = xt.argmax(axis=-1)
    return np.take_along_axis(xt, idx[..., None], axis=-1)[..., 0], idx


def _max_pool2d_bwd(g, xs, out, idx, attrs, needs):
    x = xs[0]
    s = attrs.get("size", 2)
    B, H, W, C = x.shape
    gt = np.zeros((B, H // s, W // s, C, s * s), dtype=g.dtype)
    np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
    return (gt.reshape(B, H // s, W // s, C, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape),)


def _dropout_fwd(graph, xs, attrs):
    x = xs[0]
    keep = attrs["keep_prob"]
    if not graph.training or keep >= 1.0:
        return x, None
    mask = (attrs["stream"].random(x.shape) < keep).astype(x.dtype) / keep
    return x * mask, mask


def _dropout_bwd(g, xs, out, mask, attrs, needs):
    return (g if mask is None else g * mask,)


def _reshape_fwd(graph, xs, attrs):
    x = xs[0]
    try:
        return x.reshape(attrs["shape"]), None
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {attrs['shape']}") from None


def _reshape_bwd(g, xs, out, saved, attrs, needs):
    return (g.reshape(xs[0].shape),)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "linear": (_linear_fwd, _linear_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "softplus": (_softplus_fwd, _softplus_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "log": (_log_fwd, _log_bwd),
    "sqrt": (_sqrt_fwd, _sqrt_bwd),
    "batchnorm": (_batchnorm_fwd, _batchnorm_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "log_softmax": (_log_softmax_fwd, _log_softmax_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "div": (_div_fwd, _div_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "sq_l2": (_sq_l2_fwd, _sq_l2_bwd),
    "cross_entropy": (_cross_entropy_fwd, _cross_entropy_bwd),
    "time_embedding": (_time_embedding_fwd, _time_embedding_bwd),
    "max_pool2d": (_max_pool2d_fwd, _max_pool2d_bwd),
    "dropout": (_dropout_fwd, _dropout_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
}


class Graph:
    """Append-only record of the primitives applied while building one loss.

    ``training`` selects batchnorm/dropout behaviour for every node in the
    graph.  Batchnorm running-stat updates computed in train mode are
    collected in ``state_updates``; the caller decides whether to commit them.
    """

    def __init__(self, training: bool = False, dtype=np.float64, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.training = training
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.params: dict[str, Node] = {}
        self.state_updates: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.nodes)

    def __getattr__(self, name):
        if name in PRIMITIVES:
            return partial(self.apply, name)
        raise AttributeError(name)

    def _append(self, op, inputs, value, saved=None, attrs=None, name=None, requires_grad=False):
        if isinstance(value, np.ndarray):
            value.flags.writeable = False
        node = Node(len(self.nodes), op, inputs, value, saved, attrs, name, requires_grad)
        self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Node:
        """Leaf for trainable parameter ``name``; requesting a name twice returns one node."""
        if name in self.params:
            return self.params[name]
        value = np.array(value, dtype=self.dtype)
        node = self._append("param", (), value, name=name, requires_grad=True)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        return self._append("const", (), np.array(value, dtype=self.dtype))

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        try:
            fwd = PRIMITIVES[op][0]
        except KeyError:
            raise UnsupportedOp(op) from None
        for x in inputs:
            if not isinstance(x, Node) or x.id >= len(self.nodes) or self.nodes[x.id] is not x:
                raise ContractError(f"{op}: inputs must be nodes of this graph")
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):  # reported below instead
            out, saved = fwd(self, [x.value for x in inputs], attrs)
        out = np.asarray(out, dtype=self.dtype)
        if self.check_finite and not np.isfinite(out).all():
            raise NonFiniteError(f"{op}: produced non-finite values")
        if op == "batchnorm":
            attrs = dict(attrs, _training=self.training)
        req = any(x.requires_grad for x in inputs)
        return self._append(op, tuple(x.id for x in inputs), out, saved, attrs, requires_grad=req)

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` with respect to every parameter leaf."""
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.pop(node.id, None) if node.op not in ("param", "const") else None
            if g is None or not node.requires_grad:
                continue
            bwd = PRIMITIVES[node.op][1]
            ins = [self.nodes[i] for i in node.inputs]
            needs = [x.requires_grad for x in ins]
            gins = bwd(g, [x.value for x in ins], node.value, node.saved, node.attrs, needs)
            for x, gi, need in zip(ins, gins, needs):
                if not need or gi is None:
                    continue
                if x.id in grads:
                    grads[x.id] = grads[x.id] + gi
                else:
                    grads[x.id] = gi
        return {name: np.asarray(grads.get(node.id, np.zeros_like(node.value)), dtype=self.dtype).reshape(node.value.shape)
                for name, node in self.params.items()}


def forward_eval(graph: Graph, primitive: str, inputs, **attrs) -> Node:
    return graph.apply(primitive, *inputs, **attrs)


def backward_grads(graph: Graph, loss: Node) -> dict[str, np.ndarray]:
    return graph.backward(loss)


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-5

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def relative_error(a, b, floor: float = 1e-6) -> float:
    """Norm-wise relative error; ``floor`` keeps exactly-zero gradients from dividing noise by noise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def grad_check(build: Callable[[Graph, dict[str, Node]], Node], params: dict[str, np.ndarray],
               tolerance: float = 1e-5, h: float = 1e-6, training: bool = True) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``build(graph, param_nodes)`` must construct the same scalar loss on every
    call; any randomness inside it has to come from a stream it re-creates.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def run(values):
        g = Graph(training=training)
        nodes = {k: g.param(k, v) for k, v in values.items()}
        return g, build(g, nodes)

    g, loss = run(params)
    analytic = g.backward(loss)
    report = GradCheckReport(0.0, tolerance=tolerance)
    for name, value in params.items():
        numeric = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus = dict(params)
            minus = dict(params)
            vp, vm = value.copy(), value.copy()
            vp[idx] += h
            vm[idx] -= h
            plus[name], minus[name] = vp, vm
            numeric[idx] = (float(run(plus)[1].value) - float(run(minus)[1].value)) / (2 * h)
        err = relative_error(analytic[name], numeric)
        report.per_param[name] = err
        report.max_rel_err = max(report.max_rel_err, err)
    return report
