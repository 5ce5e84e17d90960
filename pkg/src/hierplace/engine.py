"""A small tape-based reverse-mode engine with just the ops the model needs.

Values are numpy arrays.  An op called with a :class:`Tape` records a closure
that, when the tape is replayed backwards, pushes the output gradient into its
inputs.  Called with ``tape=None`` an op only computes the forward value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DivergenceError


class Node:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


class Parameter(Node):
    __slots__ = ("name", "adam_m", "adam_v", "step_count")

    def __init__(self, value, name: str = ""):
        value = np.ascontiguousarray(value)
        super().__init__(value)
        self.name = name
        self.grad = np.zeros_like(value)
        self.adam_m = np.zeros_like(value)
        self.adam_v = np.zeros_like(value)
        self.step_count = 0

    def zero_grad(self):
        self.grad.fill(0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


class Tape:
    def __init__(self):
        self._backward = []

    def record(self, fn):
        self._backward.append(fn)

    def backward(self, loss: Node):
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self._backward):
            fn()
        self._backward.clear()


def _acc(node: Node, g, fresh: bool = False):
    if isinstance(node, Parameter):
        node.grad += g
    elif node.grad is None:
        node.grad = g if fresh else np.array(g, copy=True)
    else:
        node.grad += g


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(np.asarray(x))


# ---------------------------------------------------------------------------
# ops

def embedding_lookup(table: Parameter, ids, tape: Tape | None = None) -> Node:
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.value.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"embedding id out of range [0, {n_rows})")
    out = Node(table.value[ids])
    if tape is not None:
        def backward():
            if out.grad is not None:
                g = np.ascontiguousarray(out.grad.reshape(-1, table.value.shape[1]))
                kernels.scatter_add_rows(table.grad, ids.ravel(), g)
        tape.record(backward)
    return out


def concat(nodes, axis: int = -1, tape: Tape | None = None) -> Node:
    nodes = [_as_node(n) for n in nodes]
    out = Node(np.concatenate([n.value for n in nodes], axis=axis))
    if tape is not None:
        widths = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]

        def backward():
            if out.grad is None:
                return
            for n, g in zip(nodes, np.split(out.grad, widths, axis=axis)):
                if not isinstance(n, Parameter) and n.grad is None:
                    n.grad = np.ascontiguousarray(g)
                else:
                    _acc(n, g)
        tape.record(backward)
    return out


def reshape(x: Node, shape, tape: Tape | None = None) -> Node:
    out = Node(x.value.reshape(shape))
    if tape is not None:
        def backward():
            if out.grad is not None:
                _acc(x, out.grad.reshape(x.value.shape))
        tape.record(backward)
    return out


def gather_rows(x: Node, rows, tape: Tape | None = None) -> Node:
    rows = np.asarray(rows, dtype=np.int64)
    out = Node(x.value[rows])
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g = np.zeros_like(x.value)
            g[rows] = out.grad  # rows are unique
            _acc(x, g, fresh=True)
        tape.record(backward)
    return out


def affine(x: Node, weight: Node, bias: Node | None, tape: Tape | None = None,
           transpose: bool = False) -> Node:
    """``x @ W + b``; with ``transpose`` the weight is used as ``W.T``."""
    x = _as_node(x)
    W = weight.value.T if transpose else weight.value
    if x.value.ndim != 2 or x.value.shape[1] != W.shape[0]:
        raise ValueError(f"affine shape mismatch: {x.value.shape} @ {W.shape}")
    if bias is not None and bias.value.shape != (W.shape[1],):
        raise ValueError(f"bias shape {bias.value.shape} != ({W.shape[1]},)")
    y = x.value @ W
    if bias is not None:
        y += bias.value
    out = Node(y)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            if transpose:
                _acc(weight, g.T @ x.value, fresh=True)
            else:
                _acc(weight, x.value.T @ g, fresh=True)
            if bias is not None:
                _acc(bias, g.sum(axis=0), fresh=True)
            _acc(x, g @ W.T, fresh=True)
        tape.record(backward)
    return out


def tanh(x: Node, tape: Tape | None = None) -> Node:
    out = Node(np.tanh(x.value))
    if tape is not None:
        def backward():
            if out.grad is not None:
                _acc(x, out.grad * (1.0 - out.value * out.value), fresh=True)
        tape.record(backward)
    return out


@dataclass
class LstmParams:
    w_in: Parameter   # (In, 4H)
    w_rec: Parameter  # (H, 4H)
    bias: Parameter   # (4H,)

    @property
    def hidden(self) -> int:
        return self.w_rec.value.shape[0]

    def parameters(self):
        return [self.w_in, self.w_rec, self.bias]

    @classmethod
    def init(cls, n_in: int, hidden: int, rng, dtype=np.float32, name: str = "lstm"):
        lim_in = 1.0 / math.sqrt(n_in)
        lim_rec = 1.0 / math.sqrt(hidden)
        return cls(
            Parameter(rng.uniform(-lim_in, lim_in, (n_in, 4 * hidden)).astype(dtype), f"{name}.w_in"),
            Parameter(rng.uniform(-lim_rec, lim_rec, (hidden, 4 * hidden)).astype(dtype), f"{name}.w_rec"),
            Parameter(np.zeros(4 * hidden, dtype=dtype), f"{name}.bias"),
        )


@dataclass
class LstmState:
    hidden: Node
    cell: Node

    @classmethod
    def zeros(cls, batch: int, size: int, dtype=np.float32):
        return cls(Node(np.zeros((batch, size), dtype)), Node(np.zeros((batch, size), dtype)))


def lstm_step(x: Node, state: LstmState, params: LstmParams, tape: Tape | None = None):
    """One LSTM cell step; returns ``(output, new_state)`` with output = new hidden."""
    H = params.hidden
    h, c = state.hidden, state.cell
    if x.value.shape[1] != params.w_in.value.shape[0] or h.value.shape[1] != H or c.value.shape != h.value.shape:
        raise ValueError("lstm_step shape mismatch")
    z = x.value @ params.w_in.value + h.value @ params.w_rec.value + params.bias.value
    acts, c_new, tc, h_new = kernels.lstm_forward(np.ascontiguousarray(z), np.ascontiguousarray(c.value))
    h_out, c_out = Node(h_new), Node(c_new)
    if tape is not None:
        def backward():
            if h_out.grad is None and c_out.grad is None:
                return
            dh = h_out.grad if h_out.grad is not None else np.zeros_like(h_new)
            dz, dc_prev = kernels.lstm_backward(acts, np.ascontiguousarray(c.value), tc, np.ascontiguousarray(dh),
                                                None if c_out.grad is None else np.ascontiguousarray(c_out.grad))
            _acc(params.w_in, x.value.T @ dz, fresh=True)
            _acc(params.w_rec, h.value.T @ dz, fresh=True)
            _acc(params.bias, dz.sum(axis=0), fresh=True)
            _acc(x, dz @ params.w_in.value.T, fresh=True)
            _acc(h, dz @ params.w_rec.value.T, fresh=True)
            _acc(c, dc_prev, fresh=True)
        tape.record(backward)
    return h_out, LstmState(h_out, c_out)


def lstm_layer(xs: Node, params: LstmParams, tape: Tape | None = None) -> Node:
    """Run an LSTM over ``xs`` of shape ``(T, B, In)`` from a zero state.

    Returns all hidden states ``(T, B, H)``.  Equivalent to chaining
    :func:`lstm_step`, but input projections and weight gradients are done as
    single matrix products over all steps.
    """
    T, B, n_in = xs.value.shape
    H = params.hidden
    if n_in != params.w_in.value.shape[0]:
        raise ValueError(f"lstm input width {n_in} != {params.w_in.value.shape[0]}")
    dtype = xs.value.dtype
    x2 = xs.value.reshape(T * B, n_in)
    zx = (x2 @ params.w_in.value + params.bias.value).reshape(T, B, 4 * H)
    w_rec = params.w_rec.value
    acts = np.empty((T, B, 4 * H), dtype)
    cs = np.empty((T + 1, B, H), dtype)
    hs = np.empty((T + 1, B, H), dtype)
    tcs = np.empty((T, B, H), dtype)
    cs[0] = 0
    hs[0] = 0
    for t in range(T):
        z = zx[t] + hs[t] @ w_rec
        a, c, tc, h = kernels.lstm_forward(z, cs[t])
        acts[t], cs[t + 1], tcs[t], hs[t + 1] = a, c, tc, h
    out = Node(hs[1:])
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            dH = out.grad
            dZ = np.empty((T, B, 4 * H), dtype)
            dh_next = np.zeros((B, H), dtype)
            dc_next = None
            for t in range(T - 1, -1, -1):
                dh = dH[t] + dh_next
                dz, dc_next = kernels.lstm_backward(acts[t], cs[t], tcs[t], dh, dc_next)
                dZ[t] = dz
                dh_next = dz @ w_rec.T
            dZ2 = dZ.reshape(T * B, 4 * H)
            _acc(params.w_in, x2.T @ dZ2, fresh=True)
            _acc(params.w_rec, hs[:-1].reshape(T * B, H).T @ dZ2, fresh=True)
            _acc(params.bias, dZ2.sum(axis=0), fresh=True)
            _acc(xs, (dZ2 @ params.w_in.value.T).reshape(T, B, n_in), fresh=True)
        tape.record(backward)
    return out


def softmax_cross_entropy(logits: Node, targets, weights=None, tape: Tape | None = None,
                          overwrite_logits: bool = False) -> Node:
    """Weighted mean over rows of ``-log softmax(logits)[target]`` (natural log).

    ``weights`` defaults to ones.  With ``overwrite_logits`` the logits buffer
    is reused for the gradient, which saves a copy of an ``N x |V|`` array.
    """
    L = logits.value
    if L.ndim == 1:
        L = L[None, :]
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, width = L.shape
    if targets.shape != (n,):
        raise ValueError("one target per row expected")
    if n and (targets.min() < 0 or targets.max() >= width):
        raise IndexError(f"target out of range [0, {width})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = float(w.sum())
    if total <= 0:
        raise ValueError("weights must have a positive sum")
    buf = L if overwrite_logits else L.copy()
    scale = w / total if tape is not None else None
    nll, grad = kernels.softmax_xent(np.ascontiguousarray(buf), targets, scale)
    loss = Node(np.asarray(float(np.dot(w, nll.astype(np.float64))) / total))
    if tape is not None:
        def backward():
            g = grad
            up = float(loss.grad)
            if up != 1.0:
                g = g * up
            _acc(logits, g.reshape(logits.value.shape), fresh=True)
        tape.record(backward)
    return loss


# ---------------------------------------------------------------------------
# optimisation

def adam_step(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of every parameter from its ``grad``."""
    for p in params:
        if not np.isfinite(p.grad).all():
            bad = int((~np.isfinite(p.grad)).sum())
            raise DivergenceError(
                f"non-finite gradient in {p.name or 'parameter'}: {bad} of {p.grad.size} entries "
                f"(step {p.step_count})"
            )
    for p in params:
        p.step_count += 1
        kernels.adam_update(p.value.reshape(-1), p.grad.reshape(-1), p.adam_m.reshape(-1),
                            p.adam_v.reshape(-1), lr, beta1, beta2, eps, p.step_count)


def global_norm(params) -> float:
    total = 0.0
    for p in params:
        g = p.grad.ravel()
        total += float(np.dot(g, g))
    return math.sqrt(total)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the factor applied (1.0 when no clipping happened).
    """
    norm = global_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= p.grad.dtype.type(scale)
        return scale
    return 1.0


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # name -> max relative error
    n_checked: int = 0

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def lines(self):
        for name, err in sorted(self.errors.items()):
            yield f"{name:<24s} {err:.3e}"


def finite_difference_check(forward, params, h: float = 1e-5, max_entries: int | None = None,
                            seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients against central differences.

    ``forward(tape)`` must build the graph and return the scalar loss node.
    The step for entry ``theta`` is ``h * max(1, |theta|)``.  The relative error
    of an entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    near-zero gradients from reporting noise as large relative errors.
    """
    params = list(params)
    report = GradCheckReport()
    if not params:
        return report
    for p in params:
        if p.value.dtype != np.float64:
            raise ConfigError("finite-difference check needs float64 parameters")
        p.zero_grad()
    tape = Tape()
    loss = forward(tape)
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    for k, p in enumerate(params):
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            lp = float(forward(None).value)
            flat[i] = orig - step
            lm = float(forward(None).value)
            flat[i] = orig
            num = (lp - lm) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report.errors[p.name or f"param{k}"] = worst
        report.n_checked += len(idx)
    return report
