"""Pure-numpy kernels.  Reference semantics for the compiled ``_ckernels``.

Gate layout for LSTM pre-activations is ``[input, forget, candidate, output]``,
each block ``H`` wide.
"""
import numpy as np

BACKEND = "numpy"


def _sigmoid(x):
    # tanh form: no overflow for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(z, c_prev):
    """Activate gates in place in ``z``; return ``(acts, c, tanh_c, h)``."""
    H = c_prev.shape[1]
    z[:, : 2 * H] = _sigmoid(z[:, : 2 * H])
    np.tanh(z[:, 2 * H : 3 * H], out=z[:, 2 * H : 3 * H])
    z[:, 3 * H :] = _sigmoid(z[:, 3 * H :])
    i, f, g, o = z[:, :H], z[:, H : 2 * H], z[:, 2 * H : 3 * H], z[:, 3 * H :]
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return z, c, tc, h


def lstm_backward(acts, c_prev, tc, dh, dc):
    H = c_prev.shape[1]
    i, f, g, o = acts[:, :H], acts[:, H : 2 * H], acts[:, 2 * H : 3 * H], acts[:, 3 * H :]
    dct = dh * o * (1.0 - tc * tc)
    if dc is not None:
        dct += dc
    dz = np.empty_like(acts)
    dz[:, :H] = dct * g * i * (1.0 - i)
    dz[:, H : 2 * H] = dct * c_prev * f * (1.0 - f)
    dz[:, 2 * H : 3 * H] = dct * i * (1.0 - g * g)
    dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
    return dz, dct * f


def softmax_xent(logits, targets, scale=None):
    """Row-wise ``-log softmax(logits)[target]``.

    With ``scale`` given, ``logits`` is overwritten by the gradient
    ``(softmax - onehot) * scale[:, None]`` and returned as the second value.
    """
    n = logits.shape[0]
    rows = np.arange(n)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    nll = (np.log(s) + m)[:, 0] - logits[rows, targets]
    if scale is None:
        return nll, None
    np.divide(e, s, out=logits)
    logits[rows, targets] -= 1.0
    logits *= scale[:, None]
    return nll, logits


def scatter_add_rows(dst, ids, src):
    np.add.at(dst, ids, src)


def average_intervals(mat, starts, ends, c0, c1):
    """Replace columns ``[c0, c1)`` of every row interval by the interval mean.

    The mean is taken relative to the interval's first row and accumulated in
    float64, row by row, so a slice that is already uniform is reproduced
    exactly.
    """
    if c1 <= c0 or len(starts) == 0:
        return
    counts = ends - starts
    block = mat[:, c0:c1].astype(np.float64)
    base = block[starts]
    sums = np.zeros_like(base)
    # step k adds row start + k of every interval still that long; this keeps
    # the strict row order of the compiled kernel (reduceat does not)
    for k in range(1, int(counts.max())):
        live = np.flatnonzero(counts > k)
        sums[live] += block[starts[live] + k] - base[live]
    means = base + sums / counts[:, None]
    mat[:, c0:c1] = np.repeat(means, counts, axis=0).astype(mat.dtype)


def adam_update(value, grad, m, v, lr, beta1, beta2, eps, step):
    """In-place bias-corrected Adam on flat arrays; ``step`` is the 1-based count."""
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * np.square(grad)
    denom = np.sqrt(v / c2)
    denom += eps
    value -= (lr / c1) * m / denom
