"""Dense array operations with hand-written backward rules.

Every forward op has a matching ``*_backward`` function that takes the
upstream gradient plus the forward inputs and returns gradients with respect
to those inputs.  Arrays are plain ``numpy.ndarray`` objects in float64.
``finite_diff_check`` validates any (value, gradient) pair against central
differences.
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError

__all__ = [
    "GradCheckReport",
    "as_tensor",
    "matmul",
    "matmul_backward",
    "conv3d",
    "conv3d_backward",
    "relu",
    "relu_backward",
    "global_mean_pool",
    "global_mean_pool_backward",
    "cosine_sim",
    "cosine_sim_backward",
    "softmax",
    "logsumexp",
    "softmax_xent",
    "softmax_xent_batch",
    "finite_diff_check",
    "relu_patterns",
]


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values entering {where}")


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a finite float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr, "as_tensor")
    return arr


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with numpy batching semantics on leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    _check_finite(a, "matmul")
    _check_finite(b, "matmul")
    return a @ b


def _sum_to_shape(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients ``(dA, dB)`` of ``C = A @ B`` given ``dC``."""
    da = grad @ np.swapaxes(b, -1, -2)
    db = np.swapaxes(a, -1, -2) @ grad
    return _sum_to_shape(da, a.shape), _sum_to_shape(db, b.shape)


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------

def _conv_geometry(x: np.ndarray, kernels: np.ndarray, stride: int):
    if kernels.ndim != 5:
        raise DimensionError(f"kernels must be [F,C,k,k,k], got {kernels.shape}")
    f, c, k0, k1, k2 = kernels.shape
    if not (k0 == k1 == k2) or k0 % 2 == 0:
        raise DimensionError(f"kernel must be cubic with odd extent, got {kernels.shape}")
    if x.shape[1] != c:
        raise DimensionError(f"input channels {x.shape[1]} != kernel channels {c} "
                             f"(input {x.shape}, kernels {kernels.shape})")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    k = k0
    pad = (k - 1) // 2
    spatial = x.shape[2:]
    if any(n + 2 * pad < k for n in spatial):
        raise DimensionError(f"kernel {k} larger than padded input {spatial}")
    out = tuple(-(-n // stride) for n in spatial)
    return k, pad, out


def _batched(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise DimensionError(f"conv3d input must be [C,D,H,W] or [N,C,D,H,W], got {x.shape}")


def _im2col(xb: np.ndarray, k: int, pad: int, stride: int, out) -> np.ndarray:
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride][:, :, :out[0], :out[1], :out[2]]
    # (N, D', H', W', C, k, k, k)
    n, c = xb.shape[:2]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7)
    return cols.reshape(n * out[0] * out[1] * out[2], c * k ** 3)


def conv3d(x: np.ndarray, kernels: np.ndarray, stride: int = 1,
           bias: Optional[np.ndarray] = None, return_cols: bool = False):
    """Zero-padded "same" 3D cross-correlation.

    ``x`` is ``[C,D,H,W]`` or batched ``[N,C,D,H,W]``; ``kernels`` is
    ``[F,C,k,k,k]`` with odd ``k``.  Output spatial extent is
    ``ceil(n / stride)`` per axis.  ``return_cols=True`` also returns the
    unfolded input patches, which :func:`conv3d_backward` can reuse.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    xb, single = _batched(x)
    k, pad, out = _conv_geometry(xb, kernels, stride)
    _check_finite(xb, "conv3d")
    _check_finite(kernels, "conv3d")
    n = xb.shape[0]
    f = kernels.shape[0]
    cols = _im2col(xb, k, pad, stride, out)
    y = cols @ kernels.reshape(f, -1).T
    if bias is not None:
        y = y + bias
    y = y.reshape(n, *out, f).transpose(0, 4, 1, 2, 3)
    y = y[0] if single else y
    return (y, cols) if return_cols else y


def conv3d_backward(grad: np.ndarray, x: np.ndarray, kernels: np.ndarray,
                    stride: int = 1, cols: Optional[np.ndarray] = None,
                    need_input_grad: bool = True):
    """Gradients ``(dx, dkernels, dbias)`` of :func:`conv3d`.

    ``dx`` is ``None`` when ``need_input_grad`` is false.
    """
    x = np.asarray(x, dtype=np.float64)
    xb, single = _batched(x)
    gb = grad[None] if single else grad
    k, pad, out = _conv_geometry(xb, kernels, stride)
    n, c = xb.shape[:2]
    f = kernels.shape[0]
    g2 = gb.transpose(0, 2, 3, 4, 1).reshape(-1, f)
    if cols is None:
        cols = _im2col(xb, k, pad, stride, out)
    dk = (g2.T @ cols).reshape(kernels.shape)
    db = g2.sum(axis=0)
    if not need_input_grad:
        return None, dk, db
    dcols = (g2 @ kernels.reshape(f, -1)).reshape(n, *out, c, k, k, k)
    sp = xb.shape[2:]
    dxp = np.zeros((n, c, sp[0] + 2 * pad, sp[1] + 2 * pad, sp[2] + 2 * pad))
    s = stride
    for i in range(k):
        for j in range(k):
            for l in range(k):
                dxp[:, :, i:i + s * out[0]:s, j:j + s * out[1]:s, l:l + s * out[2]:s] += \
                    dcols[:, :, :, :, :, i, j, l].transpose(0, 4, 1, 2, 3)
    dx = dxp[:, :, pad:pad + sp[0], pad:pad + sp[1], pad:pad + sp[2]]
    if single:
        dx = dx[0]
    return dx, dk, db


# ---------------------------------------------------------------------------
# elementwise / pooling
# ---------------------------------------------------------------------------

_relu_log: ContextVar[Optional[List[bytes]]] = ContextVar("relu_log", default=None)


@contextmanager
def relu_patterns():
    """Record the on/off pattern of every :func:`relu` call made inside the block."""
    log: List[bytes] = []
    token = _relu_log.set(log)
    try:
        yield log
    finally:
        _relu_log.reset(token)


def relu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "relu")
    log = _relu_log.get()
    if log is not None:
        log.append(np.packbits(x.ravel() > 0).tobytes())
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad * (np.asarray(x) > 0)


def global_mean_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the last three (spatial) axes."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 4 or any(n == 0 for n in x.shape[-3:]):
        raise DimensionError(f"global_mean_pool needs nonempty [..,F,D,H,W], got {x.shape}")
    _check_finite(x, "global_mean_pool")
    return x.mean(axis=(-3, -2, -1))


def global_mean_pool_backward(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    n = shape[-3] * shape[-2] * shape[-1]
    return np.broadcast_to((grad / n)[..., None, None, None], shape).copy()


# ---------------------------------------------------------------------------
# cosine similarity
# ---------------------------------------------------------------------------

def cosine_sim(u: np.ndarray, v: np.ndarray, return_flag: bool = False):
    """Cosine similarity of two vectors.

    A zero-norm argument yields 0; with ``return_flag=True`` the result is
    ``(value, degenerate)``.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"cosine_sim shape mismatch: {u.shape} vs {v.shape}")
    _check_finite(u, "cosine_sim")
    _check_finite(v, "cosine_sim")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return (0.0, True) if return_flag else 0.0
    val = float(np.clip(u @ v / (nu * nv), -1.0, 1.0))
    return (val, False) if return_flag else val


def cosine_sim_backward(u: np.ndarray, v: np.ndarray):
    """Gradients of ``cosine_sim(u, v)`` with respect to ``u`` and ``v``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return np.zeros_like(u), np.zeros_like(v)
    uh, vh = u / nu, v / nv
    c = uh @ vh
    return (vh - c * uh) / nu, (uh - c * vh) / nv


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    """Cross-entropy of one logit vector against a class index."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite(logits, "softmax_xent")
    if not 0 <= label < logits.shape[-1]:
        raise IndexError(f"label {label} out of range for {logits.shape[-1]} classes")
    lse = logsumexp(logits)
    # log1p form keeps precision when the target dominates
    m = logits.max()
    rest = np.exp(logits - m)
    if logits[label] == m:
        rest_sum = rest.sum() - 1.0
        loss = float(np.log1p(rest_sum))
    else:
        loss = float(lse - logits[label])
    grad = softmax(logits)
    grad[label] -= 1.0
    return loss, grad


def softmax_xent_batch(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch ``[N,C]`` and its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    _check_finite(logits, "softmax_xent_batch")
    n = logits.shape[0]
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(n), labels]))
    grad = softmax(logits, axis=1)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    eps: float
    checked: int = 0
    skipped: int = 0     # coordinates whose stencil straddles a relu kink

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def finite_diff_check(f: Callable[[np.ndarray], float], grad: np.ndarray,
                      x: np.ndarray, eps: float = 1e-3, op: str = "",
                      skip_kinks: bool = False) -> GradCheckReport:
    """Compare an analytic gradient with central differences of ``f`` at ``x``.

    The per-coordinate error is
    ``|analytic - central| / max(1, |analytic|, |central|)``.

    With ``skip_kinks=True`` a coordinate is excluded when any relu inside
    ``f`` switches on or off between ``x - eps`` and ``x + eps``: the central
    difference then straddles a point where no derivative exists.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise DimensionError(f"gradient shape {grad.shape} != input shape {x.shape}")

    def evaluate(t):
        if not skip_kinks:
            return f(t), None
        with relu_patterns() as log:
            val = f(t)
        return val, log

    _, base = evaluate(x)
    flat = x.reshape(-1)
    worst = 0.0
    skipped = 0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp, pat_p = evaluate(x)
        flat[i] = orig - eps
        fm, pat_m = evaluate(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite objective while checking {op or 'function'}")
        if skip_kinks and (pat_p != base or pat_m != base):
            skipped += 1
            continue
        central = (fp - fm) / (2 * eps)
        a = grad.reshape(-1)[i]
        err = abs(a - central) / max(1.0, abs(a), abs(central))
        worst = max(worst, err)
    return GradCheckReport(op=op, max_rel_error=float(worst), eps=eps,
                           checked=flat.size - skipped, skipped=skipped)
