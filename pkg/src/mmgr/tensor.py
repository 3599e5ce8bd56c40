"""Dense 2-D float64 kernels with explicit analytic backward rules.

Matrices are plain numpy ``float64`` arrays of rank 2.  Every forward
operation that participates in training has a matching ``*_backward``
function implementing its analytic gradient; the layer stack composes these
in reverse order, so no differentiation tape exists anywhere.

All randomness flows through generators created by :func:`make_rng`
(counter-based Philox), owned by the caller; there is no global RNG state.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

Matrix = np.ndarray


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic counter-based generator; same seed, same stream."""
    return np.random.Generator(np.random.Philox(seed))


def _require_same_shape(op: str, a: Matrix, b: Matrix) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# matrix product
# ---------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    return a @ b


def matmul_backward(grad: Matrix, a: Matrix, b: Matrix) -> tuple[Matrix, Matrix]:
    """dA = dC.Bt, dB = At.dC for C = A.B."""
    return grad @ b.T, a.T @ grad


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a: Matrix, b: Matrix) -> Matrix:
    _require_same_shape("add", a, b)
    return a + b


def add_backward(grad: Matrix) -> tuple[Matrix, Matrix]:
    return grad, grad


def scale(a: Matrix, factor: float) -> Matrix:
    return a * factor


def scale_backward(grad: Matrix, a: Matrix, factor: float) -> tuple[Matrix, float]:
    """Gradients w.r.t. the matrix and the scalar factor."""
    return grad * factor, float(np.sum(grad * a))


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    _require_same_shape("hadamard", a, b)
    return a * b


def hadamard_backward(grad: Matrix, a: Matrix, b: Matrix) -> tuple[Matrix, Matrix]:
    return grad * b, grad * a


def transpose(a: Matrix) -> Matrix:
    return np.ascontiguousarray(a.T)


def transpose_backward(grad: Matrix) -> Matrix:
    return np.ascontiguousarray(grad.T)


def row_mean(rows: Matrix) -> Matrix:
    """Mean over the rows of a non-empty matrix, as a 1 x d matrix.

    Permutation-invariant by construction; the mean of k equal rows is that
    row (up to rounding of the division).
    """
    if rows.shape[0] == 0:
        raise ShapeError("row_mean: need at least one row")
    return rows.mean(axis=0, keepdims=True)


def row_mean_backward(grad: Matrix, n_rows: int) -> Matrix:
    """Each input row receives grad / n_rows."""
    return np.repeat(grad / n_rows, n_rows, axis=0)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(x: Matrix) -> Matrix:
    """1 / (1 + exp(-x)), saturating but never NaN for finite input."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad: Matrix, out: Matrix) -> Matrix:
    """Backward from the forward output s: ds = s * (1 - s)."""
    return grad * out * (1.0 - out)


def relu(x: Matrix) -> Matrix:
    return np.maximum(x, 0.0)


def relu_backward(grad: Matrix, x: Matrix) -> Matrix:
    return grad * (x > 0)


def softmax_rows(logits: Matrix) -> Matrix:
    """Row-wise softmax with max subtraction; each row sums to 1."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(grad: Matrix, out: Matrix) -> Matrix:
    """dX = p * (dP - sum(dP * p)) row-wise, for p = softmax(x)."""
    inner = (grad * out).sum(axis=1, keepdims=True)
    return out * (grad - inner)
