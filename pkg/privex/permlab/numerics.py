"""
Dense float64 matrix kernel.

The model only needs a handful of operations, and all of them are here: :func:`matmul`, :func:`transpose`,
:func:`hconcat`, :func:`vconcat`, :func:`causal_mask` and :func:`row_softmax`. A "matrix" is simply a
``numpy.ndarray`` of ``float64``. Every function also accepts stacks of matrices (``(..., rows, cols)``) so
training can push a whole batch through the same code path as a single instance.

Masked logits are represented by IEEE negative infinity (:attr:`NEG_INF`), and ``exp(NEG_INF)`` is an exact
zero inside :func:`row_softmax`.

**Determinism**: all operations are pure and never modify their inputs. For a fixed shape, numpy's matmul
uses a fixed summation order, so each output row depends only on the corresponding input row and the
right-hand operand - repeated runs are bitwise identical, which the causal invariance check relies on.
"""
import logging
from typing import Tuple, Union

import numpy as np

from privex.permlab.exceptions import DegenerateRowError, ShapeError

log = logging.getLogger(__name__)

NEG_INF = float('-inf')

DTYPE = np.float64

Matrix = np.ndarray


def _shape(m: np.ndarray) -> Tuple[int, ...]:
    return tuple(int(x) for x in m.shape)


def as_matrix(data, name: str = 'matrix') -> Matrix:
    """
    Convert ``data`` (nested lists, a numpy array, etc.) into a float64 array with at least 2 dimensions.

        >>> as_matrix([[1, 2], [3, 4]]).dtype
        dtype('float64')

    :raises ShapeError: when ``data`` has fewer than 2 dimensions
    """
    m = np.asarray(data, dtype=DTYPE)
    if m.ndim < 2:
        raise ShapeError(f"{name} must have at least 2 dimensions, got shape {_shape(m)}")
    return m


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=DTYPE)


def identity(n: int) -> Matrix:
    return np.eye(n, dtype=DTYPE)


def antidiagonal(n: int) -> Matrix:
    """The ``n x n`` row-reversal matrix ``J`` (ones where ``i + j = n - 1``, 0-based). ``J @ J = I``."""
    return np.fliplr(np.eye(n, dtype=DTYPE)).copy()


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    Matrix product ``a @ b`` (stacks broadcast over the leading axes).

        >>> matmul([[1, 2], [3, 4]], [[0, 1], [1, 0]]).tolist()
        [[2.0, 1.0], [4.0, 3.0]]

    :raises ShapeError: when ``a.cols != b.rows``; the message names both shapes
    """
    a, b = as_matrix(a, 'a'), as_matrix(b, 'b')
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {_shape(a)} and {_shape(b)}")
    return np.matmul(a, b)


def transpose(a: Matrix) -> Matrix:
    """Swap the last two axes. ``transpose(transpose(a))`` is ``a``."""
    return np.swapaxes(as_matrix(a), -1, -2)


def hconcat(a: Matrix, b: Matrix) -> Matrix:
    """
    Column-wise concatenation ``[a, b]``. ``b`` may have zero columns.

    :raises ShapeError: when the row counts (or leading stack axes) differ
    """
    a, b = as_matrix(a, 'a'), as_matrix(b, 'b')
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"hconcat: row counts differ, shapes {_shape(a)} and {_shape(b)}")
    return np.concatenate([a, b], axis=-1)


def vconcat(*parts: Matrix) -> Matrix:
    """Row-wise stacking ``[a; b; ...]``, used to assemble ``X = [P; Y_P]``."""
    parts = [as_matrix(p) for p in parts]
    cols = {p.shape[-1] for p in parts}
    if len(cols) > 1:
        raise ShapeError(f"vconcat: column counts differ, shapes {[_shape(p) for p in parts]}")
    return np.concatenate(parts, axis=-2)


def causal_mask(v: Matrix) -> Matrix:
    """
    Keep entries on and below the diagonal, replace those strictly above it with :attr:`NEG_INF`::

        >>> causal_mask([[1, 2], [3, 4]]).tolist()
        [[1.0, -inf], [3.0, 4.0]]

    Idempotent: masking an already-masked matrix returns it unchanged.

    :raises ShapeError: when ``v`` isn't square
    """
    v = as_matrix(v, 'v')
    n, m = v.shape[-2:]
    if n != m:
        raise ShapeError(f"causal_mask: expected a square matrix, got shape {_shape(v)}")
    above = np.triu(np.ones((n, n), dtype=bool), k=1)
    return np.where(above, NEG_INF, v)


def row_softmax(v: Matrix) -> Matrix:
    """
    Softmax applied to each row of ``v``, stabilised by subtracting the row max before exponentiating.

    :attr:`NEG_INF` entries map to exact zeros, so ``[x, -inf]`` becomes ``[1, 0]``.

    :raises DegenerateRowError: when a row has no finite entry
    """
    v = as_matrix(v, 'v')
    row_max = np.max(v, axis=-1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise DegenerateRowError("row_softmax: at least one row is entirely masked (all -inf)")
    e = np.exp(v - row_max)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(s: Matrix, ds: Matrix) -> Matrix:
    """
    Pull a gradient ``ds`` on the softmax output back onto its logits::

        dv = s * (ds - rowsum(s * ds))

    Masked logits have ``s == 0`` and therefore receive an exact zero gradient.
    """
    return s * (ds - np.sum(s * ds, axis=-1, keepdims=True))


def max_abs_diff(a: Union[Matrix, float], b: Union[Matrix, float]) -> float:
    """Largest absolute entry-wise difference between ``a`` and ``b`` (0.0 for empty arrays)."""
    diff = np.abs(np.asarray(a, dtype=DTYPE) - np.asarray(b, dtype=DTYPE))
    return float(diff.max()) if diff.size else 0.0
