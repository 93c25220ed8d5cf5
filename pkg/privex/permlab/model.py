"""
The disentangled, attention-only transformer.

Each layer ``i`` is a single attention head parameterised by one square matrix ``A^(i)``::

    attn(h; A)      = softmax(MASK(h A h^T)) h      (mask = causal)
    attn_cmf(h; A)  = softmax(h A h^T) h            (mask = cmf)

and instead of adding the layer output to its input, the residual stream *concatenates* it::

    h^(i+1) = [h^(i), attn(h^(i); A^(i+1))]

so the width doubles at every layer, ``width(h^(i)) = 2^i * width(h^(0))``, and every layer's output lives in
its own ``d``-aligned column blocks. A final linear readout ``h^(k) W^T`` produces the prediction, restricted
to a window of ``d`` rows (by default rows ``0..d-1``, the P positions).

**Block convention**: logits are ``h A h^T``, so block ``(r, c)`` of ``A`` pairs query feature block ``r``
with key feature block ``c``.

Every function here works on a single ``(T, width)`` embedding or a stack ``(n, T, width)``.
"""
import logging
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import attr
import numpy as np

from privex.permlab.exceptions import DomainError, ShapeError
from privex.permlab.numerics import DTYPE, Matrix, causal_mask, hconcat, matmul, row_softmax, transpose
from privex.permlab.task import RNG_TYPES, InputLayout, Padding, as_rng

log = logging.getLogger(__name__)

Span = Tuple[int, int]


class MaskMode(Enum):
    CAUSAL = 'causal'
    CMF = 'cmf'


def level_width(base_width: int, level: int) -> int:
    """Width of ``h^(level)`` for an embedding of width ``base_width``."""
    return (2 ** int(level)) * int(base_width)


def _to_matrices(mats) -> Tuple[Matrix, ...]:
    return tuple(np.array(m, dtype=DTYPE) for m in mats)


def _to_span(span) -> Optional[Span]:
    if span is None:
        return None
    lo, hi = span
    return int(lo), int(hi)


@attr.s(frozen=True, eq=False)
class ModelWeights:
    """
    All parameters of a depth-``k`` model: ``attn[i]`` is ``A^(i+1)`` (side ``width(h^(i))``) and ``w`` is the
    ``d x width(h^(k))`` readout.

    ``readout_rows`` is the half-open row window ``(lo, hi)`` the prediction is read from; ``None`` means the
    default ``(0, d)``.
    """
    d: int = attr.ib(converter=int)
    attn: Tuple[Matrix, ...] = attr.ib(converter=_to_matrices)
    w: Matrix = attr.ib(converter=lambda m: np.array(m, dtype=DTYPE))
    mask: MaskMode = attr.ib(default=MaskMode.CMF, converter=MaskMode)
    padding: Padding = attr.ib(default=Padding.NONE, converter=Padding)
    readout_rows: Optional[Span] = attr.ib(default=None, converter=_to_span)

    def __attrs_post_init__(self):
        base = self.layout.width
        for i, a in enumerate(self.attn):
            side = level_width(base, i)
            if a.shape != (side, side):
                raise ShapeError(f"layer {i + 1}: A must be {side}x{side} for this d/padding, got {a.shape}")
        wk = level_width(base, self.depth)
        if self.w.shape != (self.d, wk):
            raise ShapeError(f"readout W must be {self.d}x{wk}, got {self.w.shape}")
        lo, hi = self.rows
        if not (0 <= lo and hi - lo == self.d and hi <= self.layout.rows):
            raise DomainError(f"readout rows {lo}:{hi} must be a window of {self.d} rows within 0:{self.layout.rows}")

    @property
    def depth(self) -> int:
        return len(self.attn)

    @property
    def layout(self) -> InputLayout:
        return InputLayout(self.d, self.padding)

    @property
    def rows(self) -> Span:
        """The effective readout window (``readout_rows`` or the default ``(0, d)``)"""
        return self.readout_rows if self.readout_rows is not None else (0, self.d)

    @property
    def widths(self) -> List[int]:
        """``[width(h^(0)), ..., width(h^(k))]``"""
        return [level_width(self.layout.width, i) for i in range(self.depth + 1)]

    @property
    def params(self) -> List[Matrix]:
        """All trainable matrices in a fixed order: ``A^(1), ..., A^(k), W``"""
        return list(self.attn) + [self.w]

    @property
    def param_names(self) -> List[str]:
        return [f"A{i + 1}" for i in range(self.depth)] + ['W']

    def with_params(self, params: Sequence[Matrix]) -> 'ModelWeights':
        """Copy of these weights with the matrices replaced (same order as :attr:`.params`)."""
        params = list(params)
        return attr.evolve(self, attn=params[:-1], w=params[-1])

    @classmethod
    def zeros(cls, d: int, depth: int = 2, mask='cmf', padding='none', readout_rows: Span = None) -> 'ModelWeights':
        widths = [level_width(InputLayout(d, padding).width, i) for i in range(depth + 1)]
        return cls(
            d=d, attn=[np.zeros((n, n)) for n in widths[:-1]], w=np.zeros((d, widths[-1])),
            mask=mask, padding=padding, readout_rows=readout_rows
        )

    @classmethod
    def random(cls, d: int, depth: int = 2, mask='cmf', padding='none', rng: RNG_TYPES = None,
               init_scale: float = 0.02, readout_rows: Span = None) -> 'ModelWeights':
        """Zero-mean gaussian init with standard deviation ``init_scale``, drawn layer by layer then ``W``."""
        rng = as_rng(rng)
        widths = [level_width(InputLayout(d, padding).width, i) for i in range(depth + 1)]
        attn = [rng.normal(0.0, init_scale, size=(n, n)) for n in widths[:-1]]
        w = rng.normal(0.0, init_scale, size=(d, widths[-1]))
        return cls(d=d, attn=attn, w=w, mask=mask, padding=padding, readout_rows=readout_rows)


def mask_override(wts: ModelWeights, mask: Union[MaskMode, str]) -> ModelWeights:
    """The same weights run under a different mask mode (negative controls, forced Lemma 1 checks)."""
    return attr.evolve(wts, mask=MaskMode(mask))


@attr.s(frozen=True, eq=False)
class ResidualStream:
    """
    Every level ``h^(0) .. h^(k)`` of a forward pass, plus the attention probabilities of each layer
    (``probs[i]`` is the softmax matrix of layer ``i + 1``).
    """
    levels: Tuple[Matrix, ...] = attr.ib(converter=tuple)
    probs: Tuple[Matrix, ...] = attr.ib(converter=tuple, factory=tuple)

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def last(self) -> Matrix:
        return self.levels[-1]

    def layer_output(self, layer: int) -> Matrix:
        """The attention output of layer ``layer`` (1-based): the right half of ``h^(layer)``."""
        h = self.levels[layer]
        return h[..., h.shape[-1] // 2:]


def attention_probs(h: Matrix, a: Matrix, mask: Union[MaskMode, str] = MaskMode.CMF) -> Matrix:
    """Row-stochastic attention matrix ``softmax(MASK(h A h^T))`` (``MASK`` only for causal)."""
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != h.shape[-1]:
        raise ShapeError(f"attention: A must be square with side {h.shape[-1]}, got {a.shape}")
    logits = matmul(matmul(h, a), transpose(h))
    if MaskMode(mask) is MaskMode.CAUSAL:
        logits = causal_mask(logits)
    return row_softmax(logits)


def attention(h: Matrix, a: Matrix, mask: Union[MaskMode, str] = MaskMode.CMF) -> Matrix:
    """
    One attention layer: ``softmax(MASK(h A h^T)) h`` for ``mask=causal`` or ``softmax(h A h^T) h`` for
    ``mask=cmf``. The output has the same shape as ``h``.

    With ``A = 0`` every row attends uniformly: to all rows (cmf) or to rows ``0..i`` (causal).
    """
    h = np.asarray(h, dtype=DTYPE)
    return matmul(attention_probs(h, a, mask), h)


def forward(wts: ModelWeights, h0: Matrix) -> ResidualStream:
    """
    Run the model on ``h0`` and return the whole residual stream. Inputs are never modified.

    :raises ShapeError: when ``h0`` doesn't have ``d + T`` columns, or a layer's ``A`` doesn't fit; the message
                        names the offending layer
    """
    h = np.asarray(h0, dtype=DTYPE)
    if h.shape[-1] != wts.layout.width or h.shape[-2] != wts.layout.rows:
        raise ShapeError(
            f"forward: h0 must be {wts.layout.rows}x{wts.layout.width} for d={wts.d} padding={wts.padding.value}, "
            f"got {h.shape[-2:]}"
        )
    levels, probs = [h], []
    for i, a in enumerate(wts.attn):
        try:
            s = attention_probs(h, a, wts.mask)
        except ShapeError as e:
            raise ShapeError(f"layer {i + 1}: {e}") from e
        probs.append(s)
        h = hconcat(h, matmul(s, h))
        levels.append(h)
    return ResidualStream(levels=levels, probs=probs)


def readout(stream: ResidualStream, w: Matrix, row_range: Span = None) -> Matrix:
    """
    ``h^(k) W^T`` restricted to the half-open row window ``row_range`` (default: the first ``d`` rows, where
    ``d`` is ``W``'s row count).

    :raises ShapeError: ``W``'s column count isn't ``width(h^(k))``
    :raises DomainError: ``row_range`` falls outside ``[0, T)``
    """
    h = stream.last
    w = np.asarray(w, dtype=DTYPE)
    if w.ndim != 2 or w.shape[1] != h.shape[-1]:
        raise ShapeError(f"readout: W must have {h.shape[-1]} columns, got shape {w.shape}")
    lo, hi = (0, w.shape[0]) if row_range is None else row_range
    if not (0 <= lo < hi <= h.shape[-2]):
        raise DomainError(f"readout: row range {lo}:{hi} is outside 0:{h.shape[-2]}")
    return matmul(h[..., lo:hi, :], transpose(w))


def predict(wts: ModelWeights, h0: Matrix) -> Matrix:
    """Forward pass plus readout over ``wts.rows``."""
    return readout(forward(wts, h0), wts.w, wts.rows)
