"""
Mechanistic probes for residual streams and trained weights.

* :func:`scan_blocks` - look for a target ``d x d`` matrix in every ``d``-row window and ``d``-aligned column
  block of every level of a stream.
* :func:`lemma1_check` - perturb one input row of a causal model and confirm no earlier row of any level moves
  (bitwise).
* :func:`theorem1_witness` - build two targets ``Y`` / ``Y'`` that a causal model can only tell apart after the
  row carrying ``Y_P[i]``, and confirm no block location outputs ``Y`` in one run and ``Y'`` in the other.
* :func:`block_summary`, :func:`pattern_fit`, :func:`best_single_block`, :func:`dominant_block` - compare weight
  matrices against gain-scaled block patterns.

Every report type has a ``lines()`` method producing the ``key=value`` lines printed by ``permlab probe``.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import attr
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from privex.permlab import settings
from privex.permlab.constructions import BLOCK_KINDS, BlockPattern
from privex.permlab.exceptions import DomainError, ModeError, ShapeError
from privex.permlab.model import MaskMode, ModelWeights, ResidualStream, forward
from privex.permlab.numerics import DTYPE, Matrix
from privex.permlab.task import (
    P_TYPES, RNG_TYPES, as_rng, below_diagonal_witness, check_permutation_matrix, embed, sample_instance,
    sample_target
)

log = logging.getLogger(__name__)

Location = Tuple[int, int, int]


@attr.s(frozen=True)
class BlockMatch:
    """A ``d x d`` window at ``level``, rows ``row_offset .. row_offset+d-1`` and column block ``col_block``."""
    level: int = attr.ib()
    row_offset: int = attr.ib()
    col_block: int = attr.ib()
    max_abs_err: float = attr.ib()

    @property
    def location(self) -> Location:
        return self.level, self.row_offset, self.col_block

    def line(self) -> str:
        return f"match level={self.level} row_offset={self.row_offset} col_block={self.col_block} max_err={self.max_abs_err:.6e}"


def scan_blocks(stream: ResidualStream, y: Matrix, tol: float = settings.DEFAULT_TOL) -> List[BlockMatch]:
    """
    Every window of ``stream`` within ``tol`` (max-abs) of ``y``, best first.

    Rows are scanned at every offset, not only multiples of ``d``; columns are ``d``-aligned blocks.

    :raises ShapeError: ``y`` isn't square, or ``stream`` is a stacked (batched) stream
    """
    y = np.asarray(y, dtype=DTYPE)
    if y.ndim != 2 or y.shape[0] != y.shape[1]:
        raise ShapeError(f"scan_blocks: target must be a square matrix, got shape {y.shape}")
    d = y.shape[0]
    found = []
    for level, h in enumerate(stream.levels):
        if h.ndim != 2:
            raise ShapeError(f"scan_blocks works on single-instance streams, level {level} has shape {h.shape}")
        rows, cols = h.shape
        if rows < d:
            continue
        for c in range(cols // d):
            windows = sliding_window_view(h[:, c * d:(c + 1) * d], (d, d))[:, 0]
            errs = np.max(np.abs(windows - y), axis=(-2, -1))
            for r in np.flatnonzero(errs < tol):
                found.append(BlockMatch(level, int(r), c, float(errs[r])))
    found.sort(key=lambda m: (m.max_abs_err, m.location))
    return found


@attr.s(frozen=True)
class LemmaVerdict:
    """
    Outcome of :func:`lemma1_check`. On failure ``first_diff`` is the ``(level, row, col)`` of the first entry
    (row-major, lowest level first) that changed.
    """
    passed: bool = attr.ib()
    r: int = attr.ib()
    levels: int = attr.ib()
    first_diff: Optional[Location] = attr.ib(default=None)

    def lines(self) -> List[str]:
        out = [f"lemma1 r={self.r} levels={self.levels} result={'PASS' if self.passed else 'FAIL'}"]
        if self.first_diff is not None:
            out.append("first_diff level={} row={} col={}".format(*self.first_diff))
        return out


def lemma1_check(wts: ModelWeights, h0: Matrix, r: int, perturb: Matrix, force: bool = False) -> LemmaVerdict:
    """
    Replace row ``r`` of ``h0`` with ``perturb``, rerun :func:`.forward`, and compare rows ``0..r-1`` of every
    level of the two streams bitwise.

    :param force: run the check on a mask-free model anyway (it's expected to fail for generic weights)
    :raises ModeError: ``wts.mask`` isn't causal and ``force`` is False
    :raises DomainError: ``r`` is outside ``[0, T)``
    :raises ShapeError: ``perturb`` isn't a row of ``h0``'s width
    """
    if wts.mask is not MaskMode.CAUSAL and not force:
        raise ModeError(f"the prefix invariance check needs a causal model, this one is '{wts.mask.value}'")
    h0 = np.array(h0, dtype=DTYPE)
    if not 0 <= r < h0.shape[0]:
        raise DomainError(f"row r={r} is outside 0:{h0.shape[0]}")
    perturb = np.asarray(perturb, dtype=DTYPE).reshape(-1)
    if perturb.shape[0] != h0.shape[1]:
        raise ShapeError(f"perturbation must have {h0.shape[1]} entries, got {perturb.shape[0]}")
    h0b = h0.copy()
    h0b[r] = perturb

    first, second = forward(wts, h0), forward(wts, h0b)
    for level, (a, b) in enumerate(zip(first.levels, second.levels)):
        if not np.array_equal(a[:r], b[:r]):
            row, col = (int(x) for x in np.argwhere(a[:r] != b[:r])[0])
            log.debug("prefix changed at level=%d row=%d col=%d (r=%d)", level, row, col, r)
            return LemmaVerdict(False, r, len(first.levels), (level, row, col))
    return LemmaVerdict(True, r, len(first.levels))


def random_lemma1_check(wts: ModelWeights, rng: RNG_TYPES = None, r: int = None) -> LemmaVerdict:
    """:func:`lemma1_check` on a random instance, a random row (unless ``r`` is given) and a gaussian perturbation."""
    rng = as_rng(rng)
    inst = sample_instance(wts.d, rng, padding=wts.padding)
    h0 = embed(inst.perm.p, inst.y_p, inst.padding)
    r = int(rng.integers(0, h0.shape[0])) if r is None else r
    return lemma1_check(wts, h0, r, rng.normal(size=h0.shape[1]))


@attr.s(frozen=True, eq=False)
class WitnessReport:
    """
    Outcome of :func:`theorem1_witness`: ``(i, j)`` is the below-diagonal witness, ``changed_row`` the stream row
    holding ``Y_P[i]``. ``prefix_identical`` is check (a); ``shared`` lists the locations matching ``Y`` in the
    first run and ``Y'`` in the second (check (b) wants none).
    """
    i: int = attr.ib()
    j: int = attr.ib()
    changed_row: int = attr.ib()
    prefix_identical: bool = attr.ib()
    shared: Tuple[Location, ...] = attr.ib(converter=tuple)
    tol: float = attr.ib()

    @property
    def passed(self) -> bool:
        return self.prefix_identical and not self.shared

    def lines(self) -> List[str]:
        out = [
            f"witness i={self.i} j={self.j} changed_row={self.changed_row} prefix_identical={self.prefix_identical} "
            f"shared={len(self.shared)} tol={self.tol:g} result={'PASS' if self.passed else 'FAIL'}"
        ]
        out += ["shared level={} row_offset={} col_block={}".format(*loc) for loc in self.shared]
        return out


def theorem1_witness(wts: ModelWeights, p: P_TYPES, rng: RNG_TYPES = None, tol: float = settings.WITNESS_TOL,
                     y: Matrix = None) -> WitnessReport:
    """
    Two-target test of a causal model on permutation ``p``.

    With ``(i, j) = below_diagonal_witness(p)``, ``Y'`` is ``Y`` with row ``j`` flipped (``1 - Y[j]``). Since
    ``Y_P[i] = Y[j]``, the two inputs differ only on the row carrying ``Y_P[i]``. The report passes iff (a) every
    level agrees bitwise on all rows before that one, and (b) no block location is within ``tol`` of ``Y`` in the
    first stream and of ``Y'`` in the second.

    On the unpadded ``[P; Y_P]`` input any ``d``-row window puts its row ``j`` above the changed row, so a
    causal model always passes. The scratch rows of the padded input sit below it, which is how the scratch
    construction gets around the test.

    :raises ModeError: the model isn't causal
    :raises DomainError: ``p`` is the identity (there is no below-diagonal witness)
    """
    if wts.mask is not MaskMode.CAUSAL:
        raise ModeError(f"the two-target witness applies to causal models, this one is '{wts.mask.value}'")
    p = check_permutation_matrix(p)
    witness = below_diagonal_witness(p)
    if witness is None:
        raise DomainError("no below-diagonal witness: P is the identity")
    i, j = witness
    y = sample_target(wts.d, as_rng(rng)) if y is None else np.asarray(y, dtype=DTYPE)
    y_alt = y.copy()
    y_alt[j] = 1.0 - y_alt[j]

    first = forward(wts, embed(p, p @ y, wts.padding))
    second = forward(wts, embed(p, p @ y_alt, wts.padding))
    changed = wts.layout.yp_start + i
    prefix_ok = all(np.array_equal(a[:changed], b[:changed]) for a, b in zip(first.levels, second.levels))

    hits = {m.location for m in scan_blocks(first, y, tol)}
    shared = sorted(hits & {m.location for m in scan_blocks(second, y_alt, tol)})
    report = WitnessReport(i=i, j=j, changed_row=changed, prefix_identical=prefix_ok, shared=shared, tol=tol)
    log.debug("witness: %s", report.lines()[0])
    return report


def _check_divisible(a: Matrix, d: int):
    if a.ndim != 2 or a.shape[0] % d or a.shape[1] % d:
        raise ShapeError(f"matrix of shape {a.shape} can't be split into {d}x{d} blocks")


def block_summary(a: Matrix, d: int, norm: str = 'max') -> Matrix:
    """
    One number per ``d x d`` block of ``a``: its max-abs entry (``norm='max'``) or Frobenius norm (``'fro'``).

    :raises ShapeError: a side of ``a`` isn't divisible by ``d``
    """
    a = np.asarray(a, dtype=DTYPE)
    _check_divisible(a, d)
    blocks = a.reshape(a.shape[0] // d, d, a.shape[1] // d, d)
    if norm == 'max':
        return np.max(np.abs(blocks), axis=(1, 3))
    if norm == 'fro':
        return np.sqrt(np.sum(blocks ** 2, axis=(1, 3)))
    raise DomainError(f"unknown block norm '{norm}' (expected 'max' or 'fro')")


@attr.s(frozen=True)
class PatternFit:
    """``beta_hat`` is the least-squares gain on the pattern's support, ``residual`` the off-support share of
    ``a``'s squared mass (in ``[0, 1]``)."""
    pattern: BlockPattern = attr.ib()
    beta_hat: float = attr.ib()
    residual: float = attr.ib()

    def line(self, name: str = 'fit') -> str:
        return f"{name} pattern={self.pattern.describe()} beta_hat={self.beta_hat:.6g} residual={self.residual:.6g}"


def pattern_fit(a: Matrix, pattern: BlockPattern) -> PatternFit:
    """
    Fit ``a ~ beta * pattern``: ``beta_hat = <a, T> / <T, T>`` for the unit-gain template ``T``, and
    ``residual = sum(a^2 off the support) / sum(a^2)`` (0 for an all-zero ``a``).

    :raises ShapeError: ``a`` doesn't have the pattern's shape
    """
    a = np.asarray(a, dtype=DTYPE)
    if a.shape != pattern.shape:
        raise ShapeError(f"pattern_fit: matrix shape {a.shape} doesn't match pattern shape {pattern.shape}")
    t = pattern.template()
    denom = float(np.sum(t * t))
    beta = float(np.sum(a * t)) / denom if denom else 0.0
    total = float(np.sum(a * a))
    off = float(np.sum(a[~pattern.support()] ** 2))
    return PatternFit(pattern=pattern, beta_hat=beta, residual=off / total if total > 0 else 0.0)


def best_single_block(a: Matrix, d: int, kinds: Sequence[str] = ('I', 'J')) -> PatternFit:
    """Try every block position and every kind in ``kinds`` as a single-block pattern; return the lowest residual."""
    a = np.asarray(a, dtype=DTYPE)
    _check_divisible(a, d)
    grid = (a.shape[0] // d, a.shape[1] // d)
    best = None
    for kind in kinds:
        if kind not in BLOCK_KINDS:
            raise DomainError(f"unknown block kind '{kind}'")
        for r in range(grid[0]):
            for c in range(grid[1]):
                fit = pattern_fit(a, BlockPattern.single(d, grid, r, c, kind))
                if best is None or fit.residual < best.residual:
                    best = fit
    return best


@attr.s(frozen=True)
class DominantBlock:
    row_block: int = attr.ib()
    col_block: int = attr.ib()
    norm: float = attr.ib()
    ratio: float = attr.ib()

    def line(self, name: str = 'dominant') -> str:
        return f"{name} block=({self.row_block},{self.col_block}) norm={self.norm:.6g} ratio={self.ratio:.6g}"


def dominant_block(a: Matrix, d: int, norm: str = 'fro') -> DominantBlock:
    """
    The block with the largest norm and how many times larger it is than the runner-up (``inf`` when every
    other block is zero).
    """
    summary = block_summary(a, d, norm=norm)
    flat = summary.ravel()
    order = np.argsort(flat, kind='stable')[::-1]
    top = float(flat[order[0]])
    runner = float(flat[order[1]]) if flat.size > 1 else 0.0
    r, c = np.unravel_index(order[0], summary.shape)
    return DominantBlock(int(r), int(c), top, top / runner if runner > 0 else float('inf'))


def weight_report(wts: ModelWeights) -> List[str]:
    """``permlab probe --mode weights``: best single block and dominance for every ``A^(i)`` and ``W``."""
    out = []
    for name, m in zip(wts.param_names, wts.params):
        out.append(best_single_block(m, wts.d).line(f"fit {name}"))
        out.append(dominant_block(m, wts.d).line(f"dominant {name}"))
    return out
