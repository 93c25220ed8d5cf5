"""
Explicit weight constructions which recover ``Y`` into a block of the residual stream.

Three named bundles are available from :func:`build` / :attr:`BUILDERS`:

    ================  ======  ========  ===========================================================
    name              mask    padding   where ``Y`` lands (level 2, attention-2 token block = 6/8)
    ================  ======  ========  ===========================================================
    ``thm2_cmf``      cmf     none      rows ``0..d-1``, column block 6
    ``antidiag_cmf``  cmf     none      rows ``0..d-1``, column block 6
    ``thm3_scratch``  causal  scratch   the scratch rows ``2d+1..3d``, column block 8
    ================  ======  ========  ===========================================================

Each weight matrix is ``beta`` times a block pattern of ``d x d`` blocks (identity ``I``, antidiagonal ``J`` or
all-ones). Block ``(r, c)`` pairs query feature block ``r`` with key feature block ``c`` (logits are
``h A h^T``). As ``beta`` grows, every softmax row approaches a one-hot selector and the recovery becomes exact;
:func:`verify` measures how close a finite gain gets.

**thm2_cmf** - layer 1 (``I`` at block ``(2, 1)``) makes each ``Y_P`` row attend to the matching ``P`` row, so
the ``Y_P`` rows of the layer-1 output hold ``P``. Layer 2 (``I`` at block ``(1, 3)``) lets ``P`` row ``i``
attend to the ``Y_P`` row whose copied ``P`` row has its 1 in column ``i``, reading ``(P^T Y_P)_i = Y_i``.

**antidiag_cmf** - layer 1 reverses the ``P`` rows with ``J`` on the centre block (``P`` row ``i`` reads
``P`` row ``d-1-i``) and copies ``P`` onto the ``Y_P`` rows (``I`` at ``(2, 1)``). Layer 2 pairs the reversed
position (``J`` at ``(4, 3)``) with the copied ``P``; its ``-1`` all-ones block on ``(1, 1)`` keeps the
reversed ``P`` rows out of the competition, which the bare ``J`` pattern needs to select ``P^T`` instead of
``J P J``.

**thm3_scratch** - causal, over ``[BOS; P; Y_P; S]``. Layer 1 copies ``P`` onto the ``Y_P`` rows (``I`` at
``(2, 1)``, always an earlier position). Layer 2 (``I`` at ``(3, 4)``) lets scratch row ``s`` attend to the
``Y_P`` row whose copied ``P`` row has its 1 in column ``s``: every such row lies above the scratch rows, so
the mask never hides it.
"""
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np

from privex.permlab import settings
from privex.permlab.exceptions import DomainError, UsageError
from privex.permlab.model import MaskMode, ModelWeights, ResidualStream, Span, forward, level_width
from privex.permlab.numerics import DTYPE, Matrix, antidiagonal, identity
from privex.permlab.task import (
    RNG_TYPES, InputLayout, Padding, Permutation, TaskBatch, all_permutations, as_rng, embed, sample_batch
)

log = logging.getLogger(__name__)

BLOCK_KINDS = ('I', 'J', 'ONES')


def block_matrix(kind: str, d: int) -> Matrix:
    if kind == 'I':
        return identity(d)
    if kind == 'J':
        return antidiagonal(d)
    if kind == 'ONES':
        return np.ones((d, d), dtype=DTYPE)
    raise DomainError(f"unknown block kind '{kind}' (expected one of {BLOCK_KINDS})")


@attr.s(frozen=True)
class BlockPattern:
    """
    A matrix made of ``d x d`` blocks, all zero except the listed ones.

    ``grid`` is ``(block_rows, block_cols)``; ``blocks`` holds ``(row_block, col_block, kind, coef)`` tuples where
    ``kind`` is ``I``, ``J`` or ``ONES``.

        >>> BlockPattern(d=2, grid=(2, 2), blocks=((0, 1, 'I', 1.0),)).template().tolist()
        [[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]
    """
    d: int = attr.ib(converter=int)
    grid: Tuple[int, int] = attr.ib(converter=lambda g: (int(g[0]), int(g[1])))
    blocks: Tuple[Tuple[int, int, str, float], ...] = attr.ib(
        converter=lambda bs: tuple((int(r), int(c), str(k), float(v)) for r, c, k, v in bs)
    )

    @blocks.validator
    def _check_blocks(self, attribute, value):
        for r, c, k, _ in value:
            if not (0 <= r < self.grid[0] and 0 <= c < self.grid[1]):
                raise DomainError(f"block ({r}, {c}) is outside a {self.grid[0]}x{self.grid[1]} grid")
            if k not in BLOCK_KINDS:
                raise DomainError(f"unknown block kind '{k}' (expected one of {BLOCK_KINDS})")

    @classmethod
    def single(cls, d: int, grid: Union[int, Tuple[int, int]], row_block: int, col_block: int, kind: str = 'I') -> 'BlockPattern':
        grid = (grid, grid) if isinstance(grid, int) else grid
        return cls(d=d, grid=grid, blocks=((row_block, col_block, kind, 1.0),))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid[0] * self.d, self.grid[1] * self.d

    def template(self) -> Matrix:
        """The pattern at unit gain."""
        out = np.zeros(self.shape, dtype=DTYPE)
        d = self.d
        for r, c, kind, coef in self.blocks:
            out[r * d:(r + 1) * d, c * d:(c + 1) * d] += coef * block_matrix(kind, d)
        return out

    def scaled(self, beta: float) -> Matrix:
        return float(beta) * self.template()

    def support(self) -> np.ndarray:
        """Boolean mask of the template's nonzero entries."""
        return self.template() != 0

    def describe(self) -> str:
        parts = [f"{'' if v == 1 else v}{k}@({r},{c})" for r, c, k, v in self.blocks]
        return f"{self.grid[0]}x{self.grid[1]}[{' '.join(parts)}]"


@attr.s(frozen=True, eq=False)
class ConstructionBundle:
    """
    Constructed weights plus where ``Y`` is expected to appear: level ``expected_level`` of the residual
    stream, rows ``expected_rows`` (half-open) and ``d``-aligned column block ``expected_col_block``.
    """
    name: str = attr.ib()
    wts: ModelWeights = attr.ib()
    expected_rows: Span = attr.ib(converter=lambda s: (int(s[0]), int(s[1])))
    expected_col_block: int = attr.ib(converter=int)
    beta1: float = attr.ib(converter=float)
    beta2: float = attr.ib(converter=float)
    expected_level: int = attr.ib(default=2, converter=int)
    patterns: Tuple[BlockPattern, ...] = attr.ib(factory=tuple, converter=tuple)

    @property
    def d(self) -> int:
        return self.wts.d

    def locate(self, stream: ResidualStream) -> Matrix:
        """Cut the expected ``d x d`` block out of ``stream`` (works for single and stacked streams)."""
        return extract_block(stream, self.expected_level, self.expected_rows[0], self.expected_col_block, self.d)


def extract_block(stream: ResidualStream, level: int, row_offset: int, col_block: int, d: int) -> Matrix:
    h = stream.levels[level]
    return h[..., row_offset:row_offset + d, col_block * d:(col_block + 1) * d]


def _check_args(d: int, beta1: float, beta2: float):
    if int(d) < 2:
        raise DomainError(f"constructions need d >= 2, got d={d}")
    if beta1 < 0 or beta2 < 0:
        raise DomainError(f"gains must be non-negative, got beta1={beta1} beta2={beta2}")


def _bundle(name: str, d: int, beta1: float, beta2: float, mask: MaskMode, padding: Padding,
            p1: BlockPattern, p2: BlockPattern, rows: Span, col_block: int) -> ConstructionBundle:
    base = InputLayout(d, padding).width
    wk = level_width(base, 2)
    w_pattern = BlockPattern.single(d, (1, wk // d), 0, col_block, 'I')
    wts = ModelWeights(
        d=d, attn=[p1.scaled(beta1), p2.scaled(beta2)], w=w_pattern.template(),
        mask=mask, padding=padding, readout_rows=rows,
    )
    log.debug("built %s: d=%d beta1=%s beta2=%s A1=%s A2=%s", name, d, beta1, beta2, p1.describe(), p2.describe())
    return ConstructionBundle(
        name=name, wts=wts, expected_rows=rows, expected_col_block=col_block, beta1=beta1, beta2=beta2,
        patterns=(p1, p2, w_pattern),
    )


def build_thm2(d: int, beta1: float = settings.DEFAULT_BETA, beta2: float = None) -> ConstructionBundle:
    """
    Mask-free, unpadded construction. ``A^(1) = beta1 * (I at block (2, 1) of the 3x3 grid)``,
    ``A^(2) = beta2 * (I at block (1, 3) of the 6x6 grid)``; ``Y`` appears at rows ``0..d-1`` of the layer-2
    token block (level 2, column block 6).
    """
    beta2 = beta1 if beta2 is None else beta2
    _check_args(d, beta1, beta2)
    p1 = BlockPattern.single(d, 3, 2, 1, 'I')
    p2 = BlockPattern.single(d, 6, 1, 3, 'I')
    return _bundle('thm2_cmf', d, beta1, beta2, MaskMode.CMF, Padding.NONE, p1, p2, (0, d), 6)


def build_thm3(d: int, beta1: float = settings.DEFAULT_BETA, beta2: float = None) -> ConstructionBundle:
    """
    Causal construction over the padded input ``[BOS; P; Y_P; S]``. ``A^(1) = beta1 * (I at block (2, 1) of the
    4x4 grid)``, ``A^(2) = beta2 * (I at block (3, 4) of the 8x8 grid)``; ``Y`` appears on the scratch rows
    (the last ``d`` rows) of the layer-2 token block (level 2, column block 8).
    """
    beta2 = beta1 if beta2 is None else beta2
    _check_args(d, beta1, beta2)
    lay = InputLayout(d, Padding.SCRATCH)
    p1 = BlockPattern.single(d, 4, 2, 1, 'I')
    p2 = BlockPattern.single(d, 8, 3, 4, 'I')
    rows = (lay.scratch_start, lay.scratch_start + d)
    return _bundle('thm3_scratch', d, beta1, beta2, MaskMode.CAUSAL, Padding.SCRATCH, p1, p2, rows, 8)


def build_antidiag(d: int, beta1: float = settings.DEFAULT_BETA, beta2: float = None) -> ConstructionBundle:
    """
    Mask-free construction built around the antidiagonal ``J``.

    ``A^(1) = beta1 * (J at (1, 1) + I at (2, 1))`` on the 3x3 grid: ``P`` row ``i`` reads ``P`` row ``d-1-i``
    and ``Y_P`` row ``j`` reads ``P`` row ``j``. ``A^(2) = beta2 * (J at (4, 3) - ONES at (1, 1))`` on the 6x6
    grid. ``W`` is the identity on column block 6, so ``h^(2) W^T`` has ``Y`` in its top ``d`` rows.
    """
    beta2 = beta1 if beta2 is None else beta2
    _check_args(d, beta1, beta2)
    p1 = BlockPattern(d=d, grid=(3, 3), blocks=((1, 1, 'J', 1.0), (2, 1, 'I', 1.0)))
    p2 = BlockPattern(d=d, grid=(6, 6), blocks=((4, 3, 'J', 1.0), (1, 1, 'ONES', -1.0)))
    return _bundle('antidiag_cmf', d, beta1, beta2, MaskMode.CMF, Padding.NONE, p1, p2, (0, d), 6)


BUILDERS: Dict[str, Callable[..., ConstructionBundle]] = {
    'thm2_cmf': build_thm2,
    'thm3_scratch': build_thm3,
    'antidiag_cmf': build_antidiag,
}


def build(name: str, d: int, beta1: float = settings.DEFAULT_BETA, beta2: float = None) -> ConstructionBundle:
    """Build the bundle called ``name``. :raises UsageError: for an unknown name"""
    if name not in BUILDERS:
        raise UsageError(f"unknown construction '{name}' (expected one of: {', '.join(BUILDERS)})")
    return BUILDERS[name](d, beta1, beta2)


def learned_reference(d: int) -> Tuple[BlockPattern, BlockPattern, BlockPattern]:
    """
    Block patterns the trained two-layer mask-free model converges to (unit gain): ``A^(1)`` pairs the first
    positional block with the second (``I`` at ``(1, 2)``), ``A^(2)`` pairs the first positional block with the
    token block (``I`` at ``(1, 0)``) and ``W`` selects column block 9, the layer-2 copy of the layer-1 token
    block. These are reference patterns for :func:`privex.permlab.probe.pattern_fit`, not a verified builder.
    """
    return (
        BlockPattern.single(d, 3, 1, 2, 'I'),
        BlockPattern.single(d, 6, 1, 0, 'I'),
        BlockPattern.single(d, (1, 12), 0, 9, 'I'),
    )


@attr.s(frozen=True)
class VerificationReport:
    """Per-trial max-abs recovery errors of one bundle, and whether they all stayed below ``tol``."""
    name: str = attr.ib()
    d: int = attr.ib()
    tol: float = attr.ib()
    errors: Tuple[float, ...] = attr.ib(converter=tuple)

    @property
    def trials(self) -> int:
        return len(self.errors)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else float('nan')

    @property
    def passed(self) -> bool:
        return bool(self.errors) and self.max_error < self.tol

    def summary(self) -> str:
        return (f"name={self.name} d={self.d} trials={self.trials} max_err={self.max_error:.6e} "
                f"tol={self.tol:g} result={'PASS' if self.passed else 'FAIL'}")


def recovery_errors(bundle: ConstructionBundle, batch: TaskBatch) -> np.ndarray:
    """Max-abs error between the bundled block and ``Y`` for every instance of ``batch``."""
    if batch.padding is not bundle.wts.padding:
        raise DomainError(f"batch padding '{batch.padding.value}' doesn't match bundle padding '{bundle.wts.padding.value}'")
    stream = forward(bundle.wts, batch.embed())
    found = bundle.locate(stream)
    return np.max(np.abs(found - batch.y), axis=(-2, -1))


def verify(bundle: ConstructionBundle, trials: int = 100, rng: RNG_TYPES = None, tol: float = settings.DEFAULT_TOL) -> VerificationReport:
    """
    Sample ``trials`` fresh ``(P, Y)`` pairs, run the bundle's weights, and compare its expected block with
    ``Y``. Failures are reported, never raised.
    """
    if int(trials) < 1:
        raise DomainError(f"trials must be >= 1, got {trials}")
    batch = sample_batch(bundle.d, int(trials), as_rng(rng), padding=bundle.wts.padding)
    errors = recovery_errors(bundle, batch)
    for k, e in enumerate(errors):
        log.debug("verify %s trial %d: max_err=%.3e", bundle.name, k, e)
    report = VerificationReport(name=bundle.name, d=bundle.d, tol=float(tol), errors=[float(e) for e in errors])
    if not report.passed:
        log.warning("verification failed: %s", report.summary())
    return report


def verify_exhaustive(bundle: ConstructionBundle, rng: RNG_TYPES = None, tol: float = settings.DEFAULT_TOL) -> VerificationReport:
    """Like :func:`verify` but over every one of the ``d!`` permutations, each with a random binary ``Y``."""
    rng = as_rng(rng)
    perms = [p.matrix for p in all_permutations(bundle.d)]
    p = np.stack(perms)
    y = rng.integers(0, 2, size=p.shape).astype(DTYPE)
    batch = TaskBatch(p=p, y=y, y_p=np.matmul(p, y), padding=bundle.wts.padding)
    errors = recovery_errors(bundle, batch)
    return VerificationReport(name=bundle.name, d=bundle.d, tol=float(tol), errors=[float(e) for e in errors])


def gain_sweep(name: str, d: int, betas: Sequence[float], batch: TaskBatch = None, rng: RNG_TYPES = None,
               n: int = 32) -> List[Tuple[float, float]]:
    """
    Max-abs recovery error of construction ``name`` at each gain in ``betas`` (``beta1 = beta2 = beta``), all on
    the same instance set. Returns ``[(beta, max_err), ...]`` in the order given.
    """
    if batch is None:
        pad = Padding.SCRATCH if name == 'thm3_scratch' else Padding.NONE
        batch = sample_batch(d, n, as_rng(rng), padding=pad)
    out = []
    for beta in betas:
        err = float(np.max(recovery_errors(build(name, d, beta, beta), batch)))
        log.debug("gain sweep %s d=%d beta=%s: max_err=%.3e", name, d, beta, err)
        out.append((float(beta), err))
    return out
