"""
Inverse-permutation task instances.

A task instance is a permutation matrix ``P`` (row ``i`` is the unit vector ``e_{pi(i)}``), a target ``Y`` and
the permuted target ``Y_P = P Y``. The model receives ``X = [P; Y_P]`` (or the scratch-padded
``[BOS; P; Y_P; S]``) and must recover ``Y = P^T Y_P``.

Indexing is 0-based throughout. Where the proofs talk about "row ``d + i + 1``" of the input, that is row
``d + i`` here (or ``d + i + 1`` in the padded layout, whose row 0 is the BOS token).

Randomness always comes from an explicitly passed :class:`numpy.random.Generator`; pass an ``int`` anywhere a
generator is accepted and it will be used as a seed. For parallel generation, derive independent seeds with
:func:`derive_seed`.
"""
import itertools
import logging
from enum import Enum
from typing import Iterator, Optional, Sequence, Tuple, Union

import attr
import numpy as np

from privex.permlab.exceptions import DomainError, ShapeError
from privex.permlab.numerics import DTYPE, Matrix, hconcat, identity, matmul, transpose, vconcat, zeros

log = logging.getLogger(__name__)

RNG_TYPES = Union[np.random.Generator, int, None]


class Padding(Enum):
    NONE = 'none'
    SCRATCH = 'scratch'


def as_rng(rng: RNG_TYPES) -> np.random.Generator:
    """Return ``rng`` unchanged if it's already a Generator, otherwise seed a fresh one from it."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def derive_seed(base: int, index: int) -> int:
    """Seed for the ``index``'th independently generated instance / trial: ``base XOR index``."""
    return int(base) ^ int(index)


def _check_dim(d: int):
    if int(d) < 1:
        raise DomainError(f"dimension d must be >= 1, got {d}")


@attr.s(frozen=True)
class Permutation:
    """
    A bijection on ``{0, ..., d-1}``, stored as the sequence ``(pi(0), ..., pi(d-1))``.

        >>> p = Permutation((2, 0, 1))
        >>> p.matrix.tolist()
        [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
        >>> p.inverse.mapping
        (1, 2, 0)
    """
    mapping: Tuple[int, ...] = attr.ib(converter=lambda m: tuple(int(x) for x in m))

    @mapping.validator
    def _check_bijection(self, attribute, value):
        if sorted(value) != list(range(len(value))):
            raise DomainError(f"not a permutation of 0..{len(value) - 1}: {value}")

    @property
    def d(self) -> int:
        return len(self.mapping)

    @property
    def matrix(self) -> Matrix:
        """The 0/1 matrix whose row ``i`` is ``e_{pi(i)}``"""
        return identity(self.d)[list(self.mapping)]

    @property
    def inverse(self) -> 'Permutation':
        inv = [0] * self.d
        for i, target in enumerate(self.mapping):
            inv[target] = i
        return Permutation(inv)

    @property
    def is_identity(self) -> bool:
        return self.mapping == tuple(range(self.d))

    @classmethod
    def from_matrix(cls, p: Matrix) -> 'Permutation':
        return cls(int(j) for j in np.argmax(check_permutation_matrix(p), axis=1))

    def __len__(self):
        return self.d


def check_permutation_matrix(p) -> Matrix:
    """
    Validate that ``p`` is a square 0/1 matrix whose rows and columns each sum to exactly 1, and return it as
    a float64 array.

    :raises ShapeError: ``p`` isn't square
    :raises DomainError: entries aren't 0/1, or a row / column doesn't sum to 1
    """
    if isinstance(p, Permutation):
        return p.matrix
    if isinstance(p, PermutationMatrix):
        return p.p
    p = np.asarray(p, dtype=DTYPE)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ShapeError(f"permutation matrix must be square, got shape {p.shape}")
    if not np.all((p == 0) | (p == 1)):
        raise DomainError("permutation matrix entries must be 0 or 1")
    if not (np.all(p.sum(axis=0) == 1) and np.all(p.sum(axis=1) == 1)):
        raise DomainError("every row and column of a permutation matrix must sum to 1")
    return p


@attr.s(frozen=True, eq=False)
class PermutationMatrix:
    """The ``d x d`` 0/1 form ``P`` of a :class:`.Permutation`. Validated on construction."""
    p: Matrix = attr.ib(converter=check_permutation_matrix)

    @property
    def d(self) -> int:
        return int(self.p.shape[0])

    @property
    def perm(self) -> Permutation:
        return Permutation.from_matrix(self.p)

    @classmethod
    def from_permutation(cls, perm: Union[Permutation, Sequence[int]]) -> 'PermutationMatrix':
        perm = perm if isinstance(perm, Permutation) else Permutation(perm)
        return cls(perm.matrix)

    def __eq__(self, other):
        if not isinstance(other, PermutationMatrix):
            return NotImplemented
        return np.array_equal(self.p, other.p)


P_TYPES = Union[PermutationMatrix, Permutation, Matrix]


def sample_permutation(d: int, rng: RNG_TYPES) -> Permutation:
    """
    Draw a permutation uniformly from all ``d!`` permutations (Fisher-Yates shuffle via
    :meth:`numpy.random.Generator.permutation`). Deterministic for a given seed.

    :raises DomainError: ``d < 1``
    """
    _check_dim(d)
    return Permutation(as_rng(rng).permutation(int(d)))


def sample_target(d: int, rng: RNG_TYPES, dist: str = 'binary') -> Matrix:
    """
    Draw a ``d x d`` target ``Y``.

    :param str dist: ``binary`` (default) - i.i.d. uniform over {0, 1}; ``uniform`` - i.i.d. U[0, 1), used by
                     gradient checks so no two targets coincide.
    :raises DomainError: ``d < 1`` or an unknown ``dist``
    """
    _check_dim(d)
    rng = as_rng(rng)
    if dist == 'binary':
        return rng.integers(0, 2, size=(d, d)).astype(DTYPE)
    if dist == 'uniform':
        return rng.random((d, d))
    raise DomainError(f"unknown target distribution '{dist}' (expected 'binary' or 'uniform')")


def all_permutations(d: int) -> Iterator[Permutation]:
    """Every permutation of ``0..d-1`` in lexicographic order, starting with the identity."""
    _check_dim(d)
    for m in itertools.permutations(range(d)):
        yield Permutation(m)


def _pm(p: P_TYPES) -> Matrix:
    return check_permutation_matrix(p)


def permute(p: P_TYPES, y: Matrix) -> Matrix:
    """``Y_P = P Y``: row ``i`` of the result is row ``pi(i)`` of ``y``."""
    return matmul(_pm(p), y)


def oracle_invert(p: P_TYPES, y_p: Matrix) -> Matrix:
    """The exact answer ``Y = P^T Y_P``. ``oracle_invert(p, permute(p, y))`` equals ``y`` bitwise."""
    return matmul(transpose(_pm(p)), y_p)


def below_diagonal_witness(p: P_TYPES) -> Optional[Tuple[int, int]]:
    """
    Find ``(i, j)`` with ``P[i, j] = 1`` and ``j < i``, or ``None`` when ``P`` is the identity.

    ``i`` is the last row which is not its own unit vector ``e_i``. All rows after it are ``e_{i+1}, ...``, so
    the 1 in row ``i`` can only sit left of the diagonal.

        >>> below_diagonal_witness(Permutation((2, 0, 1)))
        (2, 1)
    """
    p = _pm(p)
    d = p.shape[0]
    for i in reversed(range(d)):
        if p[i, i] != 1:
            j = int(np.argmax(p[i]))
            if j >= i:
                raise DomainError(f"row {i} has no 1 left of the diagonal although every later row is fixed; "
                                  f"not a permutation matrix")
            return i, j
    return None


@attr.s(frozen=True)
class InputLayout:
    """
    Row and column geometry of an assembled input.

    ``rows`` is the sequence length (including the BOS row when padded), ``pos_width`` the width of the one-hot
    positional block, and ``width = d + pos_width`` the width of ``h^(0)``.
    """
    d: int = attr.ib()
    padding: Padding = attr.ib(converter=Padding)

    @property
    def has_bos(self) -> bool:
        return self.padding is Padding.SCRATCH

    @property
    def rows(self) -> int:
        return 3 * self.d + 1 if self.has_bos else 2 * self.d

    @property
    def pos_width(self) -> int:
        # the BOS row has no positional one-hot of its own
        return self.rows - 1 if self.has_bos else self.rows

    @property
    def width(self) -> int:
        return self.d + self.pos_width

    @property
    def p_start(self) -> int:
        return 1 if self.has_bos else 0

    @property
    def yp_start(self) -> int:
        return self.p_start + self.d

    @property
    def scratch_start(self) -> Optional[int]:
        return self.yp_start + self.d if self.has_bos else None

    @property
    def p_rows(self) -> range:
        return range(self.p_start, self.p_start + self.d)

    @property
    def yp_rows(self) -> range:
        return range(self.yp_start, self.yp_start + self.d)

    @property
    def scratch_rows(self) -> range:
        return range(self.scratch_start, self.scratch_start + self.d) if self.has_bos else range(0)


@attr.s(frozen=True, eq=False)
class TaskInstance:
    """One problem: ``perm`` (``P``), target ``y`` and the permuted target ``y_p = P y``."""
    perm: PermutationMatrix = attr.ib(converter=lambda p: p if isinstance(p, PermutationMatrix) else PermutationMatrix(p))
    y: Matrix = attr.ib(converter=lambda y: np.asarray(y, dtype=DTYPE))
    y_p: Matrix = attr.ib(converter=lambda y: np.asarray(y, dtype=DTYPE))
    padding: Padding = attr.ib(default=Padding.NONE, converter=Padding)

    def __attrs_post_init__(self):
        if self.y.shape != self.perm.p.shape:
            raise ShapeError(f"target Y must be {self.perm.p.shape}, got {self.y.shape}")
        if not np.array_equal(self.y_p, permute(self.perm, self.y)):
            raise DomainError("y_p must equal P @ y")

    @property
    def d(self) -> int:
        return self.perm.d

    @property
    def layout(self) -> InputLayout:
        return InputLayout(self.d, self.padding)

    @classmethod
    def build(cls, p: P_TYPES, y: Matrix, padding: Union[Padding, str] = Padding.NONE) -> 'TaskInstance':
        pm = p if isinstance(p, PermutationMatrix) else PermutationMatrix(_pm(p))
        return cls(perm=pm, y=y, y_p=permute(pm, y), padding=padding)


def sample_instance(d: int, rng: RNG_TYPES, padding: Union[Padding, str] = Padding.NONE, dist: str = 'binary') -> TaskInstance:
    """Draw ``P`` then ``Y`` from ``rng`` and build the instance."""
    rng = as_rng(rng)
    perm = sample_permutation(d, rng)
    return TaskInstance.build(perm, sample_target(d, rng, dist=dist), padding)


@attr.s(frozen=True, eq=False)
class AssembledInput:
    """The token part ``x`` and the embedding ``h0 = [x, positions]`` fed to the model."""
    x: Matrix = attr.ib()
    h0: Matrix = attr.ib()
    layout: InputLayout = attr.ib()


def embed(p: Matrix, y_p: Matrix, padding: Union[Padding, str] = Padding.NONE) -> Matrix:
    """
    Build ``h^(0)`` for a single instance (``(d, d)`` arrays) or a stack of them (``(n, d, d)``).

    ``padding=none`` gives ``[[P, I, 0], [Y_P, 0, I]]``. ``padding=scratch`` prepends an all-zeros BOS row
    and appends ``d`` zero scratch rows (``S = 1 s^T`` with ``s = 0``); its positional block is ``3d`` wide and
    the BOS row's positional part is zero too.
    """
    p, y_p = np.asarray(p, dtype=DTYPE), np.asarray(y_p, dtype=DTYPE)
    if p.shape != y_p.shape or p.shape[-1] != p.shape[-2]:
        raise ShapeError(f"embed: P and Y_P must be matching square matrices, got {p.shape} and {y_p.shape}")
    lay = InputLayout(int(p.shape[-1]), padding)
    lead, d = p.shape[:-2], lay.d
    if lay.has_bos:
        bos, scratch = np.zeros(lead + (1, d), dtype=DTYPE), np.zeros(lead + (d, d), dtype=DTYPE)
        x = vconcat(bos, p, y_p, scratch)
        pos = vconcat(zeros(1, lay.pos_width), identity(lay.pos_width))
    else:
        x = vconcat(p, y_p)
        pos = identity(lay.pos_width)
    pos = np.broadcast_to(pos, lead + pos.shape)
    return hconcat(x, pos)


def assemble_input(inst: TaskInstance) -> AssembledInput:
    """Assemble ``X`` and ``h^(0)`` for ``inst`` according to its padding mode."""
    h0 = embed(inst.perm.p, inst.y_p, inst.padding)
    return AssembledInput(x=h0[:, :inst.d].copy(), h0=h0, layout=inst.layout)


@attr.s(frozen=True, eq=False)
class TaskBatch:
    """``n`` stacked instances: ``p``, ``y`` and ``y_p`` all have shape ``(n, d, d)``."""
    p: Matrix = attr.ib()
    y: Matrix = attr.ib()
    y_p: Matrix = attr.ib()
    padding: Padding = attr.ib(default=Padding.NONE, converter=Padding)

    @property
    def n(self) -> int:
        return int(self.p.shape[0])

    @property
    def d(self) -> int:
        return int(self.p.shape[-1])

    @property
    def layout(self) -> InputLayout:
        return InputLayout(self.d, self.padding)

    def embed(self) -> Matrix:
        return embed(self.p, self.y_p, self.padding)

    def instance(self, k: int) -> TaskInstance:
        return TaskInstance(perm=PermutationMatrix(self.p[k]), y=self.y[k], y_p=self.y_p[k], padding=self.padding)

    @classmethod
    def from_instances(cls, instances: Sequence[TaskInstance]) -> 'TaskBatch':
        if len(instances) == 0:
            raise DomainError("a batch needs at least one instance")
        pads = {inst.padding for inst in instances}
        if len(pads) > 1:
            raise DomainError("all instances of a batch must share one padding mode")
        return cls(
            p=np.stack([inst.perm.p for inst in instances]),
            y=np.stack([inst.y for inst in instances]),
            y_p=np.stack([inst.y_p for inst in instances]),
            padding=pads.pop(),
        )


def sample_batch(d: int, n: int, rng: RNG_TYPES, padding: Union[Padding, str] = Padding.NONE, dist: str = 'binary') -> TaskBatch:
    """
    Draw ``n`` independent instances at once: each row of an ``(n, d)`` index table is shuffled independently
    (uniform over ``d!``), then targets are drawn for all instances.
    """
    _check_dim(d)
    if int(n) < 1:
        raise DomainError(f"batch size must be >= 1, got {n}")
    rng = as_rng(rng)
    perms = rng.permuted(np.tile(np.arange(d), (n, 1)), axis=1)
    p = identity(d)[perms]
    if dist == 'binary':
        y = rng.integers(0, 2, size=(n, d, d)).astype(DTYPE)
    elif dist == 'uniform':
        y = rng.random((n, d, d))
    else:
        raise DomainError(f"unknown target distribution '{dist}' (expected 'binary' or 'uniform')")
    return TaskBatch(p=p, y=y, y_p=np.matmul(p, y), padding=padding)
