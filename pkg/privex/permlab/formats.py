"""
Plain-text file formats: weight checkpoints, their construction metadata sidecar, the training metrics log and
heatmap exports.

**Checkpoint** (lossless, every value written with 17 significant digits)::

    DTX1
    d=3 depth=2 mask=cmf pad=none readout=0:3 seed=0 step=0
    MAT A1 9 9
    0 0 0 ...
    ...
    MAT A2 18 18
    ...
    MAT W 3 36
    ...

**Metadata sidecar** ``<checkpoint>.meta`` - ``key=value`` lines describing where a construction puts ``Y``.

**Metrics log** - CSV with the header ``step,mse``, one row per evaluation, flushed after every row.

**Heatmap** - a plain PGM (``P2``) image with one pixel per weight (``255 * |w| / max|w|``), a CSV of the raw
values and optionally a PNG rendered with matplotlib.
"""
import csv
import logging
import os
import textwrap
from typing import Dict, List, Optional, TextIO, Tuple, Union

import attr
import numpy as np
from dotenv import dotenv_values

from privex.permlab.constructions import ConstructionBundle
from privex.permlab.exceptions import DomainError, PermlabFormatError, ShapeError, UsageError
from privex.permlab.model import MaskMode, ModelWeights, Span
from privex.permlab.numerics import DTYPE, Matrix
from privex.permlab.task import Padding

log = logging.getLogger(__name__)

FORMAT_TAG = 'DTX1'

HEADER_KEYS = ('d', 'depth', 'mask', 'pad', 'readout', 'seed', 'step')

META_KEYS = ('name', 'beta1', 'beta2', 'expected_rows', 'expected_col_block', 'level')

PathLike = Union[str, os.PathLike]


def fmt_float(x: float) -> str:
    return '%.17g' % float(x)


def fmt_span(span: Span) -> str:
    return f"{span[0]}:{span[1]}"


def parse_span(value: str) -> Span:
    lo, sep, hi = str(value).partition(':')
    if not sep:
        raise ValueError(f"expected lo:hi, got '{value}'")
    return int(lo), int(hi)


@attr.s(frozen=True, eq=False)
class Checkpoint:
    wts: ModelWeights = attr.ib()
    seed: int = attr.ib(default=0, converter=int)
    step: int = attr.ib(default=0, converter=int)

    @property
    def header(self) -> str:
        w = self.wts
        return f"d={w.d} depth={w.depth} mask={w.mask.value} pad={w.padding.value} readout={fmt_span(w.rows)} " \
               f"seed={self.seed} step={self.step}"


def dumps_checkpoint(ck: Checkpoint) -> str:
    lines = [FORMAT_TAG, ck.header]
    for name, m in zip(ck.wts.param_names, ck.wts.params):
        lines.append(f"MAT {name} {m.shape[0]} {m.shape[1]}")
        lines.extend(' '.join(fmt_float(x) for x in row) for row in m)
    return '\n'.join(lines) + '\n'


def save_checkpoint(filename: PathLike, wts: ModelWeights, seed: int = 0, step: int = 0) -> Checkpoint:
    """Write ``wts`` to ``filename``. Loading it back gives bitwise identical matrices."""
    ck = Checkpoint(wts=wts, seed=seed, step=step)
    with open(filename, 'w') as fp:
        fp.write(dumps_checkpoint(ck))
    log.debug("saved checkpoint %s (%s)", filename, ck.header)
    return ck


def _parse_header(line: str, lineno: int, source: Optional[str]) -> Dict[str, str]:
    fields = {}
    for tok in line.split():
        key, sep, value = tok.partition('=')
        if not sep:
            raise PermlabFormatError(f"malformed header field '{tok}'", line=lineno, path=source)
        fields[key] = value
    missing = [k for k in HEADER_KEYS if k not in fields]
    if missing:
        raise PermlabFormatError(f"header is missing {', '.join(missing)}", line=lineno, path=source)
    unknown = [k for k in fields if k not in HEADER_KEYS]
    if unknown:
        raise PermlabFormatError(f"unknown header field(s) {', '.join(unknown)}", line=lineno, path=source)
    return fields


def loads_checkpoint(text: str, source: str = None) -> Checkpoint:
    """
    Parse checkpoint text.

    :raises PermlabFormatError: on any malformed, missing or inconsistent content; the message names the line
    """
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_TAG:
        raise PermlabFormatError(f"expected format tag '{FORMAT_TAG}'", line=1, path=source)
    if len(lines) < 2:
        raise PermlabFormatError("missing header line", line=2, path=source)
    hdr = _parse_header(lines[1], 2, source)
    try:
        d, depth = int(hdr['d']), int(hdr['depth'])
        mask, pad = MaskMode(hdr['mask']), Padding(hdr['pad'])
        readout = parse_span(hdr['readout'])
        seed, step = int(hdr['seed']), int(hdr['step'])
    except ValueError as e:
        raise PermlabFormatError(f"bad header value: {e}", line=2, path=source)

    names = [f"A{i + 1}" for i in range(depth)] + ['W']
    mats: List[Matrix] = []
    pos = 2
    for name in names:
        lineno = pos + 1
        if pos >= len(lines):
            raise PermlabFormatError(f"unexpected end of file, expected 'MAT {name} ...'", line=lineno, path=source)
        parts = lines[pos].split()
        if len(parts) != 4 or parts[0] != 'MAT' or parts[1] != name:
            raise PermlabFormatError(f"expected 'MAT {name} <rows> <cols>', got '{lines[pos]}'", line=lineno, path=source)
        try:
            rows, cols = int(parts[2]), int(parts[3])
        except ValueError:
            raise PermlabFormatError(f"bad matrix dimensions in '{lines[pos]}'", line=lineno, path=source)
        pos += 1
        m = np.empty((rows, cols), dtype=DTYPE)
        for r in range(rows):
            lineno = pos + 1
            if pos >= len(lines):
                raise PermlabFormatError(f"unexpected end of file inside matrix {name}", line=lineno, path=source)
            vals = lines[pos].split()
            if len(vals) != cols:
                raise PermlabFormatError(f"matrix {name} row {r}: expected {cols} values, got {len(vals)}",
                                         line=lineno, path=source)
            try:
                m[r] = [float(v) for v in vals]
            except ValueError as e:
                raise PermlabFormatError(f"matrix {name} row {r}: {e}", line=lineno, path=source)
            pos += 1
        mats.append(m)

    if any(ln.strip() for ln in lines[pos:]):
        raise PermlabFormatError("unexpected trailing content", line=pos + 1, path=source)
    try:
        wts = ModelWeights(d=d, attn=mats[:-1], w=mats[-1], mask=mask, padding=pad, readout_rows=readout)
    except (ShapeError, DomainError) as e:
        raise PermlabFormatError(f"inconsistent checkpoint: {e}", path=source)
    return Checkpoint(wts=wts, seed=seed, step=step)


def load_checkpoint(filename: PathLike) -> Checkpoint:
    with open(filename, 'r') as fp:
        return loads_checkpoint(fp.read(), source=str(filename))


def meta_path(checkpoint: PathLike) -> str:
    return f"{checkpoint}.meta"


@attr.s(frozen=True)
class ConstructionMeta:
    """The sidecar of a constructed checkpoint: which construction it is and where ``Y`` should appear."""
    name: str = attr.ib()
    beta1: float = attr.ib(converter=float)
    beta2: float = attr.ib(converter=float)
    expected_rows: Span = attr.ib(converter=lambda s: (int(s[0]), int(s[1])))
    expected_col_block: int = attr.ib(converter=int)
    level: int = attr.ib(default=2, converter=int)

    def to_dict(self) -> Dict[str, str]:
        return {
            'name': self.name, 'beta1': fmt_float(self.beta1), 'beta2': fmt_float(self.beta2),
            'expected_rows': fmt_span(self.expected_rows), 'expected_col_block': str(self.expected_col_block),
            'level': str(self.level),
        }

    @classmethod
    def from_bundle(cls, bundle) -> 'ConstructionMeta':
        return cls(
            name=bundle.name, beta1=bundle.beta1, beta2=bundle.beta2, expected_rows=bundle.expected_rows,
            expected_col_block=bundle.expected_col_block, level=bundle.expected_level,
        )

    def bundle(self, wts: ModelWeights):
        """Rebuild the :class:`.ConstructionBundle` for checkpointed weights."""
        return ConstructionBundle(
            name=self.name, wts=wts, expected_rows=self.expected_rows, expected_col_block=self.expected_col_block,
            beta1=self.beta1, beta2=self.beta2, expected_level=self.level,
        )


def save_meta(checkpoint: PathLike, meta: ConstructionMeta) -> str:
    filename = meta_path(checkpoint)
    with open(filename, 'w') as fp:
        fp.writelines(f"{k}={v}\n" for k, v in meta.to_dict().items())
    return filename


def load_meta(checkpoint: PathLike) -> ConstructionMeta:
    """
    Parsed with :func:`dotenv.dotenv_values`, same as a ``-c`` config file, so quoting and ``export`` prefixes
    behave identically in both.

    :raises PermlabFormatError: missing / unknown / valueless keys or unparsable values
    :raises FileNotFoundError: there is no sidecar next to ``checkpoint``
    """
    filename = meta_path(checkpoint)
    if not os.path.isfile(filename):
        raise FileNotFoundError(f"no metadata sidecar at '{filename}'")
    fields = dotenv_values(filename)
    blank = [k for k, v in fields.items() if v is None]
    if blank:
        raise PermlabFormatError(f"keys without a value: {blank}", path=filename)
    missing = [k for k in META_KEYS if k not in fields]
    unknown = [k for k in fields if k not in META_KEYS]
    if missing or unknown:
        raise PermlabFormatError(f"missing keys {missing}, unknown keys {unknown}", path=filename)
    try:
        return ConstructionMeta(
            name=fields['name'], beta1=fields['beta1'], beta2=fields['beta2'],
            expected_rows=parse_span(fields['expected_rows']), expected_col_block=fields['expected_col_block'],
            level=fields['level'],
        )
    except ValueError as e:
        raise PermlabFormatError(f"bad metadata value: {e}", path=filename)


class MetricsLog:
    """
    Append-only ``step,mse`` CSV. Each row is flushed as soon as it's written, so a crashed run keeps every
    evaluation logged before the crash.

        >>> with MetricsLog('/tmp/metrics.csv') as ml:
        ...     ml.append(1024, 0.25)
    """
    def __init__(self, filename: PathLike):
        self.filename = filename
        self._fp: Optional[TextIO] = None
        self._writer = None

    def open(self) -> 'MetricsLog':
        self._fp = open(self.filename, 'w', newline='')
        self._writer = csv.writer(self._fp, lineterminator='\n')
        self._writer.writerow(['step', 'mse'])
        self._fp.flush()
        return self

    def append(self, step: int, mse: float):
        if self._fp is None:
            self.open()
        self._writer.writerow([int(step), fmt_float(mse)])
        self._fp.flush()

    def close(self):
        if self._fp is not None:
            self._fp.close()
            self._fp = None

    def __enter__(self):
        return self.open()

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()


def read_metrics(filename: PathLike) -> List[Tuple[int, float]]:
    with open(filename, 'r', newline='') as fp:
        rows = list(csv.reader(fp))
    if not rows or rows[0] != ['step', 'mse']:
        raise PermlabFormatError("expected header 'step,mse'", line=1, path=str(filename))
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            out.append((int(row[0]), float(row[1])))
        except (ValueError, IndexError):
            raise PermlabFormatError(f"bad metrics row {row}", line=lineno, path=str(filename))
    return out


def to_gray(m: Matrix) -> np.ndarray:
    """``round(255 * |m| / max|m|)`` as integers (all zeros for an all-zero matrix)."""
    a = np.abs(np.asarray(m, dtype=DTYPE))
    scale = float(a.max()) if a.size else 0.0
    if scale == 0 or not np.isfinite(scale):
        return np.zeros(a.shape, dtype=int)
    return np.rint(255.0 * a / scale).astype(int)


def dumps_pgm(m: Matrix) -> str:
    g = to_gray(m)
    lines = ['P2', f"{g.shape[1]} {g.shape[0]}", '255']
    for row in g:
        # plain PGM lines are limited to 70 characters
        lines.extend(textwrap.wrap(' '.join(str(v) for v in row), 70))
    return '\n'.join(lines) + '\n'


def write_heatmap(m: Matrix, out_path: PathLike, png: bool = False, title: str = None) -> List[str]:
    """
    Write ``<out_path>`` (PGM), ``<stem>.csv`` (raw values) and, if ``png`` is set, ``<stem>.png``. Returns the
    written file names.

    :raises UsageError: ``png`` was requested but matplotlib isn't installed
    """
    m = np.asarray(m, dtype=DTYPE)
    stem = os.path.splitext(str(out_path))[0]
    written = [str(out_path), f"{stem}.csv"]
    with open(out_path, 'w') as fp:
        fp.write(dumps_pgm(m))
    with open(f"{stem}.csv", 'w', newline='') as fp:
        csv.writer(fp, lineterminator='\n').writerows([[fmt_float(x) for x in row] for row in m])
    if png:
        written.append(render_png(m, f"{stem}.png", title=title))
    return written


def render_png(m: Matrix, filename: str, title: str = None) -> str:
    try:
        import matplotlib
        matplotlib.use('Agg')
        import matplotlib.pyplot as plt
    except ImportError:
        raise UsageError("PNG heatmaps need matplotlib: pip install 'privex_permlab[plot]'")
    fig, ax = plt.subplots(figsize=(6, 6 * m.shape[0] / max(m.shape[1], 1) + 0.5))
    im = ax.imshow(m, cmap='viridis', interpolation='nearest')
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    fig.savefig(filename, bbox_inches='tight')
    plt.close(fig)
    return filename
