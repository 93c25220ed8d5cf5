"""
The ``permlab`` command line tool.

Sub-commands::

    permlab construct thm2_cmf --d 10 --beta 50 --out thm2.dtx     # checkpoint + thm2.dtx.meta
    permlab verify thm2.dtx --trials 100 --tol 1e-6
    permlab train --d 10 --mask cmf --steps 8192 --out cmf.dtx --metrics cmf.csv
    permlab eval cmf.dtx --n 1024
    permlab probe cmf.dtx --mode weights
    permlab gradcheck --d 3 --depth 2 --mask causal
    permlab heatmap cmf.dtx --layer A1 --out a1.pgm --png

Every option except the positional ones can also come from a ``key=value`` config file passed with
``-c / --config`` (flags win over the file, the file wins over built-in defaults). Unknown keys are rejected.
When no seed is given anywhere, ``PERMLAB_SEED`` is used.

Results are printed to stdout as ``key=value`` lines. On failure a single line ``error: <ClassName>: <message>``
goes to stderr and the exit code comes from the exception (see :mod:`privex.permlab.exceptions`).
"""
import argparse
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from dotenv import dotenv_values, find_dotenv, load_dotenv

# settings reads the environment at import time, so the working directory's .env has to be loaded first
load_dotenv(find_dotenv(usecwd=True))

import numpy as np  # noqa: E402
from privex.helpers import DictObject, empty, env_int, is_true  # noqa: E402

from privex.permlab import VERSION, settings  # noqa: E402
from privex.permlab.constructions import BUILDERS, build, gain_sweep, verify, verify_exhaustive  # noqa: E402
from privex.permlab.exceptions import DomainError, PermlabError, UsageError, VerificationFailed  # noqa: E402
from privex.permlab.formats import (  # noqa: E402
    ConstructionMeta, MetricsLog, fmt_float, load_checkpoint, load_meta, parse_span, save_checkpoint, save_meta,
    write_heatmap
)
from privex.permlab.model import ModelWeights, forward  # noqa: E402
from privex.permlab.probe import random_lemma1_check, scan_blocks, theorem1_witness, weight_report  # noqa: E402
from privex.permlab.task import as_rng, sample_batch, sample_instance, sample_permutation, embed  # noqa: E402
from privex.permlab.training import TrainConfig, evaluate, gradient_check, train  # noqa: E402

log = logging.getLogger(__name__)


def _floats(value: str) -> List[float]:
    return [float(v) for v in str(value).split(',') if v.strip()]


def _bool(value) -> bool:
    return value if isinstance(value, bool) else is_true(value)


#: Options accepted by every sub-command
COMMON_OPTIONS = {'seed': (int, None)}

#: ``dest -> (converter, default)`` for every configurable option of each sub-command
OPTIONS: Dict[str, Dict[str, Tuple[Callable, Any]]] = {
    'construct': {
        'd': (int, 10), 'beta': (float, settings.DEFAULT_BETA), 'beta2': (float, None), 'out': (str, None),
    },
    'train': {
        'd': (int, 10), 'depth': (int, 2), 'mask': (str, 'cmf'), 'padding': (str, 'none'), 'steps': (int, 2 ** 16),
        'batch': (int, 1024), 'optimizer': (str, 'adam'), 'lr': (float, 1e-3), 'beta_m': (float, 0.9),
        'beta_v': (float, 0.999), 'adam_eps': (float, 1e-8), 'init_scale': (float, 0.02),
        'readout': (parse_span, None), 'eval_every': (int, 1024), 'eval_batch': (int, None),
        'out': (str, 'model.dtx'), 'metrics': (str, 'metrics.csv'),
    },
    'eval': {'n': (int, 1024)},
    'verify': {
        'trials': (int, 100), 'tol': (float, settings.DEFAULT_TOL), 'sweep': (_floats, None),
        'exhaustive': (_bool, False),
    },
    'probe': {
        'mode': (str, 'scan'), 'instance_seed': (int, None), 'tol': (float, None), 'trials': (int, 1),
    },
    'gradcheck': {
        'd': (int, 3), 'depth': (int, 2), 'mask': (str, 'cmf'), 'padding': (str, 'none'), 'eps': (float, 1e-5),
        'trials': (int, 1), 'batch': (int, 4), 'init_scale': (float, 0.5), 'threshold': (float, 1e-5),
    },
    'heatmap': {'layer': (str, 'A1'), 'out': (str, None), 'png': (_bool, False)},
}

PROBE_MODES = ('scan', 'lemma1', 'witness', 'weights')


class PermlabArgumentParser(argparse.ArgumentParser):
    """Raises :class:`.UsageError` instead of printing usage and exiting with status 2."""
    def error(self, message):
        raise UsageError(message)


class RunConfig(DictObject):
    """
    The resolved options of one command: flags, then the config file, then the built-in defaults. The seed
    falls back to ``PERMLAB_SEED``.
    """
    @classmethod
    def read_file(cls, filename: str, command: str) -> Dict[str, str]:
        """
        :raises UsageError: the file doesn't exist, a key has no value, or a key isn't an option of ``command``
        """
        if not os.path.isfile(filename):
            raise UsageError(f"config file '{filename}' does not exist")
        values = dotenv_values(filename)
        allowed = {**COMMON_OPTIONS, **OPTIONS[command]}
        unknown = sorted(k for k in values if k not in allowed)
        if unknown:
            raise UsageError(f"unknown config key(s) for '{command}': {', '.join(unknown)}")
        blank = sorted(k for k, v in values.items() if v is None)
        if blank:
            raise UsageError(f"config key(s) without a value: {', '.join(blank)}")
        return dict(values)

    @classmethod
    def build(cls, command: str, args: argparse.Namespace, file_values: Dict[str, str] = None) -> 'RunConfig':
        file_values = {} if file_values is None else file_values
        cfg = cls()
        for key, (conv, default) in {**COMMON_OPTIONS, **OPTIONS[command]}.items():
            value = getattr(args, key, None)
            if value is None and key in file_values:
                try:
                    value = conv(file_values[key])
                except ValueError as e:
                    raise UsageError(f"bad value for config key '{key}': {e}")
            cfg[key] = default if value is None else value
        if cfg.seed is None:
            cfg.seed = env_int('PERMLAB_SEED', settings.DEFAULT_SEED)
        return cfg


def _say(msg: str):
    if not settings.QUIET:
        print(msg, file=sys.stderr)


def _emit(lines: Sequence[str]):
    for line in lines:
        print(line)


def cmd_construct(args, cfg: RunConfig) -> int:
    bundle = build(args.name, cfg.d, cfg.beta, cfg.beta2)
    out = cfg.out or f"{bundle.name}_d{bundle.d}.dtx"
    save_checkpoint(out, bundle.wts, seed=cfg.seed, step=0)
    meta_file = save_meta(out, ConstructionMeta.from_bundle(bundle))
    _say(f"wrote {out} and {meta_file}")
    _emit([
        f"construct name={bundle.name} d={bundle.d} beta1={bundle.beta1:g} beta2={bundle.beta2:g} "
        f"rows={bundle.expected_rows[0]}:{bundle.expected_rows[1]} col_block={bundle.expected_col_block} "
        f"level={bundle.expected_level} checkpoint={out}"
    ])
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    tc = TrainConfig(
        d=cfg.d, depth=cfg.depth, mask=cfg.mask, padding=cfg.padding, steps=cfg.steps, batch=cfg.batch,
        seed=cfg.seed, optimizer=cfg.optimizer, lr=cfg.lr, beta_m=cfg.beta_m, beta_v=cfg.beta_v,
        adam_eps=cfg.adam_eps, init_scale=cfg.init_scale, readout_rows=cfg.readout, eval_every=cfg.eval_every,
        eval_batch=cfg.eval_batch,
    )
    with MetricsLog(cfg.metrics) as metrics:
        def on_eval(step: int, mse: float, wts: ModelWeights):
            metrics.append(step, mse)
            save_checkpoint(cfg.out, wts, seed=tc.seed, step=step)
            _say(f"step={step} mse={mse:.6g}")

        report = train(tc, on_eval=on_eval)
    save_checkpoint(cfg.out, report.weights, seed=tc.seed, step=report.steps)
    _emit([f"train final_mse={fmt_float(report.final_mse)} steps={report.steps} "
           f"wallclock={report.wallclock:.3f} checkpoint={cfg.out} metrics={cfg.metrics}"])
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ck = load_checkpoint(args.checkpoint)
    mse = evaluate(ck.wts, cfg.n, rng=cfg.seed)
    _emit([f"eval n={cfg.n} mse={fmt_float(mse)}"])
    return 0


def cmd_verify(args, cfg: RunConfig) -> int:
    ck = load_checkpoint(args.checkpoint)
    try:
        meta = load_meta(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"no metadata sidecar for '{args.checkpoint}' - verify only works on constructed checkpoints")
    bundle = meta.bundle(ck.wts)
    if cfg.exhaustive:
        report = verify_exhaustive(bundle, rng=cfg.seed, tol=cfg.tol)
    else:
        report = verify(bundle, trials=cfg.trials, rng=cfg.seed, tol=cfg.tol)
    lines = [report.summary()]
    if cfg.sweep:
        lines += [f"sweep beta={b:g} max_err={e:.6e}" for b, e in gain_sweep(meta.name, bundle.d, cfg.sweep, rng=cfg.seed)]
    _emit(lines)
    if not report.passed:
        raise VerificationFailed(f"{report.name}: max_err={report.max_error:.6e} is not below tol={report.tol:g}")
    return 0


def _non_identity(d: int, rng):
    if d < 2:
        raise DomainError("the witness needs d >= 2 (every permutation of 1 element is the identity)")
    while True:
        perm = sample_permutation(d, rng)
        if not perm.is_identity:
            return perm


def cmd_probe(args, cfg: RunConfig) -> int:
    if cfg.mode not in PROBE_MODES:
        raise UsageError(f"unknown probe mode '{cfg.mode}' (expected one of: {', '.join(PROBE_MODES)})")
    wts = load_checkpoint(args.checkpoint).wts
    rng = as_rng(cfg.seed if cfg.instance_seed is None else cfg.instance_seed)
    failures = 0

    if cfg.mode == 'weights':
        _emit(weight_report(wts))
        return 0

    for _ in range(cfg.trials):
        if cfg.mode == 'scan':
            inst = sample_instance(wts.d, rng, padding=wts.padding)
            stream = forward(wts, embed(inst.perm.p, inst.y_p, inst.padding))
            matches = scan_blocks(stream, inst.y, settings.WITNESS_TOL if cfg.tol is None else cfg.tol)
            _emit([f"scan perm={list(inst.perm.perm.mapping)} matches={len(matches)}"] + [m.line() for m in matches])
            failures += not matches
        elif cfg.mode == 'lemma1':
            verdict = random_lemma1_check(wts, rng)
            _emit(verdict.lines())
            failures += not verdict.passed
        else:
            perm = _non_identity(wts.d, rng)
            report = theorem1_witness(wts, perm, rng, tol=settings.WITNESS_TOL if cfg.tol is None else cfg.tol)
            _emit([f"perm={list(perm.mapping)}"] + report.lines())
            failures += not report.passed

    if failures:
        raise VerificationFailed(f"probe '{cfg.mode}' failed {failures} of {cfg.trials} trial(s)")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    rng = as_rng(cfg.seed)
    worst = 0.0
    for _ in range(cfg.trials):
        wts = ModelWeights.random(cfg.d, depth=cfg.depth, mask=cfg.mask, padding=cfg.padding, rng=rng,
                                  init_scale=cfg.init_scale)
        batch = sample_batch(cfg.d, cfg.batch, rng, padding=cfg.padding, dist='uniform')
        worst = max(worst, gradient_check(wts, batch, eps=cfg.eps))
    _emit([f"gradcheck d={cfg.d} depth={cfg.depth} mask={cfg.mask} eps={cfg.eps:g} trials={cfg.trials} "
           f"max_rel_err={worst:.6e}"])
    if not worst < cfg.threshold:
        raise VerificationFailed(f"gradient relative error {worst:.6e} is not below {cfg.threshold:g}")
    return 0


def _select_matrix(wts: ModelWeights, layer: str) -> Tuple[str, np.ndarray]:
    names = wts.param_names
    key = str(layer).strip()
    if key.isdigit():
        idx = int(key) - 1
        if not 0 <= idx < len(names):
            raise UsageError(f"layer {key} doesn't exist (1..{wts.depth} are attention layers, {wts.depth + 1} is W)")
        key = names[idx]
    key = key.upper()
    if key not in names:
        raise UsageError(f"unknown layer '{layer}' (expected one of: {', '.join(names)})")
    return key, wts.params[names.index(key)]


def cmd_heatmap(args, cfg: RunConfig) -> int:
    wts = load_checkpoint(args.checkpoint).wts
    name, m = _select_matrix(wts, cfg.layer)
    out = cfg.out or f"{os.path.splitext(args.checkpoint)[0]}_{name}.pgm"
    files = write_heatmap(m, out, png=cfg.png, title=f"{name} ({m.shape[0]}x{m.shape[1]})")
    _emit([f"heatmap layer={name} rows={m.shape[0]} cols={m.shape[1]} files={','.join(files)}"])
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    'construct': cmd_construct,
    'train': cmd_train,
    'eval': cmd_eval,
    'verify': cmd_verify,
    'probe': cmd_probe,
    'gradcheck': cmd_gradcheck,
    'heatmap': cmd_heatmap,
}


def build_parser() -> argparse.ArgumentParser:
    common = PermlabArgumentParser(add_help=False)
    common.add_argument('-c', '--config', dest='config', default=None, help='key=value config file')
    common.add_argument('--seed', type=int, default=None, help='RNG seed (default: $PERMLAB_SEED or 0)')
    common.add_argument('-v', '--verbose', action='count', default=0, help='-v for INFO logging, -vv for DEBUG')

    parser = PermlabArgumentParser(prog='permlab', description='Inverse permutation experiments for disentangled '
                                                                'attention-only transformers')
    parser.add_argument('--version', action='version', version=f'%(prog)s {VERSION}')
    sub = parser.add_subparsers(dest='command', parser_class=PermlabArgumentParser)
    sub.required = True

    p = sub.add_parser('construct', parents=[common], help='build explicit construction weights')
    p.add_argument('name', help=f"one of: {', '.join(BUILDERS)}")
    p.add_argument('--d', type=int)
    p.add_argument('--beta', type=float, help='gain of both layers (or of layer 1 when --beta2 is given)')
    p.add_argument('--beta2', type=float)
    p.add_argument('-o', '--out')

    p = sub.add_parser('train', parents=[common], help='train a model from scratch')
    p.add_argument('--d', type=int)
    p.add_argument('--depth', type=int)
    p.add_argument('--mask', choices=('causal', 'cmf'))
    p.add_argument('--padding', choices=('none', 'scratch'))
    p.add_argument('--steps', type=int)
    p.add_argument('--batch', type=int)
    p.add_argument('--optimizer', choices=('adam', 'sgd'))
    p.add_argument('--lr', type=float)
    p.add_argument('--beta-m', dest='beta_m', type=float)
    p.add_argument('--beta-v', dest='beta_v', type=float)
    p.add_argument('--adam-eps', dest='adam_eps', type=float)
    p.add_argument('--init-scale', dest='init_scale', type=float)
    p.add_argument('--readout', type=parse_span, help='readout row window lo:hi (default 0:d)')
    p.add_argument('--eval-every', dest='eval_every', type=int)
    p.add_argument('--eval-batch', dest='eval_batch', type=int)
    p.add_argument('-o', '--out', help='checkpoint file (rewritten at every evaluation)')
    p.add_argument('--metrics', help='metrics CSV (step,mse)')

    p = sub.add_parser('eval', parents=[common], help='mean loss of a checkpoint on fresh instances')
    p.add_argument('checkpoint')
    p.add_argument('-n', '--n', type=int)

    p = sub.add_parser('verify', parents=[common], help='check a constructed checkpoint recovers Y')
    p.add_argument('checkpoint')
    p.add_argument('--trials', type=int)
    p.add_argument('--tol', type=float)
    p.add_argument('--sweep', type=_floats, help='comma separated gains to sweep, e.g. 1,2,5,10,20,50')
    p.add_argument('--exhaustive', action='store_true', default=None, help='every permutation instead of --trials')

    p = sub.add_parser('probe', parents=[common], help='mechanistic probes of a checkpoint')
    p.add_argument('checkpoint')
    p.add_argument('--mode', choices=PROBE_MODES)
    p.add_argument('--instance-seed', dest='instance_seed', type=int)
    p.add_argument('--tol', type=float)
    p.add_argument('--trials', type=int)

    p = sub.add_parser('gradcheck', parents=[common], help='compare gradients with central finite differences')
    p.add_argument('--d', type=int)
    p.add_argument('--depth', type=int)
    p.add_argument('--mask', choices=('causal', 'cmf'))
    p.add_argument('--padding', choices=('none', 'scratch'))
    p.add_argument('--eps', type=float)
    p.add_argument('--trials', type=int)
    p.add_argument('--batch', type=int)
    p.add_argument('--init-scale', dest='init_scale', type=float)
    p.add_argument('--threshold', type=float)

    p = sub.add_parser('heatmap', parents=[common], help='export a weight matrix as PGM + CSV (+ PNG)')
    p.add_argument('checkpoint')
    p.add_argument('--layer', help='A1, A2, ..., W, or a 1-based index')
    p.add_argument('-o', '--out')
    p.add_argument('--png', action='store_true', default=None, help='also render a PNG (needs matplotlib)')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            settings.set_log_level(logging.INFO if args.verbose == 1 else logging.DEBUG)
        file_values = RunConfig.read_file(args.config, args.command) if not empty(args.config) else {}
        cfg = RunConfig.build(args.command, args, file_values)
        log.debug("running %s with %s", args.command, dict(cfg))
        return COMMANDS[args.command](args, cfg)
    except SystemExit as e:
        # --help / --version
        return e.code if isinstance(e.code, int) else 0
    except PermlabError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
