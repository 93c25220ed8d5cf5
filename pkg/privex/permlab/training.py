"""
Squared-error training of :class:`.ModelWeights` with hand-written reverse-mode gradients.

The loss of one instance is ``(1/d) * sum((y_hat - y) ** 2)``, so the constant 0.5 predictor scores ``d/4``
against binary targets (2.5 at ``d = 10``). Batch losses are averaged over the instances.

Every training step draws a fresh batch (online learning), computes :func:`loss_and_grad`, and updates the
weights with :class:`.Adam` (default) or :class:`.SGD`. Every ``eval_every`` steps the model is scored on a fixed
held-out batch drawn from an independent generator.

Basic usage::

    from privex.permlab.training import TrainConfig, train

    report = train(TrainConfig(d=4, steps=4096, batch=128, eval_every=512))
    print(report.final_mse)        # well below the 1.0 random-guess level at d=4

"""
import logging
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np
from privex.helpers import DictObject

from privex.permlab import settings
from privex.permlab.exceptions import DivergenceError, DomainError, ShapeError
from privex.permlab.model import MaskMode, ModelWeights, Span, forward, readout
from privex.permlab.numerics import DTYPE, Matrix, matmul, softmax_backward, transpose
from privex.permlab.task import RNG_TYPES, Padding, TaskBatch, TaskInstance, as_rng, derive_seed, sample_batch

log = logging.getLogger(__name__)

#: XOR'd into the run seed to get the generator for the held-out evaluation batch
EVAL_STREAM = 0x5EED

BATCH_TYPES = Union[TaskBatch, Sequence[TaskInstance]]

Gradients = Dict[str, Matrix]


def _positive(name: str):
    def _check(inst, attribute, value):
        if value is None or value <= 0:
            raise DomainError(f"{name} must be > 0, got {value}")
    return _check


@attr.s(frozen=True)
class TrainConfig:
    """
    Everything needed to reproduce a training run. Identical configs (same ``seed``) give bitwise identical
    reports.

    ``eval_every`` must not exceed ``steps``, so every run logs at least one evaluation. ``eval_batch`` defaults
    to ``batch``.
    """
    d: int = attr.ib(default=10, converter=int, validator=_positive('d'))
    depth: int = attr.ib(default=2, converter=int, validator=_positive('depth'))
    mask: MaskMode = attr.ib(default=MaskMode.CMF, converter=MaskMode)
    padding: Padding = attr.ib(default=Padding.NONE, converter=Padding)
    steps: int = attr.ib(default=2 ** 16, converter=int, validator=_positive('steps'))
    batch: int = attr.ib(default=1024, converter=int, validator=_positive('batch'))
    seed: int = attr.ib(default=attr.Factory(lambda: settings.DEFAULT_SEED), converter=int)
    optimizer: str = attr.ib(default='adam', validator=attr.validators.in_(('adam', 'sgd')))
    lr: float = attr.ib(default=1e-3, converter=float, validator=_positive('lr'))
    beta_m: float = attr.ib(default=0.9, converter=float)
    beta_v: float = attr.ib(default=0.999, converter=float)
    adam_eps: float = attr.ib(default=1e-8, converter=float, validator=_positive('adam_eps'))
    init_scale: float = attr.ib(default=0.02, converter=float, validator=_positive('init_scale'))
    readout_rows: Optional[Span] = attr.ib(default=None)
    eval_every: int = attr.ib(default=1024, converter=int, validator=_positive('eval_every'))
    eval_batch: Optional[int] = attr.ib(default=None)

    def __attrs_post_init__(self):
        if self.eval_every > self.steps:
            raise DomainError(f"eval_every ({self.eval_every}) must not exceed steps ({self.steps})")
        if self.eval_batch is not None and int(self.eval_batch) < 1:
            raise DomainError(f"eval_batch must be >= 1, got {self.eval_batch}")

    @property
    def eval_size(self) -> int:
        return int(self.eval_batch) if self.eval_batch is not None else self.batch

    def init_weights(self, rng: np.random.Generator) -> ModelWeights:
        return ModelWeights.random(
            self.d, depth=self.depth, mask=self.mask, padding=self.padding, rng=rng,
            init_scale=self.init_scale, readout_rows=self.readout_rows
        )


@attr.s(frozen=True, eq=False)
class TrainReport:
    """``curve`` holds ``(step, eval_mse)`` pairs in step order; ``final_mse`` is its last value."""
    curve: Tuple[Tuple[int, float], ...] = attr.ib(converter=tuple)
    wallclock: float = attr.ib()
    weights: ModelWeights = attr.ib()
    steps: int = attr.ib(default=0)

    @property
    def final_mse(self) -> float:
        return self.curve[-1][1] if self.curve else float('nan')


def _as_batch(batch: BATCH_TYPES) -> TaskBatch:
    if isinstance(batch, TaskBatch):
        return batch
    if isinstance(batch, TaskInstance):
        return TaskBatch.from_instances([batch])
    return TaskBatch.from_instances(list(batch))


def mse_loss(y_hat: Matrix, y: Matrix) -> float:
    """
    ``(1/d) * sum over rows and columns of (y_hat - y)^2``. Stacked ``(n, d, d)`` inputs are averaged over ``n``.

        >>> y = np.zeros((10, 10))
        >>> y_hat = y.copy()
        >>> y_hat[0, 0] = 1.0
        >>> mse_loss(y_hat, y)
        0.1

    :raises ShapeError: when the shapes differ
    """
    y_hat, y = np.asarray(y_hat, dtype=DTYPE), np.asarray(y, dtype=DTYPE)
    if y_hat.shape != y.shape:
        raise ShapeError(f"mse_loss: prediction shape {y_hat.shape} doesn't match target shape {y.shape}")
    d = y.shape[-1]
    per_instance = np.sum((y_hat - y) ** 2, axis=(-2, -1)) / d
    return float(np.mean(per_instance))


def batch_loss(wts: ModelWeights, batch: BATCH_TYPES) -> float:
    """Mean loss of ``wts`` over ``batch`` (no gradients)."""
    batch = _as_batch(batch)
    stream = forward(wts, batch.embed())
    return mse_loss(readout(stream, wts.w, wts.rows), batch.y)


def loss_and_grad(wts: ModelWeights, batch: BATCH_TYPES) -> Tuple[float, Gradients]:
    """
    Batch-mean loss and its exact gradient with respect to every ``A^(i)`` and ``W``, keyed by
    :attr:`.ModelWeights.param_names`.

    The backward pass walks the concatenated stream from the top: the gradient on ``h^(i)`` splits into the part
    flowing to its left half (``h^(i-1)`` directly) and its right half (the attention output
    ``S h^(i-1)``). Masked logits have ``S = 0`` and receive no gradient.
    """
    batch = _as_batch(batch)
    if batch.padding is not wts.padding:
        raise DomainError(f"batch padding '{batch.padding.value}' doesn't match model padding '{wts.padding.value}'")
    stream = forward(wts, batch.embed())
    lo, hi = wts.rows
    n, d = batch.n, wts.d

    top = stream.last
    y_hat = matmul(top[:, lo:hi, :], transpose(wts.w))
    diff = y_hat - batch.y
    loss = float(np.sum(diff ** 2) / (d * n))

    d_yhat = (2.0 / (d * n)) * diff
    grads = DictObject()
    d_w = np.einsum('bij,bik->jk', d_yhat, top[:, lo:hi, :])

    dh = np.zeros_like(top)
    dh[:, lo:hi, :] = matmul(d_yhat, wts.w)

    d_attn: List[Matrix] = [None] * wts.depth
    for i in reversed(range(wts.depth)):
        h, s, a = stream.levels[i], stream.probs[i], wts.attn[i]
        m = h.shape[-1]
        d_out, dh_prev = dh[..., m:], dh[..., :m].copy()
        # out = s @ h
        d_s = matmul(d_out, transpose(h))
        dh_prev += matmul(transpose(s), d_out)
        # logits = h @ a @ h^T
        d_logits = softmax_backward(s, d_s)
        d_attn[i] = np.einsum('bpi,bpq,bqj->ij', h, d_logits, h, optimize=True)
        dh_prev += matmul(matmul(d_logits, h), transpose(a)) + matmul(matmul(transpose(d_logits), h), a)
        dh = dh_prev

    for name, g in zip(wts.param_names, d_attn + [d_w]):
        grads[name] = g
    return loss, grads


def grad(wts: ModelWeights, batch: BATCH_TYPES) -> Gradients:
    """Exact gradients of the batch-mean loss (see :func:`loss_and_grad`)."""
    return loss_and_grad(wts, batch)[1]


def central_difference(f: Callable[[Matrix], float], theta: Matrix, eps: float = 1e-5) -> Matrix:
    """
    ``(f(theta + eps e_k) - f(theta - eps e_k)) / (2 eps)`` for every entry ``k`` of ``theta``.

        >>> round(float(central_difference(lambda t: float(t[0] ** 2), np.array([3.0]))[0]), 6)
        6.0

    :raises DomainError: ``eps <= 0``
    """
    if not eps > 0:
        raise DomainError(f"finite difference step must be > 0, got eps={eps}")
    theta = np.array(theta, dtype=DTYPE)
    out = np.zeros_like(theta)
    for k in np.ndindex(theta.shape):
        orig = theta[k]
        theta[k] = orig + eps
        up = f(theta)
        theta[k] = orig - eps
        down = f(theta)
        theta[k] = orig
        out[k] = (up - down) / (2 * eps)
    return out


def finite_diff_grad(wts: ModelWeights, batch: BATCH_TYPES, eps: float = 1e-5) -> Gradients:
    """Central-difference estimate of :func:`grad`, one parameter entry at a time. Slow; meant for small models."""
    if not eps > 0:
        raise DomainError(f"finite difference step must be > 0, got eps={eps}")
    batch = _as_batch(batch)
    params = wts.params
    grads = DictObject()
    for idx, name in enumerate(wts.param_names):
        def f(theta, idx=idx):
            trial = list(params)
            trial[idx] = theta
            return batch_loss(wts.with_params(trial), batch)
        grads[name] = central_difference(f, params[idx], eps)
    return grads


def relative_error(a: Gradients, b: Gradients) -> float:
    """
    ``max|a - b| / max(max|a|, max|b|, 1e-12)`` per tensor, maximised over tensors.
    """
    worst = 0.0
    for name in a:
        ga, gb = np.asarray(a[name]), np.asarray(b[name])
        scale = max(float(np.max(np.abs(ga))), float(np.max(np.abs(gb))), 1e-12)
        worst = max(worst, float(np.max(np.abs(ga - gb))) / scale)
    return worst


def gradient_check(wts: ModelWeights, batch: BATCH_TYPES, eps: float = 1e-5) -> float:
    """Relative error between :func:`grad` and :func:`finite_diff_grad` on the same batch."""
    err = relative_error(grad(wts, batch), finite_diff_grad(wts, batch, eps))
    log.debug("gradient check: d=%d depth=%d mask=%s eps=%g rel_err=%.3e", wts.d, wts.depth, wts.mask.value, eps, err)
    return err


class Adam:
    """
    Adam with bias-corrected moments. :meth:`.step` updates ``params`` in place.
    """
    def __init__(self, lr: float = 1e-3, beta_m: float = 0.9, beta_v: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta_m, self.beta_v, self.eps = lr, beta_m, beta_v, eps
        self.m: Dict[str, Matrix] = {}
        self.v: Dict[str, Matrix] = {}
        self.t = 0

    def step(self, params: Dict[str, Matrix], grads: Gradients):
        self.t += 1
        bc1 = 1.0 - self.beta_m ** self.t
        bc2 = 1.0 - self.beta_v ** self.t
        step_size = self.lr / bc1
        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] *= self.beta_m
            self.m[k] += (1.0 - self.beta_m) * g
            self.v[k] *= self.beta_v
            self.v[k] += (1.0 - self.beta_v) * (g * g)
            params[k] -= step_size * self.m[k] / (np.sqrt(self.v[k] / bc2) + self.eps)


class SGD:
    def __init__(self, lr: float = 1e-3):
        self.lr = lr

    def step(self, params: Dict[str, Matrix], grads: Gradients):
        for k in params:
            params[k] -= self.lr * grads[k]


def make_optimizer(cfg: TrainConfig) -> Union[Adam, SGD]:
    if cfg.optimizer == 'sgd':
        return SGD(lr=cfg.lr)
    return Adam(lr=cfg.lr, beta_m=cfg.beta_m, beta_v=cfg.beta_v, eps=cfg.adam_eps)


def _check_finite(value: float, step: int, what: str):
    if not np.isfinite(value):
        log.warning("training diverged at step %d: %s is %s", step, what, value)
        raise DivergenceError(f"{what} became non-finite ({value}) at step {step}", step=step)


EvalCallback = Callable[[int, float, ModelWeights], None]


def train(cfg: TrainConfig, on_eval: EvalCallback = None, weights: ModelWeights = None) -> TrainReport:
    """
    Run ``cfg.steps`` optimizer steps, each on a freshly sampled batch, and evaluate on the held-out batch every
    ``cfg.eval_every`` steps.

    :param on_eval: called as ``on_eval(step, mse, weights)`` after every evaluation (the CLI appends to the
                    metrics log and writes checkpoints from here)
    :param weights: start from these weights instead of a random init (their ``d`` / mask / padding win over
                    ``cfg``'s)
    :raises DivergenceError: when the training or evaluation loss becomes non-finite
    """
    rng = as_rng(cfg.seed)
    wts = weights if weights is not None else cfg.init_weights(rng)
    held_out = sample_batch(wts.d, cfg.eval_size, as_rng(derive_seed(cfg.seed, EVAL_STREAM)), padding=wts.padding)
    names = wts.param_names
    params = DictObject(zip(names, [np.array(p, dtype=DTYPE) for p in wts.params]))
    opt = make_optimizer(cfg)
    curve: List[Tuple[int, float]] = []

    log.info("training d=%d depth=%d mask=%s padding=%s steps=%d batch=%d optimizer=%s seed=%d",
             wts.d, wts.depth, wts.mask.value, wts.padding.value, cfg.steps, cfg.batch, cfg.optimizer, cfg.seed)
    started = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        batch = sample_batch(wts.d, cfg.batch, rng, padding=wts.padding)
        loss, grads = loss_and_grad(wts, batch)
        _check_finite(loss, step, 'training loss')
        opt.step(params, grads)
        wts = wts.with_params([params[k] for k in names])

        if step % cfg.eval_every == 0:
            mse = batch_loss(wts, held_out)
            _check_finite(mse, step, 'evaluation loss')
            curve.append((step, mse))
            log.info("step=%d mse=%.6g train_loss=%.6g", step, mse, loss)
            if on_eval is not None:
                on_eval(step, mse, wts)

    return TrainReport(curve=curve, wallclock=time.perf_counter() - started, weights=wts, steps=cfg.steps)


def evaluate(wts: ModelWeights, n: int, rng: RNG_TYPES = None) -> float:
    """
    Mean loss over ``n`` fresh instances.

    :raises DomainError: ``n < 1``
    """
    if int(n) < 1:
        raise DomainError(f"evaluate needs n >= 1, got {n}")
    batch = sample_batch(wts.d, int(n), as_rng(rng), padding=wts.padding)
    return batch_loss(wts, batch)
