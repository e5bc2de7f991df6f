"""Training loop, optimisers, checkpoint conversion and gradient checking."""
from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import aggregator as agg
from . import autodiff as ad
from . import objective as obj
from .checkpoint import Checkpoint
from .config import TrainingConfig, from_mapping
from .data import Batch, Dataset, assemble_batch
from .evaluation import evaluate
from .model import SmLSTM

log = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    pass


class GradientCheckError(AssertionError):
    def __init__(self, message: str, report: Optional["GradientCheckReport"] = None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global L2 norm <= max_norm; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def learning_rate(cfg: TrainingConfig, step: int) -> float:
    """Cosine decay from ``lr`` to ``lr * lr_floor`` over ``lr_decay_steps``, then flat."""
    if cfg.lr_decay_steps <= 0:
        return cfg.lr
    frac = min(step, cfg.lr_decay_steps) / cfg.lr_decay_steps
    return cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))


def apply_update(params: Dict[str, ad.Tensor], grads: Dict[str, np.ndarray], state: OptimizerState,
                 cfg: TrainingConfig) -> None:
    lr = learning_rate(cfg, state.step)
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if cfg.optimizer == "adam":
            m = state.m.get(name, np.zeros_like(p.data))
            v = state.v.get(name, np.zeros_like(p.data))
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            state.m[name], state.v[name] = m, v
            m_hat = m / (1.0 - cfg.beta1 ** t)
            v_hat = v / (1.0 - cfg.beta2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        else:
            m = cfg.momentum * state.m.get(name, np.zeros_like(p.data)) + g
            state.m[name] = m
            p.data = p.data - lr * m


# ---------------------------------------------------------------- one step


def batch_loss(model: SmLSTM, batch: Batch, cfg: TrainingConfig, neg_mask: Optional[np.ndarray] = None):
    """Forward a batch; returns ``(loss_tensor, LossBreakdown, PairForwardResult)``."""
    res = model.forward(batch.img_candidates, batch.img_context, batch.ids, batch.mask)
    scores = res.score.data
    if not np.all(np.isfinite(scores)):
        i, k = np.argwhere(~np.isfinite(scores))[0]
        raise DivergenceError(f"non-finite score for pair (image {batch.items[i]}, sentence of {batch.items[k]})")
    n = len(batch)
    idx = np.arange(n)
    img_trace = [p[idx, idx] for p in res.image_trace]
    sent_trace = [q[idx, idx] for q in res.sentence_trace]
    total, breakdown = obj.total_loss(res.score, img_trace, sent_trace, batch.mask, cfg.margin, cfg.lam,
                                      cfg.negatives, form=cfg.regularizer, neg_mask=neg_mask)
    return total, breakdown, res


def step_negatives(n: int, cfg: TrainingConfig, step: int) -> np.ndarray:
    """Negative mask for a step; uses every in-batch partner when the batch is small."""
    rng = None if cfg.negatives >= n - 1 else np.random.default_rng([cfg.seed, step, 7])
    return obj.negative_mask(n, cfg.negatives, rng)


def train_step(batch: Batch, model: SmLSTM, opt: OptimizerState, cfg: TrainingConfig, step: int = 0):
    """Forward, backward, clip and update ``model.params`` in place."""
    total, breakdown, _ = batch_loss(model, batch, cfg, step_negatives(len(batch), cfg, step))
    if not np.isfinite(breakdown.total):
        raise DivergenceError(f"non-finite loss {breakdown.total} at step {step}")
    ad.zero_grad(model.parameter_list())
    grads = {k: v.copy() for k, v in ad.backward(total).items()}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in block {name} at step {step}")
    clip_gradients(grads, cfg.clip_norm)
    apply_update(model.params, grads, opt, cfg)
    return breakdown


# ---------------------------------------------------------------- checkpoints


def model_to_checkpoint(model: SmLSTM, opt: Optional[OptimizerState] = None, epoch: int = 0, step: int = 0,
                        batch_in_epoch: int = 0, extra: Optional[dict] = None) -> Checkpoint:
    opt = opt or OptimizerState()
    return Checkpoint(
        params={k: p.data.copy() for k, p in model.params.items()},
        config=model.config.to_dict(),
        opt_m={k: v.copy() for k, v in opt.m.items()},
        opt_v={k: v.copy() for k, v in opt.v.items()},
        opt_step=opt.step,
        epoch=epoch,
        step=step,
        rng={"seed": model.config.seed, "epoch": epoch, "batch": batch_in_epoch},
        extra=dict(extra or {}),
    )


def model_from_checkpoint(ckpt: Checkpoint, **overrides) -> SmLSTM:
    cfg = from_mapping({**ckpt.config, **overrides}).validate()
    params = {k: ad.parameter(v, k) for k, v in ckpt.params.items()}
    return SmLSTM(cfg, params)


def optimizer_from_checkpoint(ckpt: Checkpoint) -> OptimizerState:
    return OptimizerState({k: v.copy() for k, v in ckpt.opt_m.items()},
                          {k: v.copy() for k, v in ckpt.opt_v.items()}, ckpt.opt_step)


# ---------------------------------------------------------------- fit


@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    history: List[dict]
    validation: List[dict]


def epoch_plan(n: int, cfg: TrainingConfig, epoch: int):
    """Shuffled batches and per-record sentence picks for one epoch."""
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(n)
    picks = rng.integers(0, 1 << 30, size=n)
    batches = [order[s:s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]
    return [b for b in batches if len(b) >= 2], picks


def fit(train: Dataset, cfg: TrainingConfig, val: Optional[Dataset] = None, resume: Optional[Checkpoint] = None,
        log_fn: Optional[Callable[[dict], None]] = None) -> FitResult:
    """Train for ``max_epochs`` (or until ``max_steps``), keeping the best
    checkpoint by validation Sum when ``val`` is given.

    Batch order and negatives are derived from ``(seed, epoch)`` and
    ``(seed, step)``, so resuming from any checkpoint replays the same
    trajectory. On resume only the budget fields of ``cfg`` (max_epochs,
    max_steps, eval_every) are used; everything else comes from the
    checkpoint.
    """
    if len(train) == 0:
        raise ad.ContractError("fit: empty training set")
    if resume is not None:
        model = model_from_checkpoint(resume)
        # architecture comes from the checkpoint, the budget from the caller
        cfg = model.config.replace(max_epochs=cfg.max_epochs, max_steps=cfg.max_steps, eval_every=cfg.eval_every)
        model.config = cfg
        opt = optimizer_from_checkpoint(resume)
        epoch, step, skip = resume.epoch, resume.step, resume.rng.get("batch", 0)
        best = resume
        best_sum = resume.extra.get("best_sum", -np.inf)
    else:
        cfg = cfg.validate()
        model = SmLSTM.initialize(cfg)
        opt = OptimizerState()
        epoch, step, skip = 0, 0, 0
        best = model_to_checkpoint(model)
        best_sum = -np.inf
    history: List[dict] = []
    validation: List[dict] = []
    batch_idx = skip

    def validate_now():
        nonlocal best, best_sum
        _, _, report = evaluate(model, val)
        validation.append({"epoch": epoch, "step": step, "Sum": report.sum})
        if report.sum > best_sum:
            best_sum = report.sum
            best = model_to_checkpoint(model, opt, epoch, step, batch_idx, {"best_sum": best_sum})

    stop = False
    while epoch < cfg.max_epochs and not stop:
        batches, picks = epoch_plan(len(train), cfg, epoch)
        while batch_idx < len(batches):
            if cfg.max_steps and step >= cfg.max_steps:
                stop = True
                break
            idx = batches[batch_idx]
            batch = assemble_batch(train, idx, picks[idx])
            breakdown = train_step(batch, model, opt, cfg, step)
            step += 1
            batch_idx += 1
            record = {"step": step, "epoch": epoch, **breakdown.as_dict(), "wall_time": time.time()}
            history.append(record)
            if log_fn is not None:
                log_fn(record)
        if stop:
            break
        epoch += 1
        batch_idx = 0
        if val is not None and len(val) and (epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs):
            validate_now()
    if val is not None and len(val) and stop:
        validate_now()
    last = model_to_checkpoint(model, opt, epoch, step, batch_idx,
                               {"best_sum": best_sum} if np.isfinite(best_sum) else {})
    if val is None or not len(val):
        best = last
    return FitResult(best, last, history, validation)


def jsonl_logger(path):
    fh = open(path, "a", encoding="utf-8")

    def write(record: dict) -> None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()

    write.close = fh.close  # type: ignore[attr-defined]
    return write


# ---------------------------------------------------------------- gradient check


@dataclass
class GradientCheckReport:
    errors: Dict[str, float]
    tolerance: float
    max_abs_grad: float

    @property
    def failing(self) -> List[str]:
        return [k for k, e in self.errors.items() if not e <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def lines(self) -> List[str]:
        out = [f"{k:28s} {e:.3e} {'ok' if e <= self.tolerance else 'FAIL'}" for k, e in self.errors.items()]
        out.append(f"max relative error {self.max_error:.3e} (tolerance {self.tolerance:.1e}): "
                   f"{'PASS' if self.passed else 'FAIL ' + ', '.join(self.failing)}")
        return out


def block_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    """max |a - n| / max(|a|, |n|, floor) over the entries of one block."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


@contextmanager
def corrupted_gate(gate: str = "f"):
    """Deliberately wrong backward rule for one aggregation-cell gate (mutation testing)."""
    previous = agg.CORRUPT_GATE
    agg.CORRUPT_GATE = gate
    try:
        yield
    finally:
        agg.CORRUPT_GATE = previous


def random_check_batch(cfg: TrainingConfig, rng: np.random.Generator) -> Batch:
    n, J = cfg.batch_size, cfg.max_words
    lengths = np.concatenate([[J], rng.integers(1, J + 1, size=n - 1)])[:n]
    mask = np.arange(J)[None, :] < lengths[:, None]
    ids = np.where(mask, rng.integers(2, cfg.vocab_size, size=(n, J)), 0)
    return Batch(rng.normal(size=(n, cfg.num_regions, cfg.region_dim)),
                 rng.normal(size=(n, cfg.image_context_dim)), ids, mask, list(range(n)))


def gradient_check(cfg: TrainingConfig, tolerance: float = 1e-4, seed: int = 0, weight_scale: float = 0.5,
                   eps: float = 1e-5, floor: float = 1e-5, corrupt_gate: Optional[str] = None,
                   raise_on_failure: bool = True) -> GradientCheckReport:
    """Compare backward() against central differences for every parameter block.

    Parameters are redrawn from N(0, weight_scale^2) so gradients are not
    vanishingly small. Entries smaller than ``floor`` in magnitude are
    measured against ``floor``.
    """
    cfg = cfg.validate()
    rng = np.random.default_rng(seed)
    model = SmLSTM.initialize(cfg, seed=seed)
    for p in model.params.values():
        p.data = rng.normal(0.0, weight_scale, size=p.shape)
    batch = random_check_batch(cfg, rng)
    neg = step_negatives(len(batch), cfg, 0)

    def loss():
        return batch_loss(model, batch, cfg, neg)[0]

    with corrupted_gate(corrupt_gate) if corrupt_gate else _null():
        ad.zero_grad(model.parameter_list())
        analytic = ad.backward(loss())
    max_abs = max((float(np.abs(g).max()) for g in analytic.values()), default=0.0)
    if max_abs == 0.0:
        raise GradientCheckError("vacuous gradient check: every analytic gradient is zero")
    numeric = ad.finite_difference_gradient(lambda: loss().item(), model.params, eps=eps)
    errors = {
        name: block_relative_error(analytic.get(name, np.zeros_like(numeric[name])), numeric[name], floor)
        for name in model.params
    }
    report = GradientCheckReport(errors, tolerance, max_abs)
    if raise_on_failure and not report.passed:
        raise GradientCheckError("gradient check failed for blocks: " + ", ".join(report.failing), report)
    return report


@contextmanager
def _null():
    yield
