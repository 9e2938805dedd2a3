"""Seeded end-to-end training: Adam, plateau LR schedule, early stopping."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data import EncodedBatch, Sample, Vocabulary, batch_iter, build_vocab, encode_samples
from .errors import ConfigError, NumericError
from .evalstats import classification_report
from .encoders import IMAGE_ENCODERS
from .model import INIT_SCHEMES, ModelConfig, MultiCheckModel, compute_losses

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (42, 57, 196, 906)
THREADS_ENV = "MULTICHECK_NUM_THREADS"


@dataclass
class TrainConfig:
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    lr: float = 1e-5
    batch_size: int = 32
    epochs: int = 20
    max_len: int = 128
    tau: float = 0.1
    lam: float = 0.1
    patience: int = 5
    contrastive_enabled: bool = True
    scheduler_factor: float = 0.5
    scheduler_patience: int = 2
    min_delta: float = 1e-4
    min_lr: float = 1e-7
    max_vocab: int = 10000
    eval_batch_size: int = 256
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.contrastive_enabled and self.batch_size < 2:
            raise ConfigError("contrastive training needs batch_size >= 2 for in-batch negatives")
        if self.epochs < 1 or self.max_len < 2 or self.patience < 0:
            raise ConfigError("epochs >= 1, max_len >= 2 and patience >= 0 are required")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not 0 < self.scheduler_factor <= 1:
            raise ConfigError("scheduler_factor must lie in (0, 1]")
        m = self.model
        if m.h <= 0 or m.d_text <= 0 or m.n_layers < 1 or m.n_heads < 1 or m.text_ffn <= 0:
            raise ConfigError("model dimensions must be positive")
        if m.d_text % m.n_heads:
            raise ConfigError(f"d_text ({m.d_text}) must be divisible by n_heads ({m.n_heads})")
        if m.text_encoder != "tiny-transformer":
            raise ConfigError(f"unknown text_encoder {m.text_encoder!r}; expected 'tiny-transformer'")
        if m.image_encoder not in IMAGE_ENCODERS:
            raise ConfigError(f"unknown image_encoder {m.image_encoder!r}; expected one of {IMAGE_ENCODERS}")
        if m.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"unknown init_scheme {m.init_scheme!r}; expected one of {INIT_SCHEMES}")
        if not 0 <= m.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {m.dropout}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update, in place on ``params`` (no weight decay)."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r} at optimizer step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m / c1, denom, value=-lr)
    return params


# --------------------------------------------------------------------------
# Plateau scheduler and early stopping
# --------------------------------------------------------------------------


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 2
    min_delta: float = 1e-4
    min_lr: float = 1e-7
    best: float = -math.inf
    num_bad: int = 0


def plateau_scheduler_step(state: PlateauState, val_metric: float) -> float:
    """Higher-is-better plateau rule.

    After ``patience`` consecutive epochs without an improvement larger than
    ``min_delta`` the rate becomes ``max(lr * factor, min_lr)`` and the
    counter resets.
    """
    if val_metric > state.best + state.min_delta:
        state.best = val_metric
        state.num_bad = 0
    else:
        state.num_bad += 1
        if state.num_bad >= state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.num_bad = 0
    return state.lr


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_ce: float
    train_contrastive: float | None
    train_total: float
    val_ce: float
    val_weighted_f1: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float = -math.inf
    stop_reason: str = ""

    @property
    def current_epoch(self) -> int:
        return self.epochs[-1].epoch if self.epochs else 0

    def to_dict(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_f1": self.best_val_f1,
            "stop_reason": self.stop_reason,
        }


def early_stop_check(history: TrainHistory, patience: int) -> bool:
    if not history.epochs:
        raise ValueError("early_stop_check needs at least one recorded epoch")
    return history.current_epoch - history.best_epoch >= patience


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


def configure_threads() -> None:
    n = os.environ.get(THREADS_ENV)
    if n:
        torch.set_num_threads(int(n))


@torch.no_grad()
def evaluate(model: MultiCheckModel, data: EncodedBatch, batch_size: int = 256) -> tuple[np.ndarray, float]:
    """Eval-mode predictions and mean cross-entropy over ``data``."""
    was_training = model.training
    model.eval()
    preds, ce_sum = [], 0.0
    for batch in batch_iter(data, batch_size):
        logits = model.logits(batch)
        ce_sum += float(torch.nn.functional.cross_entropy(logits, batch.labels, reduction="sum"))
        preds.append(torch.argmax(logits, dim=-1).numpy())
    model.train(was_training)
    n = len(data)
    return (np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)), (ce_sum / n if n else 0.0)


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def train(
    config: TrainConfig,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    seed: int,
    log_path=None,
    vocab: Vocabulary | None = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Train one seed; the returned checkpoint holds the best-val-F1 weights."""
    config.validate()
    if not train_set or not val_set:
        raise ConfigError("train and val sets must be non-empty")
    configure_threads()
    vocab = vocab or build_vocab(train_set, config.max_vocab)
    train_data = encode_samples(train_set, vocab, config.max_len)
    val_data = encode_samples(val_set, vocab, config.max_len)
    image_shape = tuple(train_data.claim_image.shape[1:])

    torch.manual_seed(seed)
    model = MultiCheckModel(config.model, len(vocab), config.max_len, image_shape)
    params = dict(model.named_parameters())
    adam = AdamState()
    sched = PlateauState(
        lr=config.lr,
        factor=config.scheduler_factor,
        patience=config.scheduler_patience,
        min_delta=config.min_delta,
        min_lr=min(config.min_lr, config.lr),
    )
    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            lr = sched.lr
            model.train()
            ce_acc, con_acc, tot_acc = [], [], []
            for batch in batch_iter(train_data, config.batch_size, shuffle_seed=seed * 100003 + epoch):
                step += 1
                where = f"epoch {epoch}, step {step} (seed {seed})"
                out = model(batch)
                try:
                    losses = compute_losses(out, batch.labels, config.tau, config.lam, config.contrastive_enabled)
                except NumericError as exc:
                    raise NumericError(f"{exc} at {where}") from exc
                if not torch.isfinite(losses.total):
                    raise NumericError(f"non-finite loss at {where}")
                model.zero_grad(set_to_none=True)
                losses.total.backward()
                adam_step(params, {k: p.grad for k, p in params.items()}, adam, lr)
                vals = losses.as_floats()
                ce_acc.append(vals["ce"])
                tot_acc.append(vals["total"])
                if vals["contrastive"] is not None:
                    con_acc.append(vals["contrastive"])
                if log_fh:
                    record = {"step": step, "epoch": epoch, **vals, "lr": lr}
                    if config.contrastive_enabled and vals["contrastive"] is None:
                        record["note"] = "contrastive term skipped: batch of size 1"
                    log_fh.write(json.dumps(record) + "\n")

            preds, val_ce = evaluate(model, val_data, config.eval_batch_size)
            val_f1 = classification_report(preds, val_data.labels.numpy()).weighted_f1
            history.epochs.append(
                EpochRecord(epoch, lr, _mean(ce_acc), _mean(con_acc), _mean(tot_acc), val_ce, val_f1)
            )
            if val_f1 > history.best_val_f1:
                history.best_val_f1 = val_f1
                history.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
            logger.info("seed %d epoch %d: train %.4f val_f1 %.4f lr %.2e", seed, epoch, _mean(tot_acc), val_f1, lr)
            plateau_scheduler_step(sched, val_f1)
            if early_stop_check(history, config.patience):
                history.stop_reason = f"early_stop: no val F1 improvement for {config.patience} epochs"
                break
        else:
            history.stop_reason = "max_epochs"
    finally:
        if log_fh:
            log_fh.close()

    ckpt = Checkpoint.from_model(
        model, vocab, state=best_state, seed=seed, extra={"contrastive_enabled": config.contrastive_enabled}
    )
    return ckpt, history


# --------------------------------------------------------------------------
# Multi-seed aggregation
# --------------------------------------------------------------------------


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; std is 0 for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def aggregate_reports(reports: dict) -> dict:
    """Per-class F1 and weighted F1 as mean +/- sample std across seeds."""
    seeds = sorted(reports)
    f1 = np.array([reports[s].f1 for s in seeds])
    wf1 = [reports[s].weighted_f1 for s in seeds]
    per_class = [mean_std(f1[:, i]) for i in range(f1.shape[1])]
    wm, ws = mean_std(wf1)
    return {
        "seeds": list(seeds),
        "f1_mean": [m for m, _ in per_class],
        "f1_std": [s for _, s in per_class],
        "weighted_f1_mean": wm,
        "weighted_f1_std": ws,
        "weighted_f1_per_seed": {str(s): reports[s].weighted_f1 for s in seeds},
    }


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    threshold: float
    epsilon: float

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.threshold]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def raise_on_failure(self) -> None:
        if not self.passed:
            worst = ", ".join(f"{k}={self.errors[k]:.2e}" for k in self.failures)
            raise NumericError(f"gradient check failed (threshold {self.threshold:g}): {worst}")


def total_loss_fn(tau: float = 0.1, lam: float = 0.1, contrastive: bool = True) -> Callable:
    def fn(model, batch):
        return compute_losses(model(batch), batch.labels, tau, lam, contrastive).total

    return fn


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(
    model: torch.nn.Module,
    batch,
    loss_fn: Callable | None = None,
    epsilon: float = 1e-5,
    n_coords: int = 16,
    threshold: float = 1e-4,
    double: bool = True,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd against central differences on sampled coordinates.

    Runs on a copy of ``model`` in eval mode (float64 unless ``double`` is
    false). For each parameter tensor, at most ``n_coords`` coordinates are
    checked; the report holds the max relative error per tensor, where the
    denominator is ``max(|analytic|, |numeric|, floor)``.
    """
    loss_fn = loss_fn or total_loss_fn()
    model = copy.deepcopy(model)
    if double:
        model = model.double()
        if hasattr(batch, "to"):
            batch = batch.to(torch.float64)
    model.eval()
    params = dict(model.named_parameters())
    model.zero_grad(set_to_none=True)
    loss_fn(model, batch).backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        grad = p.grad.detach().reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        flat = p.data.view(-1)
        k = min(n_coords, flat.numel())
        coords = rng.choice(flat.numel(), size=k, replace=False)
        worst = 0.0
        with torch.no_grad():
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = float(loss_fn(model, batch))
                flat[i] = orig - epsilon
                down = float(loss_fn(model, batch))
                flat[i] = orig
                numeric = (up - down) / (2 * epsilon)
                worst = max(worst, relative_error(float(grad[i]), numeric, floor))
        errors[name] = worst
    return GradCheckReport(errors=errors, threshold=threshold, epsilon=epsilon)
