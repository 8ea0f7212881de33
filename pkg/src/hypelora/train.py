"""AdamW training of the adapter (hyper-network or LoRA factors) plus the head."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import calib
from . import ndgrad as nd
from .data import DatasetSplit, batches
from .encoder import Batch, EncoderParams, forward, merge_factors
from .lora import ConfigurationError
from .ndgrad import NumericError, Tensor

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("step", "loss", "score", "ece", "cece", "mce", "ace", "tace", "brier")


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    eval_every: int = 200
    grad_clip: float = 1.0

    def __post_init__(self):
        for name in ("peak_lr", "total_steps", "batch_size", "eval_every", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigurationError("warmup_steps must lie in [0, total_steps]")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigurationError("weight_decay and grad_clip must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0 at ``total_steps``."""
    w, total, peak = config.warmup_steps, config.total_steps, config.peak_lr
    if step < w:
        return peak * step / w
    if step >= total:
        return 0.0
    return peak * (total - step) / (total - w)


class AdamW:
    """Adam with decoupled weight decay, applied in place to named tensors."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.moments = {k: (np.zeros_like(p.data), np.zeros_like(p.data)) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.moments[name]
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return total


@dataclass
class TrainState:
    step: int
    optimizer: AdamW
    rng: np.random.Generator
    history: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    grad_norm: float = 0.0  # pre-clipping norm of the latest step

    @property
    def moments(self):
        return self.optimizer.moments


def trainable(encoder: EncoderParams, adapter) -> dict[str, Tensor]:
    named = dict(adapter.named_parameters())
    for name, t in zip(("head.w", "head.b"), encoder.head_parameters()):
        named[name] = t
    return named


def init_state(encoder: EncoderParams, adapter, config: TrainConfig, rng=None) -> TrainState:
    encoder.freeze()
    params = trainable(encoder, adapter)
    for name, p in params.items():
        if not p.requires_grad:
            raise ConfigurationError(f"trainable tensor {name} has requires_grad=False")
    opt = AdamW(params, (config.beta1, config.beta2), config.adam_eps, config.weight_decay)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return TrainState(0, opt, rng)


def train_step(encoder: EncoderParams, adapter, batch: Batch, state: TrainState,
               config: TrainConfig) -> tuple[TrainState, float]:
    """generate -> forward -> cross-entropy -> backward -> AdamW; grads cleared after."""
    params = state.optimizer.params
    lr = lr_schedule(state.step + 1, config)
    try:
        logits = forward(encoder, batch, adapter.generate())
        loss = nd.cross_entropy(logits, batch.labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"loss is {value}")
    except NumericError as exc:
        norms = {k: float(np.linalg.norm(p.data)) for k, p in params.items()}
        raise NumericError(f"non-finite loss at step {state.step + 1} (lr={lr:g}): {exc}; "
                           f"previous grad norm {state.grad_norm:g}; parameter norms: {norms}") from None
    loss.backward()
    grad_norm = clip_grad_norm(params.values(), config.grad_clip)
    state.grad_norm = grad_norm
    if not math.isfinite(grad_norm):
        raise NumericError(f"non-finite gradient norm at step {state.step + 1} (lr={lr:g})")
    state.optimizer.step(lr)
    for p in params.values():
        p.grad = None
    state.step += 1
    state.losses.append(value)
    return state, value


def predict(encoder: EncoderParams, adapter, split: DatasetSplit, batch_size: int = 256,
            merged: bool = True) -> np.ndarray:
    """Class probabilities for every example of ``split`` in file order.

    ``merged=True`` folds the generated factors into a weight copy once;
    otherwise the factors are applied on the fly per batch.
    """
    with nd.no_grad():
        factors = adapter.generate()
        if merged:
            params, use = merge_factors(encoder, factors), None
        else:
            params, use = encoder, factors
        out = []
        for batch in batches(split, batch_size, shuffle=False):
            out.append(nd.softmax(forward(params, batch, use), axis=-1).data)
    return np.concatenate(out, axis=0)


def evaluate(encoder: EncoderParams, adapter, split: DatasetSplit, bins: int = 10,
             tace_eps: float = 0.01, task_metric: str = "accuracy", merged: bool = True,
             **report_kwargs) -> tuple[calib.CalibrationReport, calib.PredictionSet]:
    probs = predict(encoder, adapter, split, merged=merged)
    preds = calib.PredictionSet(probs, split.labels)
    return calib.full_report(preds, bins, tace_eps, task_metric, **report_kwargs), preds


def epoch_batches(split: DatasetSplit, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    while True:
        yield from batches(split, batch_size, seed=rng)


@dataclass
class TrainResult:
    state: TrainState
    history: list[dict]
    report: calib.CalibrationReport | None


def run_training(encoder: EncoderParams, adapter, train: DatasetSplit, valid: DatasetSplit,
                 config: TrainConfig, bins: int = 10, tace_eps: float = 0.01,
                 task_metric: str = "accuracy", history_path=None, rng=None,
                 **report_kwargs) -> TrainResult:
    """Train for ``total_steps`` and evaluate every ``eval_every`` steps and at the end.

    Each evaluation appends one record with the fields in ``HISTORY_FIELDS``;
    ``loss`` is the mean training loss since the previous record.
    """
    state = init_state(encoder, adapter, config, rng)
    stream = epoch_batches(train, config.batch_size, state.rng)
    report = None
    since = 0
    fh = Path(history_path).open("w") if history_path is not None else None
    try:
        while state.step < config.total_steps:
            train_step(encoder, adapter, next(stream), state, config)
            since += 1
            if state.step % config.eval_every == 0 or state.step == config.total_steps:
                report, _ = evaluate(encoder, adapter, valid, bins, tace_eps, task_metric, **report_kwargs)
                rec = {"step": state.step, "loss": float(np.mean(state.losses[-since:]))}
                rec.update({k: getattr(report, k) for k in HISTORY_FIELDS[2:]})
                state.history.append(rec)
                since = 0
                log.info("step %d loss %.4f score %.4f ece %.4f", rec["step"], rec["loss"],
                         rec["score"], rec["ece"])
                if fh is not None:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(state, state.history, report)


def read_history(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
