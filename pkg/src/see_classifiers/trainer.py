"""Training of multi-exit CNNs on the weighted sum of per-exit losses."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels as K
from .data import Dataset, fit_normalisation
from .errors import ConfigurationError, ShapeError, TrainingError, UsageError
from .model import SeeCnnModel, backward, forward_all_exits

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    # None -> the per-exit weights stored in the architecture
    loss_weights: tuple[float, ...] | None = None
    seed: int = 0
    patience: int = 0
    normalize: bool = True

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0 or self.patience < 0:
            raise ConfigurationError(f"invalid training config {self}")
        if self.loss_weights is not None and any(not w > 0 for w in self.loss_weights):
            raise ConfigurationError(f"loss weights must be positive: {self.loss_weights}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_exit_loss: list[float]
    train_exit_accuracy: list[float]
    heldout_loss: float | None = None
    heldout_exit_loss: list[float] | None = None
    heldout_exit_accuracy: list[float] | None = None


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    final_exit_accuracy: list[float] = field(default_factory=list)
    stopped_early: bool = False

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.epochs)


def see_loss(y_hats, y, loss_weights) -> float:
    """``sum_n lambda_n * CE(y, y_hat_n)``; batched inputs are averaged over rows.

    ``y`` is a one-hot vector (or a ``(B, K)`` batch of them).
    """
    y_hats = list(y_hats)
    if len(y_hats) != len(loss_weights):
        raise ConfigurationError(f"{len(loss_weights)} loss weights for {len(y_hats)} exits")
    if not y_hats:
        raise ConfigurationError("at least one exit is required")
    total = sum(w * np.mean(K.cross_entropy_loss(y, p)) for w, p in zip(loss_weights, y_hats))
    return float(total)


def loss_and_grads(model: SeeCnnModel, X: np.ndarray, labels: np.ndarray, loss_weights):
    """Batch-mean SEE loss, per-exit losses, per-exit probabilities and gradients."""
    if len(loss_weights) != model.num_exits:
        raise ConfigurationError(f"{len(loss_weights)} loss weights for {model.num_exits} exits")
    y = K.one_hot(labels, model.spec.num_classes)
    logits, tape = forward_all_exits(model, X, record=True)
    probs = [K.softmax(z) for z in logits]
    exit_losses = [float(np.mean(K.cross_entropy_loss(y, p))) for p in probs]
    total = float(sum(w * l for w, l in zip(loss_weights, exit_losses)))
    b = len(labels)
    dlogits = [w * K.cross_entropy_grad_logits(y, p) / b for w, p in zip(loss_weights, probs)]
    return total, exit_losses, probs, backward(model, tape, dlogits)


def exit_probabilities(model: SeeCnnModel, X: np.ndarray) -> list[np.ndarray]:
    """Softmax outputs of every exit for a batch of full windows, chunked."""
    outs = [[] for _ in range(model.num_exits)]
    for start in range(0, len(X), EVAL_CHUNK):
        for n, z in enumerate(forward_all_exits(model, X[start : start + EVAL_CHUNK])):
            outs[n].append(K.softmax(z))
    return [np.concatenate(o) for o in outs]


def evaluate_exit(model: SeeCnnModel, dataset: Dataset, n: int) -> float:
    """Fraction of segments whose exit-``n`` (1-based) argmax equals the label."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty split")
    if not 1 <= n <= model.num_exits:
        raise UsageError(f"exit index {n} outside 1..{model.num_exits}")
    probs = exit_probabilities(model, dataset.X)[n - 1]
    return float(np.mean(probs.argmax(axis=1) == dataset.y))


def _metrics(model, dataset, weights):
    probs = exit_probabilities(model, dataset.X)
    y = K.one_hot(dataset.y, model.spec.num_classes)
    losses = [float(np.mean(K.cross_entropy_loss(y, p))) for p in probs]
    accs = [float(np.mean(p.argmax(axis=1) == dataset.y)) for p in probs]
    return float(sum(w * l for w, l in zip(weights, losses))), losses, accs


def _check_compatible(model: SeeCnnModel, dataset: Dataset) -> None:
    spec = model.spec
    if (dataset.channels, dataset.length) != (spec.channels, spec.segment_length):
        raise ShapeError(
            f"dataset segments are {dataset.channels}x{dataset.length}, "
            f"model expects {spec.channels}x{spec.segment_length}"
        )
    if dataset.num_classes != spec.num_classes:
        raise ConfigurationError(f"dataset has {dataset.num_classes} classes, model {spec.num_classes}")


def train(model: SeeCnnModel, train_set: Dataset, cfg: TrainConfig, heldout: Dataset | None = None):
    """Fit ``model`` in place with mini-batch Adam; returns ``(model, report)``.

    Every step back-propagates the loss of every exit. Input normalisation
    statistics are fitted on ``train_set`` unless ``cfg.normalize`` is off.
    """
    cfg.validate()
    _check_compatible(model, train_set)
    if heldout is not None and len(heldout):
        _check_compatible(model, heldout)
    else:
        heldout = None
    if len(train_set) == 0:
        raise UsageError("training split is empty")
    weights = tuple(cfg.loss_weights) if cfg.loss_weights is not None else model.spec.loss_weights
    if len(weights) != model.num_exits:
        raise ConfigurationError(f"{len(weights)} loss weights for {model.num_exits} exits")
    report = TrainReport()
    if cfg.epochs == 0:
        return model, report

    if cfg.normalize:
        model.input_mean, model.input_std = fit_normalisation(train_set.X)
    params = model.parameters()
    state = K.AdamState(learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_set)
    best, best_params, stale = np.inf, None, 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            total, exit_losses, _, grads = loss_and_grads(model, train_set.X[idx], train_set.y[idx], weights)
            if not np.isfinite(total):
                bad = [i + 1 for i, l in enumerate(exit_losses) if not np.isfinite(l)]
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_no}, exit(s) {bad}")
            try:
                K.adam_step(params, grads, state)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {batch_no}: {exc}") from None

        tr = _metrics(model, train_set, weights)
        rec = EpochRecord(epoch, tr[0], tr[1], tr[2])
        if heldout is not None:
            rec.heldout_loss, rec.heldout_exit_loss, rec.heldout_exit_accuracy = _metrics(model, heldout, weights)
        report.epochs.append(rec)
        log.debug("epoch %d loss %.5f exit acc %s", epoch, rec.train_loss, rec.train_exit_accuracy)

        if cfg.patience:
            monitor = rec.heldout_loss if heldout is not None else rec.train_loss
            if monitor < best:
                best, stale = monitor, 0
                best_params = {k: v.copy() for k, v in params.items()}
            else:
                stale += 1
                if stale >= cfg.patience:
                    report.stopped_early = True
                    break

    if best_params is not None and report.stopped_early:
        for k, v in best_params.items():
            params[k][...] = v
    final = report.epochs[-1]
    report.final_exit_accuracy = list(
        final.heldout_exit_accuracy if heldout is not None and not report.stopped_early
        else _metrics(model, heldout or train_set, weights)[2]
    )
    return model, report
