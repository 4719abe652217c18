"""Training loop (Adam, gradient accumulation, early stopping), evaluation and sweeps."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from typing import Sequence

import numpy as np

from .data import Example, dataset_d_img
from .diffnum import RngStream
from .metrics import Metrics, classification_metrics
from .encoder import EncoderConfig
from .model import Batch, ModelConfig, TraceModel

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


class TrainingError(RuntimeError):
    pass


@dataclasses.dataclass
class TrainConfig:
    batch_size: int = 64
    accum_target: int = 512
    learning_rate: float = 1e-4
    max_epochs: int = 30
    patience: int = 5
    min_delta: float = 1e-4
    tau: float = 1.0
    selection: str = "soft"
    seed: int = 0
    encoder_n: int | None = 4
    use_rel_loss: bool = True
    gumbel_noise: bool = True
    threshold: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size <= 0 or self.accum_target <= 0:
            raise ValueError("batch_size and accum_target must be positive")
        if self.accum_target % self.batch_size:
            raise ValueError(f"accum_target {self.accum_target} is not a multiple of batch_size {self.batch_size}")
        if self.learning_rate < 0 or self.tau <= 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ValueError(f"invalid training rates in {self}")
        if self.selection not in ("soft", "hard_st"):
            raise ValueError(f"selection must be 'soft' or 'hard_st', got {self.selection!r}")

    @property
    def micro_batches(self) -> int:
        return self.accum_target // self.batch_size


# Desk-scale settings used for the synthetic reference corpus.  The head is
# narrower than the defaults and steps more often with a larger rate, since
# 400 examples give only one update per epoch at the default accumulation.
REFERENCE_MODEL_CONFIG = ModelConfig(encoder=EncoderConfig(), h1=128, h2=64, dropout=0.1, D=128, d_img=64)
REFERENCE_TRAIN_CONFIG = TrainConfig(batch_size=16, accum_target=32, learning_rate=3e-3, seed=0)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name].data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    l_cls: float
    l_rel: float
    l_total: float
    val: Metrics | None
    steps: int


@dataclasses.dataclass
class TrainRun:
    config: TrainConfig
    model_config: ModelConfig
    model: TraceModel
    history: list[EpochRecord]
    best_epoch: int
    best_val_f1: float
    best_state: dict[str, np.ndarray]
    initial_state: dict[str, np.ndarray]
    stopped_early: bool
    steps: int

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "l_cls", "l_rel", "l_total", "val_accuracy", "val_precision", "val_recall", "val_f1", "steps"])
        for r in self.history:
            v = r.val
            w.writerow([r.epoch, f"{r.l_cls:.6f}", f"{r.l_rel:.6f}", f"{r.l_total:.6f}",
                        *(f"{x:.6f}" for x in ((v.accuracy, v.precision, v.recall, v.f1) if v else (math.nan,) * 4)),
                        r.steps])
        return buf.getvalue()


def _param_norms(model: TraceModel) -> dict[str, float]:
    return {n: float(np.linalg.norm(t.data)) for n, t in model.store.trainable().items()}


def batch_gradients(
    model: TraceModel,
    batch: Batch,
    config: TrainConfig,
    dropout_rng: RngStream | None = None,
    gumbel_rng: RngStream | None = None,
    hidden: np.ndarray | None = None,
) -> tuple[tuple[float, float, float], dict[str, np.ndarray]]:
    """Batch-mean losses and gradients of ``l_total`` for every trainable tensor."""
    trainable = model.store.trainable()
    for t in trainable.values():
        t.grad = None
    out = model.forward(batch, train=True, tau=config.tau, selection=config.selection,
                        dropout_rng=dropout_rng, gumbel_rng=gumbel_rng, hidden=hidden)
    l_cls, l_rel, l_total = model.losses(out, batch.labels, config.use_rel_loss)
    values = (l_cls.item(), l_rel.item(), l_total.item())
    if not all(math.isfinite(v) for v in values):
        return values, {}
    l_total.backward()
    grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in trainable.items()}
    for t in trainable.values():
        t.grad = None
    return values, grads


def accumulated_gradients(model: TraceModel, batches: Sequence[Batch], config: TrainConfig) -> dict[str, np.ndarray]:
    """Example-weighted mean gradient over several noise-free micro-batches."""
    total = sum(len(b) for b in batches)
    acc: dict[str, np.ndarray] = {}
    for b in batches:
        _, grads = batch_gradients(model, b, config)
        for n, g in grads.items():
            acc[n] = acc.get(n, 0.0) + g * (len(b) / total)
    return acc


def evaluate(model: TraceModel, dataset: Sequence[Example] | Batch, threshold: float = 0.5) -> Metrics:
    """Macro metrics on the deterministic path (no dropout, no noise, argmax selection)."""
    probs, _ = predict_dataset(model, dataset)
    batch = dataset if isinstance(dataset, Batch) else None
    labels = batch.labels if batch is not None else np.array([ex.label for ex in dataset])
    return classification_metrics(labels, (probs >= threshold).astype(int), threshold)


def predict_dataset(model: TraceModel, dataset: Sequence[Example] | Batch) -> tuple[np.ndarray, np.ndarray]:
    """Hateful-class probabilities and masked caption scores for every example."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    batch = dataset if isinstance(dataset, Batch) else model.make_batch(dataset)
    probs, scores = [], []
    for lo in range(0, len(batch), EVAL_CHUNK):
        p, s = model.predict(batch.take(slice(lo, lo + EVAL_CHUNK)))
        probs.append(p)
        scores.append(s)
    return np.concatenate(probs), np.concatenate(scores)


def selection_accuracy(model: TraceModel, dataset: Sequence[Example]) -> float:
    """Fraction of hateful examples whose selected caption is the planted one."""
    positives = [ex for ex in dataset if ex.label == 1]
    if not positives or any(ex.signal_index is None for ex in positives):
        raise ValueError("dataset has no ground-truth signal caption indices")
    _, scores = predict_dataset(model, positives)
    selected = scores.argmax(axis=1) + 1
    truth = np.array([ex.signal_index for ex in positives])
    return float(np.mean(selected == truth))


def train(
    config: TrainConfig,
    train_set: Sequence[Example],
    val_set: Sequence[Example],
    model_config: ModelConfig | None = None,
    model: TraceModel | None = None,
) -> TrainRun:
    """Fit the head with Adam; keep the parameters of the best validation epoch.

    Every ``accum_target / batch_size`` micro-batches (or at epoch end) the
    example-weighted mean gradient is applied.  Validation macro-F1 drives
    early stopping.  All randomness derives from ``config.seed``.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    if model is None:
        model_config = model_config or ModelConfig(d_img=dataset_d_img(train_set))
        model = TraceModel.init(model_config, config.seed)
    model_config = model.config
    model.apply_freeze(config.encoder_n)
    initial_state = model.store.snapshot()

    rng = RngStream(config.seed)
    data_rng, dropout_rng, gumbel_rng = rng.child("data"), rng.child("dropout"), rng.child("gumbel")
    train_batch = model.make_batch(train_set)
    val_batch = model.make_batch(val_set)
    hidden = model.prefix_states(train_batch)

    trainable = model.store.trainable()
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    history: list[EpochRecord] = []
    best_f1, best_epoch, best_state = -math.inf, 0, model.store.snapshot()
    stale = 0
    stopped_early = False
    N = len(train_batch)

    for epoch in range(1, config.max_epochs + 1):
        order = data_rng.permutation(N)
        sums = np.zeros(3)
        acc: dict[str, np.ndarray] = {}
        acc_count = acc_batches = 0
        steps = 0
        for b, lo in enumerate(range(0, N, config.batch_size)):
            idx = order[lo: lo + config.batch_size]
            mb = train_batch.take(idx)
            losses, grads = batch_gradients(
                model, mb, config, dropout_rng,
                gumbel_rng if config.gumbel_noise else None, hidden[idx],
            )
            if not grads:
                raise TrainingError(
                    f"non-finite loss {losses} at epoch {epoch}, batch {b}; parameter norms {_param_norms(model)}"
                )
            sums += np.array(losses) * len(idx)
            for n, g in grads.items():
                acc[n] = acc.get(n, 0.0) + g * len(idx)
            acc_count += len(idx)
            acc_batches += 1
            if acc_batches == config.micro_batches or lo + config.batch_size >= N:
                opt.step(trainable, {n: g / acc_count for n, g in acc.items()})
                steps += 1
                acc, acc_count, acc_batches = {}, 0, 0
        val = evaluate(model, val_batch, config.threshold)
        l_cls, l_rel, l_total = sums / N
        history.append(EpochRecord(epoch, l_cls, l_rel, l_total, val, steps))
        log.info("epoch %d  l_total %.4f  val f1 %.4f", epoch, l_total, val.f1)
        if val.f1 > best_f1 + config.min_delta:
            best_f1, best_epoch, best_state = val.f1, epoch, model.store.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                stopped_early = True
                break

    model.store.load(best_state)
    return TrainRun(
        config=config,
        model_config=model_config,
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_val_f1=best_f1,
        best_state=best_state,
        initial_state=initial_state,
        stopped_early=stopped_early,
        steps=opt.t,
    )


@dataclasses.dataclass
class SweepRow:
    n: int
    macro_f1: float
    accuracy: float
    trainable_params: int
    epochs: int
    error: str = ""


def layer_sweep(
    config: TrainConfig,
    n_values: Sequence[int],
    train_set: Sequence[Example],
    val_set: Sequence[Example],
    test_set: Sequence[Example] | None = None,
    model_config: ModelConfig | None = None,
) -> list[SweepRow]:
    """Train one model per ``n`` with everything else (seeds included) fixed.

    Scores are on ``test_set`` when given, else on ``val_set``.  A failing
    cell is reported in its row and the sweep continues.
    """
    model_config = model_config or ModelConfig(d_img=dataset_d_img(train_set))
    L = model_config.encoder.num_layers
    bad = [n for n in n_values if not 0 <= n <= L]
    if bad:
        raise ValueError(f"n values {bad} outside [0, {L}]")
    target = test_set if test_set is not None else val_set
    rows = []
    for n in n_values:
        try:
            run = train(dataclasses.replace(config, encoder_n=n), train_set, val_set, model_config)
            m = evaluate(run.model, target, config.threshold)
            rows.append(SweepRow(n, m.f1, m.accuracy, run.model.store.size(trainable_only=True), len(run.history)))
        except (TrainingError, ValueError, FloatingPointError) as err:
            log.warning("sweep cell n=%d failed: %s", n, err)
            rows.append(SweepRow(n, math.nan, math.nan, 0, 0, str(err)))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "macro_f1", "accuracy", "trainable_params", "epochs", "error"])
    for r in rows:
        w.writerow([r.n, f"{r.macro_f1:.6f}", f"{r.accuracy:.6f}", r.trainable_params, r.epochs, r.error])
    return buf.getvalue()
