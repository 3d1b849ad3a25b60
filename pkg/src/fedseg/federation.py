"""Federated training orchestration.

The orchestrator owns the global weights.  Each round it hands every client a
copy, the clients train locally (optionally on worker threads) and return a
:class:`~fedseg.aggregators.ClientUpdate` holding only a weight delta, the
number of local examples and scalar loss values.  Updates are combined in
ascending client id order, so results never depend on thread scheduling.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence, TypeVar

import numpy as np

from .aggregators import Aggregator, AggregatorSpec, ClientUpdate, check_delta_structure
from .dataset import ImageSample
from .errors import ConfigError, DivergenceError, NonFiniteError
from .losses import bce_dice_loss
from .metrics import MetricsConfig, MetricsReport, evaluate_predictions
from .optim import Adam
from .rng import make_rng
from .tensor import backward
from .unet import UNetModel, forward, predict
from .weights import ModelWeights

log = logging.getLogger(__name__)

T = TypeVar("T")

ROUND_LOG_COLUMNS = ["round", "client_id", "loss", "accuracy", "auc", "recall", "precision", "dice", "iou", "wall_ms"]


@dataclass(frozen=True)
class FLConfig:
    num_clients: int = 4
    rounds: int = 15
    local_epochs: int = 2
    batch_size: int = 16
    shuffle_buffer: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    workers: int | None = None
    validation_fraction: float = 0.0
    log_wall_time: bool = True

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ConfigError("num_clients must be at least 1")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigError("rounds and local_epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.shuffle_buffer < self.batch_size:
            raise ConfigError("shuffle_buffer must be at least batch_size")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be positive")
        self.aggregator.validate()


@dataclass
class ClientState:
    client_id: int
    images: np.ndarray
    masks: np.ndarray
    seed: int
    val_images: np.ndarray | None = None
    val_masks: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class RoundLog:
    round: int
    client_losses: dict[int, float]
    loss: float
    metrics: MetricsReport
    wall_ms: float
    client_metrics: dict[int, MetricsReport] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        rows = []
        for cid in sorted(self.client_losses):
            row = {"round": self.round, "client_id": cid, "loss": self.client_losses[cid]}
            cm = self.client_metrics.get(cid)
            if cm is not None:
                row.update(_metric_cells(cm))
            rows.append(row)
        row = {"round": self.round, "client_id": "global", "loss": self.loss, "wall_ms": self.wall_ms}
        row.update(_metric_cells(self.metrics))
        rows.append(row)
        return rows


def _metric_cells(m: MetricsReport) -> dict:
    return {"accuracy": m.accuracy, "auc": m.auc, "recall": m.recall, "precision": m.precision,
            "dice": m.dice, "iou": m.iou}


# --------------------------------------------------------------------------- data plumbing


def partition(dataset: Sequence[T], num_clients: int, seed: int) -> list[list[T]]:
    """Shuffle, then split into near-equal contiguous chunks.

    Chunk sizes are ``N // K`` with the first ``N % K`` chunks one larger.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot partition an empty dataset")
    if num_clients < 1 or num_clients > n:
        raise ValueError(f"num_clients must lie in [1, {n}], got {num_clients}")
    order = make_rng(seed, 0xDA7A).permutation(n)
    base, extra = divmod(n, num_clients)
    parts, start = [], 0
    for k in range(num_clients):
        size = base + (1 if k < extra else 0)
        parts.append([dataset[int(i)] for i in order[start:start + size]])
        start += size
    return parts


def windowed_shuffle(items: Iterator[T], buffer_size: int, rng: np.random.Generator) -> Iterator[T]:
    """Streaming shuffle through a fixed-size buffer.

    Each output is drawn uniformly from the buffer and its slot refilled from
    the input; with ``buffer_size >= len(items)`` the output is a uniform
    permutation, with ``buffer_size == 1`` order is preserved.
    """
    buf: list[T] = []
    for item in items:
        if len(buf) < buffer_size:
            buf.append(item)
            continue
        i = int(rng.integers(len(buf)))
        yield buf[i]
        buf[i] = item
    while buf:
        i = int(rng.integers(len(buf)))
        buf[i], buf[-1] = buf[-1], buf[i]
        yield buf.pop()


def client_pipeline(
    images: np.ndarray,
    masks: np.ndarray,
    config: FLConfig,
    rng: np.random.Generator,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """repeat(local_epochs) -> windowed shuffle -> batch (short tail kept)."""
    n = len(images)
    if n == 0:
        raise ValueError("client partition is empty")
    stream = (i for _ in range(config.local_epochs) for i in range(n))
    batch: list[int] = []
    for idx in windowed_shuffle(stream, config.shuffle_buffer, rng):
        batch.append(idx)
        if len(batch) == config.batch_size:
            yield images[batch], masks[batch]
            batch = []
    if batch:
        yield images[batch], masks[batch]


def stack_samples(samples: Sequence[ImageSample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        return np.zeros((0, 0, 0, 3), np.float32), np.zeros((0, 0, 0, 3), np.float32)
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.mask for s in samples]).astype(np.float32))


def make_clients(samples: Sequence[ImageSample], config: FLConfig) -> list[ClientState]:
    parts = partition(samples, config.num_clients, config.seed)
    clients = []
    for cid, part in enumerate(parts):
        val = None
        if config.validation_fraction > 0:
            n_val = int(round(len(part) * config.validation_fraction))
            if 0 < n_val < len(part):
                part, val = part[n_val:], part[:n_val]
        images, masks = stack_samples(part)
        client = ClientState(cid, images, masks, seed=int(make_rng(config.seed, 0xC11E, cid).integers(2**63)))
        if val:
            client.val_images, client.val_masks = stack_samples(val)
        clients.append(client)
    return clients


# --------------------------------------------------------------------------- training


def local_train(
    client: ClientState,
    global_model: UNetModel,
    config: FLConfig,
    round_index: int = 0,
) -> ClientUpdate:
    """Train a private copy of the global model; return its delta.

    A fresh optimizer is used every round.  The global model is not modified.
    """
    model = global_model.clone()
    opt = Adam(lr=config.learning_rate)
    shuffle_rng = make_rng(client.seed, round_index, 0)
    dropout_rng = make_rng(client.seed, round_index, 1)
    losses: list[float] = []
    for step, (x, y) in enumerate(client_pipeline(client.images, client.masks, config, shuffle_rng)):
        params = model.trainable_tensors()
        out = forward(model, x, training=True, rng=dropout_rng, params=params)
        loss = bce_dice_loss(out, y).total
        try:
            backward(loss)
        except NonFiniteError as exc:
            raise DivergenceError(client.client_id, step, str(exc)) from exc
        new = opt.step({n: p.data for n, p in params.items()}, {n: p.grad for n, p in params.items()})
        for name, arr in new.items():
            model.weights.set(name, arr)
        losses.append(float(loss.data))
    return ClientUpdate(
        client_id=client.client_id,
        delta=model.weights.delta_from(global_model.weights),
        num_examples=len(client),
        train_losses=tuple(losses),
    )


def worker_count(config: FLConfig) -> int:
    n = config.workers or config.num_clients
    cap = os.environ.get("FEDSEG_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"FEDSEG_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def run_round(
    clients: Sequence[ClientState],
    global_model: UNetModel,
    aggregator: Aggregator,
    config: FLConfig,
    round_index: int = 0,
    executor: ThreadPoolExecutor | None = None,
) -> tuple[ModelWeights, list[ClientUpdate]]:
    """Broadcast, train locally, aggregate, apply.  Returns new global weights."""
    if executor is None or len(clients) == 1:
        updates = [local_train(c, global_model, config, round_index) for c in clients]
    else:
        futures = [executor.submit(local_train, c, global_model, config, round_index) for c in clients]
        updates = [f.result() for f in futures]
    updates.sort(key=lambda u: u.client_id)
    delta = aggregator(updates)
    check_delta_structure(delta, global_model.weights)
    return global_model.weights.apply_delta(delta), updates


@dataclass
class TrainingResult:
    model: UNetModel
    logs: list[RoundLog]
    report: MetricsReport

    def log_rows(self) -> list[dict]:
        return [row for entry in self.logs for row in entry.rows()]


def evaluate_model(model: UNetModel, images: np.ndarray, masks: np.ndarray,
                   config: MetricsConfig | None = None) -> tuple[MetricsReport, float]:
    """Inference-mode metrics plus the mean loss value over the split."""
    preds = predict(model, images)
    report = evaluate_predictions(masks, preds, config)
    return report, report.bce_dice


def run_training(
    model: UNetModel,
    config: FLConfig,
    train: Sequence[ImageSample],
    test: Sequence[ImageSample],
    metrics_config: MetricsConfig | None = None,
    on_round=None,
) -> TrainingResult:
    """Run ``config.rounds`` federated rounds, evaluating on ``test`` after each."""
    config.validate()
    if not train or not test:
        raise ValueError("training needs non-empty train and test splits")
    clients = make_clients(train, config)
    test_x, test_y = stack_samples(test)
    aggregator = Aggregator(config.aggregator)
    logs: list[RoundLog] = []
    workers = worker_count(config)
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(1, config.rounds + 1):
            t0 = time.perf_counter()
            previous = model
            new_weights, updates = run_round(clients, model, aggregator, config, r, executor)
            model = model.with_weights(new_weights)
            report, loss = evaluate_model(model, test_x, test_y, metrics_config)
            client_metrics = {}
            for c in clients:
                if c.val_images is not None:
                    local = previous.with_weights(previous.weights.apply_delta(
                        next(u for u in updates if u.client_id == c.client_id).delta))
                    client_metrics[c.client_id], _ = evaluate_model(local, c.val_images, c.val_masks, metrics_config)
            wall = (time.perf_counter() - t0) * 1e3 if config.log_wall_time else 0.0
            entry = RoundLog(
                round=r,
                client_losses={u.client_id: float(np.mean(u.train_losses)) if u.train_losses else 0.0
                               for u in updates},
                loss=loss,
                metrics=report,
                wall_ms=round(wall, 3),
                client_metrics=client_metrics,
            )
            logs.append(entry)
            log.info("round %d: loss %.4f dice %.4f", r, loss, report.dice)
            if on_round is not None:
                on_round(entry)
    finally:
        if executor is not None:
            executor.shutdown()
    final, _ = evaluate_model(model, test_x, test_y, metrics_config)
    return TrainingResult(model, logs, final)
