"""Mini-batch BCE training with AdamW and epoch-level early stopping."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ihan.core.ops import bce_loss
from ihan.core.optim import AdamWState, adamw_step, clip_global_norm
from ihan.core.tensor import Tape, Tensor
from ihan.errors import ConfigError, DegenerateLabelError
from ihan.model import (
    IhanParams,
    Mode,
    StreamInput,
    batch_loss,
    build_vocabularies,
    forward_batch,
    has_active_codes,
    init_params,
    stream_inputs,
)
from ihan.records import CodeType, PatientRecord, parse_types
from ihan.seeding import substream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.ALGORITHM_COMB
    types: tuple[CodeType, ...] = (CodeType.DIAG, CodeType.LAB, CodeType.RX, CodeType.PROC)
    embedding_dim: int = 128
    hidden_dim: int = 128
    learning_rate: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    clip_norm: float | None = 5.0
    weight_decay: float = 0.01
    min_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "types", parse_types(self.types))
        for name in ("embedding_dim", "hidden_dim", "batch_size", "max_epochs", "patience", "min_count"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive (or None to disable)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.patience >= self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) must be smaller than max_epochs ({self.max_epochs})")
        if self.mode == Mode.SINGLE_TYPE and len(self.types) != 1:
            raise ConfigError("single_type mode needs exactly one code type")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        d["types"] = [t.value for t in self.types]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**d)

    @property
    def label(self) -> str:
        return f"{self.mode.value}[{'+'.join(t.value for t in self.types)}]"


@dataclass
class TrainHistory:
    initial_valid_loss: float
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    stopped_early: bool = False
    wall_time: float = 0.0

    @property
    def best_valid_loss(self) -> float:
        if self.best_epoch == 0:
            return self.initial_valid_loss
        return self.valid_loss[self.best_epoch - 1]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class EarlyStopping:
    """Track the best validation loss; signal a stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch: int, loss: float) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


def check_labels(records: Sequence[PatientRecord], what: str = "training") -> None:
    labels = {r.label for r in records}
    if labels != {0, 1}:
        raise DegenerateLabelError(f"{what} labels are all {labels.pop() if labels else 'missing'}")


def usable(records: Sequence[PatientRecord], types: Sequence[CodeType]) -> list[PatientRecord]:
    """Records with at least one code of the active types; others are dropped with a warning."""
    kept = [r for r in records if has_active_codes(r, types)]
    if len(kept) < len(records):
        logger.warning("dropping %d patients with no %s codes", len(records) - len(kept), "/".join(map(str, types)))
    return kept


def encode(params: IhanParams, records: Sequence[PatientRecord]) -> list[dict[str, StreamInput]]:
    return [stream_inputs(params, r) for r in records]


def _validation_loss(
    params: IhanParams, inputs: Sequence[Mapping[str, StreamInput]], labels: np.ndarray, batch_size: int = 512
) -> float:
    total = 0.0
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start : start + batch_size]
        y_hat = forward_batch(params, chunk).y_hat
        total += bce_loss(y_hat, labels[start : start + batch_size].reshape(1, -1)).item() * len(chunk)
    return total / len(inputs)


def initial_params(config: TrainConfig, train_set: Sequence[PatientRecord]) -> IhanParams:
    """Vocabularies from ``train_set`` only, seeded parameter init.

    The head bias starts at the training log-odds so early epochs are not spent
    bending the embeddings toward the base rate.
    """
    vocabs = build_vocabularies(config.mode, config.types, train_set, config.min_count)
    params = init_params(
        config.mode,
        config.types,
        vocabs,
        substream(config.seed, "init"),
        embedding_dim=config.embedding_dim,
        hidden_dim=config.hidden_dim,
    )
    rate = float(np.mean([r.label for r in train_set]))
    if 0.0 < rate < 1.0:
        params = dataclasses.replace(params, b=Tensor.scalar(math.log(rate / (1.0 - rate))))
    return params


def train(
    config: TrainConfig,
    train_set: Sequence[PatientRecord],
    valid_set: Sequence[PatientRecord],
    params: IhanParams | None = None,
) -> tuple[IhanParams, TrainHistory]:
    """Fit IHAN; returns the parameters of the epoch with the lowest validation loss."""
    started = time.perf_counter()
    train_set = usable(train_set, config.types)
    valid_set = usable(valid_set, config.types)
    if not train_set or not valid_set:
        raise ConfigError("training and validation sets must be non-empty")
    check_labels(train_set)

    if params is None:
        params = initial_params(config, train_set)
    train_inputs = encode(params, train_set)
    valid_inputs = encode(params, valid_set)
    y_train = np.array([r.label for r in train_set], dtype=np.float64)
    y_valid = np.array([r.label for r in valid_set], dtype=np.float64)

    state = AdamWState(lr=config.learning_rate, weight_decay=config.weight_decay)
    shuffle_rng = substream(config.seed, "shuffle")
    history = TrainHistory(initial_valid_loss=_validation_loss(params, valid_inputs, y_valid))
    stopper = EarlyStopping(config.patience)
    stopper.best = history.initial_valid_loss
    best_params = params

    n = len(train_inputs)
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            named = params.named_tensors()
            with Tape() as tape:
                tape.watch(*named.values())
                loss = batch_loss(params, [train_inputs[i] for i in idx], y_train[idx])
            grads = tape.backward(loss)
            clipped = clip_global_norm({k: grads[t] for k, t in named.items()}, config.clip_norm)
            params = params.with_tensors(adamw_step(named, clipped, state))
            epoch_loss += loss.item() * idx.size
        history.train_loss.append(epoch_loss / n)
        vloss = _validation_loss(params, valid_inputs, y_valid)
        history.valid_loss.append(vloss)
        improved, stop = stopper.step(epoch, vloss)
        if improved:
            best_params = params
        logger.info("epoch %d train %.5f valid %.5f%s", epoch, history.train_loss[-1], vloss, " *" if improved else "")
        history.stopped_epoch = epoch
        if stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    history.wall_time = time.perf_counter() - started
    return best_params, history
