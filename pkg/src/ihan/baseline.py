"""Bag-of-codes logistic regression, the comparison model for IHAN.

Features are per-code occurrence counts over a patient's whole history, so
the ordering and timing of events are invisible to it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ihan.core import ops
from ihan.core.optim import AdamWState, adamw_step
from ihan.core.tensor import Tape, Tensor
from ihan.errors import ConfigError
from ihan.records import CodeType, PatientRecord
from ihan.train import EarlyStopping, check_labels
from ihan.vocab import Vocabulary, build_vocabulary

DEFAULT_L2 = 1e-4


@dataclass(frozen=True)
class LogisticBaseline:
    vocab: Vocabulary
    weights: np.ndarray
    bias: float
    types: tuple[CodeType, ...]

    def features(self, records: Sequence[PatientRecord]) -> np.ndarray:
        return count_features(self.vocab, records, self.types)

    def logits(self, records: Sequence[PatientRecord]) -> np.ndarray:
        return self.features(records) @ self.weights + self.bias

    def predict(self, records: Sequence[PatientRecord]) -> np.ndarray:
        return ops.expit(self.logits(records))


def count_features(vocab: Vocabulary, records: Sequence[PatientRecord], types: Sequence[CodeType]) -> np.ndarray:
    """Patients x vocabulary matrix of occurrence counts; out-of-vocabulary codes land in the UNK column."""
    wanted = set(types)
    x = np.zeros((len(records), vocab.size))
    for i, r in enumerate(records):
        for enc in r.encounters:
            for c in enc.codes:
                if c.type in wanted:
                    x[i, vocab.lookup(c.namespaced())] += 1.0
    return x


def train_logistic_baseline(
    train_set: Sequence[PatientRecord],
    valid_set: Sequence[PatientRecord],
    types: Sequence[CodeType] = (CodeType.DIAG, CodeType.LAB, CodeType.RX, CodeType.PROC),
    l2: float = DEFAULT_L2,
    learning_rate: float = 1e-3,
    max_iters: int = 2000,
    patience: int = 50,
) -> LogisticBaseline:
    """Full-batch L2-penalized logistic regression, early-stopped on validation loss.

    Weights start at zero, so ``max_iters=0`` gives every patient the same score.
    """
    if not train_set or not valid_set:
        raise ConfigError("training and validation sets must be non-empty")
    if l2 < 0:
        raise ConfigError("l2 must be non-negative")
    check_labels(train_set)
    types = tuple(types)
    wanted = set(types)
    vocab = build_vocabulary(
        ((None, c.namespaced()) for r in train_set for e in r.encounters for c in e.codes if c.type in wanted),
        code_type=None,
    )
    x_train = Tensor(count_features(vocab, train_set, types))
    x_valid = count_features(vocab, valid_set, types)
    y_train = np.array([[r.label for r in train_set]], dtype=np.float64)
    y_valid = np.array([[r.label for r in valid_set]], dtype=np.float64)

    # bias starts at the training log-odds so the first steps fit codes, not the base rate
    rate = y_train.mean()
    params = {"w": Tensor.zeros(vocab.size, 1), "b": Tensor.scalar(np.log(rate / (1.0 - rate)))}
    state = AdamWState(lr=learning_rate, weight_decay=0.0)
    stopper = EarlyStopping(patience)

    def valid_loss(p):
        z = x_valid @ p["w"].data + p["b"].data
        return ops.bce_loss(Tensor(ops.expit(z).T), y_valid).item()

    best = params
    stopper.best = valid_loss(params)
    for it in range(1, max_iters + 1):
        with Tape() as tape:
            tape.watch(*params.values())
            z = ops.add(ops.matmul(x_train, params["w"]), params["b"])
            loss = ops.bce_loss(ops.transpose(ops.sigmoid(z)), y_train)
            if l2:
                loss = ops.add(loss, ops.scale(ops.total(ops.mul(params["w"], params["w"])), l2))
        grads = tape.backward(loss)
        params = adamw_step(params, {k: grads[t] for k, t in params.items()}, state)
        improved, stop = stopper.step(it, valid_loss(params))
        if improved:
            best = params
        if stop:
            break
    return LogisticBaseline(vocab, best["w"].data[:, 0].copy(), float(best["b"].item()), types)
