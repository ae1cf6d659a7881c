"""Repeated train/evaluate runs per configuration, summaries and pairwise t-tests."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ihan.baseline import DEFAULT_L2, train_logistic_baseline
from ihan.data.cohort import split_cohort
from ihan.errors import ConfigError
from ihan.metrics import auc, welch_t_test
from ihan.model import predict
from ihan.records import ALL_TYPES, CodeType, PatientRecord, parse_types
from ihan.train import TrainConfig, train, usable

logger = logging.getLogger(__name__)

LOGISTIC = "logistic_regression"
DEFAULT_SPLIT = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class BaselineConfig:
    """Bag-of-codes logistic regression as an experiment configuration."""

    types: tuple[CodeType, ...] = ALL_TYPES
    seed: int = 0
    l2: float = DEFAULT_L2

    def __post_init__(self):
        object.__setattr__(self, "types", parse_types(self.types))

    @property
    def label(self) -> str:
        return f"{LOGISTIC}[{'+'.join(t.value for t in self.types)}]"

    def to_dict(self) -> dict:
        return {"model": LOGISTIC, "types": [t.value for t in self.types], "seed": self.seed, "l2": self.l2}


ExperimentConfig = TrainConfig | BaselineConfig


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return dataclasses.replace(config, seed=seed)


@dataclass
class RunResult:
    label: str
    seed: int
    test_auc: float
    best_epoch: int
    train_loss: list[float]
    valid_loss: list[float]
    wall_time: float


@dataclass
class ExperimentSummary:
    label: str
    config: dict
    runs: list[RunResult] = field(default_factory=list)

    @property
    def aucs(self) -> np.ndarray:
        return np.array([r.test_auc for r in self.runs])

    @property
    def mean_auc(self) -> float:
        return float(self.aucs.mean())

    @property
    def std_auc(self) -> float:
        return float(self.aucs.std(ddof=1)) if len(self.runs) > 1 else 0.0

    @property
    def n_runs(self) -> int:
        return len(self.runs)


def run_once(
    config: ExperimentConfig, cohort: Sequence[PatientRecord], fractions: Sequence[float] = DEFAULT_SPLIT
) -> RunResult:
    """Split with the config's seed, fit, and score the held-out test part."""
    started = time.perf_counter()
    train_set, valid_set, test_set = split_cohort(cohort, fractions, seed=config.seed)
    if isinstance(config, BaselineConfig):
        model = train_logistic_baseline(train_set, valid_set, config.types, l2=config.l2)
        scores = model.predict(test_set)
        labels = [r.label for r in test_set]
        best_epoch, train_curve, valid_curve = 0, [], []
    else:
        params, history = train(config, train_set, valid_set)
        test_set = usable(test_set, config.types)
        scores = predict(params, test_set)
        labels = [r.label for r in test_set]
        best_epoch, train_curve, valid_curve = history.best_epoch, history.train_loss, history.valid_loss
    result = RunResult(
        label=config.label,
        seed=config.seed,
        test_auc=auc(scores, labels),
        best_epoch=best_epoch,
        train_loss=list(train_curve),
        valid_loss=list(valid_curve),
        wall_time=time.perf_counter() - started,
    )
    logger.info("%s seed %d: test AUC %.4f (%.1fs)", result.label, result.seed, result.test_auc, result.wall_time)
    return result


def run_experiment(
    config: ExperimentConfig,
    cohort: Sequence[PatientRecord],
    n_runs: int = 10,
    fractions: Sequence[float] = DEFAULT_SPLIT,
    jobs: int = 1,
) -> ExperimentSummary:
    """``n_runs`` independent runs with seeds seed, seed+1, ...; each run re-splits the cohort."""
    if n_runs < 2:
        raise ConfigError(f"n_runs must be >= 2, got {n_runs}")
    configs = [with_seed(config, config.seed + r) for r in range(n_runs)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(lambda c: run_once(c, cohort, fractions), configs))
    else:
        runs = [run_once(c, cohort, fractions) for c in configs]
    runs.sort(key=lambda r: r.seed)
    return ExperimentSummary(config.label, config.to_dict(), runs)


# --------------------------------------------------------------------------
# grids and tables


def parse_grid(grid: Mapping | Sequence, base: Mapping | None = None) -> tuple[list[ExperimentConfig], list[tuple[str, str]]]:
    """Configurations and requested comparison pairs from a grid description.

    ``grid`` is either a list of cells or ``{"cells": [...], "pairs": [[a, b], ...]}``.
    A cell is ``{"mode": ..., "types": "diag,lab"}`` plus optional training
    overrides, or ``{"model": "logistic_regression", "types": ...}``.  Pairs
    name cells by label or by position; all pairs are compared when omitted.
    """
    if isinstance(grid, Mapping):
        cells, pairs = grid.get("cells"), grid.get("pairs")
    else:
        cells, pairs = grid, None
    if not cells:
        raise ConfigError("grid has no cells")
    base = dict(base or {})
    configs: list[ExperimentConfig] = []
    for cell in cells:
        cell = dict(cell)
        if cell.pop("model", None) == LOGISTIC:
            configs.append(BaselineConfig(types=cell.get("types", ALL_TYPES), seed=base.get("seed", 0),
                                          l2=cell.get("l2", DEFAULT_L2)))
            continue
        merged = {**base, **cell}
        types = parse_types(merged.get("types", ALL_TYPES))
        if len(types) == 1:
            merged["mode"] = "single_type"
        try:
            configs.append(TrainConfig(**{**merged, "types": types}))
        except TypeError as exc:
            raise ConfigError(f"bad grid cell {cell}: {exc}") from None
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"grid cells must be distinct, got {labels}")
    if pairs is None:
        resolved = list(itertools.combinations(labels, 2))
    else:
        resolved = []
        for a, b in pairs:
            a = labels[a] if isinstance(a, int) else a
            b = labels[b] if isinstance(b, int) else b
            if a not in labels or b not in labels:
                raise ConfigError(f"pair ({a}, {b}) names an unknown cell; cells are {labels}")
            resolved.append((a, b))
    return configs, resolved


@dataclass(frozen=True)
class PairwiseRow:
    config_1: str
    config_2: str
    mean_1: float
    mean_2: float
    t: float
    dof: float
    p_value: float


def pairwise_tests(summaries: Sequence[ExperimentSummary], pairs: Sequence[tuple[str, str]]) -> list[PairwiseRow]:
    by_label = {s.label: s for s in summaries}
    rows = []
    for a, b in pairs:
        sa, sb = by_label[a], by_label[b]
        res = welch_t_test(sa.aucs, sb.aucs)
        rows.append(PairwiseRow(a, b, sa.mean_auc, sb.mean_auc, res.t, res.dof, res.p))
    return rows


def write_summary_csv(path: str | Path, summaries: Sequence[ExperimentSummary]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["configuration", "mean_auc", "std_auc", "n_runs"])
        for s in summaries:
            w.writerow([s.label, f"{s.mean_auc:.6f}", f"{s.std_auc:.6f}", s.n_runs])


def write_runs_csv(path: str | Path, summaries: Sequence[ExperimentSummary]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["configuration", "seed", "test_auc", "best_epoch"])
        for s in summaries:
            for r in s.runs:
                w.writerow([s.label, r.seed, f"{r.test_auc:.6f}", r.best_epoch])


def write_pairwise_csv(path: str | Path, rows: Sequence[PairwiseRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_1", "config_2", "mean_1", "mean_2", "p_value"])
        for r in rows:
            w.writerow([r.config_1, r.config_2, f"{r.mean_1:.6f}", f"{r.mean_2:.6f}", f"{r.p_value:.6g}"])
