"""Synthetic cohorts with planted, recency-weighted risk codes.

Each patient gets a risk score::

    S = sum over occurrences of planted codes of 2 ** (-age_days / half_life_days)

where ``age_days`` counts back from the index date, and a label drawn with
probability ``sigmoid(intercept + risk_weight * S)``.  The intercept is solved
so the mean probability over the cohort equals ``base_rate``.  Older
occurrences count for little, so models that see event order can beat
bag-of-codes counts.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ihan.core.ops import expit
from ihan.data.cohort import fuse_lab_code
from ihan.errors import ConfigError
from ihan.records import ALL_TYPES, Code, CodeType, Encounter, PatientRecord

_PREFIX = {CodeType.DIAG: "D", CodeType.PROC: "P", CodeType.RX: "R"}
_LAB_FLAGS = ("", "H", "L")


@dataclass(frozen=True)
class SyntheticSpec:
    n_patients: int = 2000
    vocab_size: int = 500
    n_risk_codes: int = 8
    base_rate: float = 0.25
    risk_weight: float = 4.0
    half_life_days: float = 180.0
    mean_encounters: float = 8.0
    min_encounters: int = 6
    max_encounters: int = 10
    # negative-binomial shape for extra encounters; None draws them from a Poisson
    encounter_dispersion: float | None = None
    # probability a code type appears in an encounter; mean extra codes beyond the first
    type_probability: Mapping[str, float] = field(
        default_factory=lambda: {"diag": 0.6, "lab": 0.6, "rx": 0.6, "proc": 0.6}
    )
    extra_codes_mean: float = 0.3
    zipf_exponent: float = 1.0
    # planted codes are drawn from this range of frequency ranks
    risk_rank_range: tuple[int, int] = (0, 16)
    window_start: str = "2017-01-01"
    window_days: int = 1095
    seed: int = 42

    def __post_init__(self):
        if self.n_patients < 1 or self.vocab_size < 2:
            raise ConfigError("n_patients >= 1 and vocab_size >= 2 required")
        lo, hi = self.risk_rank_range
        if not 0 <= lo < hi <= self.vocab_size or hi - lo < self.n_risk_codes:
            raise ConfigError(f"risk_rank_range {self.risk_rank_range} cannot hold {self.n_risk_codes} codes")
        if not 0 < self.base_rate < 1:
            raise ConfigError("base_rate must be in (0, 1)")
        if self.half_life_days <= 0:
            raise ConfigError("half_life_days must be positive")
        if not 1 <= self.min_encounters <= self.max_encounters <= self.window_days:
            raise ConfigError("need 1 <= min_encounters <= max_encounters <= window_days")
        if self.min_encounters < 2:
            raise ConfigError("min_encounters must be >= 2 (cohort eligibility rule)")
        if self.encounter_dispersion is not None and self.encounter_dispersion <= 0:
            raise ConfigError("encounter_dispersion must be positive")

    @property
    def start_date(self) -> dt.date:
        return dt.date.fromisoformat(self.window_start)

    @property
    def index_date(self) -> dt.date:
        """First day after the observation window; ages are measured back from here."""
        return self.start_date + dt.timedelta(days=self.window_days)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["type_probability"] = dict(self.type_probability)
        d["risk_rank_range"] = list(self.risk_rank_range)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields: {sorted(unknown)}")
        d = dict(d)
        if "risk_rank_range" in d:
            d["risk_rank_range"] = tuple(d["risk_rank_range"])
        return cls(**d)


@dataclass
class SyntheticCohort:
    records: list[PatientRecord]
    risk_codes: dict[CodeType, list[str]]
    probabilities: dict[str, float]
    risk_scores: dict[str, float]
    intercept: float
    spec: SyntheticSpec

    def truth_json(self) -> dict:
        return {
            "risk_codes": {t.value: codes for t, codes in self.risk_codes.items()},
            "intercept": self.intercept,
            "risk_weight": self.spec.risk_weight,
            "half_life_days": self.spec.half_life_days,
            "index_date": self.spec.index_date.isoformat(),
            "spec": self.spec.to_dict(),
        }


def code_names(code_type: CodeType, n: int) -> list[str]:
    if code_type == CodeType.LAB:
        # a few distinct tests each reported with no flag, high or low
        return [fuse_lab_code(f"{10000 + i // 3}-{(i // 3) % 10}", _LAB_FLAGS[i % 3]) for i in range(n)]
    return [f"{_PREFIX[code_type]}{i:04d}" for i in range(n)]


def risk_score(record: PatientRecord, risk_codes: Mapping[CodeType, list[str]], index_date: dt.date, half_life: float) -> float:
    """Recency-weighted count of planted-code occurrences."""
    planted = {(t, c) for t, codes in risk_codes.items() for c in codes}
    total = 0.0
    for enc in record.encounters:
        age = (index_date - enc.date).days
        weight = 2.0 ** (-age / half_life)
        total += weight * sum(1 for c in enc.codes if (c.type, c.code) in planted)
    return total


def label_probability(score: float, intercept: float, risk_weight: float) -> float:
    return float(expit(np.array([intercept + risk_weight * score]))[0])


def solve_intercept(scores: np.ndarray, risk_weight: float, base_rate: float) -> float:
    """Intercept b with mean(sigmoid(b + w * s)) == base_rate, by bisection."""
    lo, hi = -60.0, 60.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expit(mid + risk_weight * scores).mean() < base_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCohort:
    rng = np.random.default_rng(spec.seed)
    names = {t: code_names(t, spec.vocab_size) for t in ALL_TYPES}
    ranks = np.arange(1, spec.vocab_size + 1, dtype=np.float64)
    weights = ranks ** (-spec.zipf_exponent)
    freq = weights / weights.sum()

    # which code index sits at which frequency rank, per type
    rank_to_code = {t: rng.permutation(spec.vocab_size) for t in ALL_TYPES}
    lo, hi = spec.risk_rank_range
    risk_codes: dict[CodeType, list[str]] = {}
    for t in ALL_TYPES:
        planted_ranks = np.sort(rng.choice(np.arange(lo, hi), size=spec.n_risk_codes, replace=False))
        risk_codes[t] = [names[t][rank_to_code[t][r]] for r in planted_ranks]

    start = spec.start_date
    extra_mean = max(spec.mean_encounters - spec.min_encounters, 0)
    records = []
    for p in range(spec.n_patients):
        if spec.encounter_dispersion is None:
            extra = rng.poisson(extra_mean)
        else:
            k = spec.encounter_dispersion
            extra = rng.negative_binomial(k, k / (k + extra_mean))
        n_enc = int(np.clip(spec.min_encounters + extra, spec.min_encounters, spec.max_encounters))
        days = np.sort(rng.choice(spec.window_days, size=n_enc, replace=False))
        # first two encounters always carry a diagnosis so the record is eligible
        encounters = []
        for j, day in enumerate(days):
            codes: list[Code] = []
            for t in ALL_TYPES:
                present = rng.random() < spec.type_probability.get(t.value, 0.0)
                if t == CodeType.DIAG and j < 2:
                    present = True
                if not present:
                    continue
                k = 1 + rng.poisson(spec.extra_codes_mean)
                picks = rng.choice(spec.vocab_size, size=k, p=freq)
                codes.extend(Code(t, names[t][rank_to_code[t][r]]) for r in picks)
            if not codes:
                r = rng.choice(spec.vocab_size, p=freq)
                codes.append(Code(CodeType.DIAG, names[CodeType.DIAG][rank_to_code[CodeType.DIAG][r]]))
            encounters.append(Encounter(start + dt.timedelta(days=int(day)), tuple(codes)))
        records.append(PatientRecord(f"P{p:06d}", 0, tuple(encounters)))

    index_date = spec.index_date
    scores = np.array([risk_score(r, risk_codes, index_date, spec.half_life_days) for r in records])
    intercept = solve_intercept(scores, spec.risk_weight, spec.base_rate)
    probs = expit(intercept + spec.risk_weight * scores)
    labels = (rng.random(spec.n_patients) < probs).astype(int)
    records = [dataclasses.replace(r, label=int(y)) for r, y in zip(records, labels)]
    return SyntheticCohort(
        records=records,
        risk_codes=risk_codes,
        probabilities={r.patient_id: float(pr) for r, pr in zip(records, probs)},
        risk_scores={r.patient_id: float(s) for r, s in zip(records, scores)},
        intercept=float(intercept),
        spec=spec,
    )


def expected_positive_rate(cohort: SyntheticCohort) -> float:
    return float(np.mean(list(cohort.probabilities.values())))

