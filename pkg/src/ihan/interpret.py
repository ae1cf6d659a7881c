"""Contribution coefficients: each code occurrence's exact additive share of the logit.

Given fixed attention weights the member vector is linear in the code
embeddings, so the logit splits as

    logit = b + sum over occurrences of  a_t * a_v * a_c * (W . e)

with a_t = 1 outside ``algorithm_comb``.  Reports can be aggregated per
patient and code, or across a cohort.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ihan.errors import ConsistencyError, DegenerateInputError
from ihan.model import AttentionTrace, IhanParams, stream_inputs
from ihan.records import CodeType, PatientRecord

DISPLAY_THRESHOLD = 0.01
DEFAULT_MIN_PATIENTS = 50


@dataclass(frozen=True)
class ContributionEntry:
    patient_id: str
    date: dt.date
    code_type: CodeType
    code: str
    description: str | None
    contribution: float


@dataclass(frozen=True)
class ContributionReport:
    patient_id: str
    entries: tuple[ContributionEntry, ...]
    bias: float
    logit: float
    prediction: float

    def total(self) -> float:
        return math.fsum(e.contribution for e in self.entries)

    def identity_error(self) -> float:
        """|logit - (sum of contributions + bias)|."""
        return abs(self.logit - (self.total() + self.bias))

    def sorted_entries(self) -> list[ContributionEntry]:
        """By date, then largest |contribution| first."""
        return sorted(self.entries, key=lambda e: (e.date, -abs(e.contribution)))


@dataclass(frozen=True)
class PatientCodeRow:
    code_type: CodeType
    code: str
    contribution: float


@dataclass(frozen=True)
class CodeLevelRow:
    code_type: CodeType
    code: str
    n_patients: int
    mean_contribution: float


def _check_trace(params: IhanParams, patient: PatientRecord, trace: AttentionTrace, active_types) -> None:
    if trace.patient_id != patient.patient_id:
        raise ConsistencyError(f"trace is for patient {trace.patient_id}, not {patient.patient_id}")
    try:
        expected = stream_inputs(params, patient, active_types)
    except DegenerateInputError as exc:
        raise ConsistencyError(str(exc)) from None
    if set(expected) != set(trace.streams):
        raise ConsistencyError(f"trace streams {sorted(trace.streams)} != patient streams {sorted(expected)}")
    for key, s in expected.items():
        t = trace.streams[key]
        if s.dates != t.dates or s.codes != t.codes:
            raise ConsistencyError(f"stream {key}: trace encounters do not match patient {patient.patient_id}")
        if len(t.code_weights) != len(s.codes) or len(t.visit_weights) != len(s.codes):
            raise ConsistencyError(f"stream {key}: attention weights do not match encounter count")
        for a, cs in zip(t.code_weights, s.codes):
            if len(a) != len(cs):
                raise ConsistencyError(f"stream {key}: code weights do not match code count")


def contributions(
    params: IhanParams, patient: PatientRecord, trace: AttentionTrace, active_types: Iterable[CodeType] | None = None
) -> ContributionReport:
    """One entry per code occurrence; ``trace`` must come from ``forward`` on the same inputs."""
    _check_trace(params, patient, trace, active_types)
    head = params.W.data[0]
    entries = []
    for key, st in trace.streams.items():
        # W . e for every vocabulary column at once
        projected = head @ params.encoders[key].emb.data
        for j, (date, codes, idx) in enumerate(zip(st.dates, st.codes, st.code_indices)):
            outer = st.type_weight * st.visit_weights[j]
            w = outer * st.code_weights[j] * projected[idx]
            entries.extend(
                ContributionEntry(patient.patient_id, date, c.type, c.code, c.description, float(wk))
                for c, wk in zip(codes, w)
            )
    entries.sort(key=lambda e: e.date)
    return ContributionReport(
        patient_id=patient.patient_id,
        entries=tuple(entries),
        bias=float(params.b.item()),
        logit=trace.logit,
        prediction=trace.y_hat,
    )


def aggregate_patient_code(report: ContributionReport) -> list[PatientCodeRow]:
    """Cumulative contribution per (type, code) over a patient's encounters, largest first."""
    sums: dict[tuple[CodeType, str], float] = defaultdict(float)
    for e in report.entries:
        sums[(e.code_type, e.code)] += e.contribution
    rows = [PatientCodeRow(t, c, v) for (t, c), v in sums.items()]
    rows.sort(key=lambda r: (-r.contribution, r.code_type.value, r.code))
    return rows


def aggregate_code_level(
    reports: Iterable[ContributionReport], min_patients: int = DEFAULT_MIN_PATIENTS
) -> list[CodeLevelRow]:
    """Mean per-patient cumulative contribution of each code across a cohort.

    Codes seen in fewer than ``min_patients`` patients are dropped.  Rows are
    ordered by mean (descending), then patient count (descending), then code.
    """
    sums: dict[tuple[CodeType, str], float] = defaultdict(float)
    counts: dict[tuple[CodeType, str], int] = defaultdict(int)
    for report in reports:
        for row in aggregate_patient_code(report):
            key = (row.code_type, row.code)
            sums[key] += row.contribution
            counts[key] += 1
    rows = [CodeLevelRow(t, c, counts[(t, c)], sums[(t, c)] / counts[(t, c)]) for (t, c) in sums]
    rows = [r for r in rows if r.n_patients >= min_patients]
    rows.sort(key=lambda r: (-r.mean_contribution, -r.n_patients, r.code, r.code_type.value))
    return rows


def display_filter(rows: Sequence, threshold: float = DISPLAY_THRESHOLD, field: str = "contribution") -> list:
    """Rows whose |value| exceeds ``threshold`` (the full rows stay with the caller)."""
    return [r for r in rows if abs(getattr(r, field)) > threshold]


# --------------------------------------------------------------------------
# writers

ENCOUNTER_COLUMNS = ("patient_id", "date", "code_type", "code", "description", "contribution")
PATIENT_COLUMNS = ("code_type", "code", "contribution")
COHORT_COLUMNS = ("code_type", "code", "n_patients", "mean_contribution")


def _cell(value) -> object:
    if isinstance(value, CodeType):
        return value.value
    if isinstance(value, dt.date):
        return value.isoformat()
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else value


def _as_dicts(rows: Sequence, columns: Sequence[str]) -> list[dict]:
    return [{c: _cell(getattr(r, c)) for c in columns} for r in rows]


def encounter_columns(rows: Sequence[ContributionEntry]) -> tuple[str, ...]:
    """The description column only appears when some row carries one."""
    if any(r.description is not None for r in rows):
        return ENCOUNTER_COLUMNS
    return tuple(c for c in ENCOUNTER_COLUMNS if c != "description")


def write_csv(path: str | Path, rows: Sequence, columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        writer.writerows(_as_dicts(rows, columns))


def write_json(path: str | Path, rows: Sequence, columns: Sequence[str]) -> None:
    records = [{c: _json_value(getattr(r, c)) for c in columns} for r in rows]
    Path(path).write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")


def _json_value(value) -> object:
    if isinstance(value, (CodeType, dt.date)):
        return _cell(value)
    return value
