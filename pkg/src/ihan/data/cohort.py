"""Cohort files (JSONL), lab-code fusion, case/non-case balancing and splitting."""

from __future__ import annotations

import datetime as dt
import gzip
import io
import json
import logging
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from ihan.errors import ConfigError, ParseError
from ihan.records import Code, CodeType, Encounter, PatientRecord
from ihan.seeding import substream

logger = logging.getLogger(__name__)

T = TypeVar("T")


def _open_text(path: Path, mode: str):
    if path.name.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8", newline="\n")
    return open(path, mode, encoding="utf-8", newline="\n")


def fuse_lab_code(loinc: str, abnormality: str | None) -> str:
    """Lab input code: LOINC joined to its abnormality flag, e.g. ("88294-4", "L") -> "88294-4_L"."""
    if not loinc:
        raise ValueError("fuse_lab_code: loinc must be non-empty")
    if not abnormality:
        return loinc
    return f"{loinc}_{abnormality}"


def is_eligible(record: PatientRecord, min_encounters: int = 2, code_type: CodeType | None = CodeType.DIAG) -> bool:
    """At least ``min_encounters`` encounters carrying a code of ``code_type`` (any type if None)."""
    n = sum(1 for e in record.encounters if code_type is None or any(c.type == code_type for c in e.codes))
    return n >= min_encounters


def _parse_code(obj, lineno: int) -> Code:
    if not isinstance(obj, dict) or "type" not in obj or "code" not in obj:
        raise ParseError("code entries need 'type' and 'code'", lineno)
    try:
        ctype = CodeType.parse(str(obj["type"]))
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None
    code = str(obj["code"])
    if not code:
        raise ParseError("empty code string", lineno)
    desc = obj.get("description")
    return Code(ctype, code, None if desc is None else str(desc))


def parse_patient(obj, lineno: int = 0) -> PatientRecord:
    """Build a record from one decoded JSON object; same-date encounters are merged."""
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", lineno)
    try:
        pid = str(obj["patient_id"])
        label = obj["label"]
        encounters = obj["encounters"]
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", lineno) from None
    if label not in (0, 1) or isinstance(label, bool):
        raise ParseError(f"label must be 0 or 1, got {label!r}", lineno)
    if not isinstance(encounters, list):
        raise ParseError("'encounters' must be a list", lineno)
    by_date: dict[dt.date, list[Code]] = OrderedDict()
    for enc in encounters:
        if not isinstance(enc, dict) or "date" not in enc:
            raise ParseError("encounters need a 'date'", lineno)
        try:
            date = dt.date.fromisoformat(str(enc["date"]))
        except ValueError:
            raise ParseError(f"bad date {enc['date']!r}", lineno) from None
        codes = [_parse_code(c, lineno) for c in enc.get("codes", [])]
        by_date.setdefault(date, []).extend(codes)
    merged = tuple(Encounter(d, tuple(cs)) for d, cs in sorted(by_date.items()) if cs)
    if not merged:
        raise ParseError(f"patient {pid} has no coded encounters", lineno)
    return PatientRecord(pid, int(label), merged)


def load_cohort(
    path: str | Path, min_encounters: int | None = 2, eligibility_type: CodeType | None = CodeType.DIAG
) -> list[PatientRecord]:
    """Read a JSONL (or .jsonl.gz) cohort.

    Records failing the eligibility predicate (``min_encounters`` encounters
    with a ``eligibility_type`` code) are dropped; pass ``min_encounters=None``
    to keep everything.
    """
    path = Path(path)
    records = []
    dropped = 0
    with _open_text(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            record = parse_patient(obj, lineno)
            if min_encounters is not None and not is_eligible(record, min_encounters, eligibility_type):
                dropped += 1
                continue
            records.append(record)
    if not records and not dropped:
        logger.warning("cohort file %s is empty", path)
    if dropped:
        logger.info("dropped %d records with fewer than %d qualifying encounters", dropped, min_encounters)
    return records


def record_to_json(record: PatientRecord) -> dict:
    encounters = []
    for e in record.encounters:
        codes = []
        for c in e.codes:
            item = {"type": c.type.value, "code": c.code}
            if c.description is not None:
                item["description"] = c.description
            codes.append(item)
        encounters.append({"date": e.date.isoformat(), "codes": codes})
    return {"patient_id": record.patient_id, "label": record.label, "encounters": encounters}


def save_cohort(records: Iterable[PatientRecord], path: str | Path) -> None:
    path = Path(path)
    with _open_text(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r), separators=(",", ":")) + "\n")


def balance_cohort(
    cohort: Sequence[T], ratio: int = 3, seed: int = 0, label: Callable[[T], int] = lambda r: r.label
) -> list[T]:
    """Keep every case and ``ratio`` x n_cases randomly chosen non-cases (original order kept)."""
    if ratio < 1:
        raise ConfigError(f"balance ratio must be >= 1, got {ratio}")
    labels = np.fromiter((label(r) for r in cohort), dtype=np.int8, count=len(cohort))
    cases = np.flatnonzero(labels == 1)
    non_cases = np.flatnonzero(labels == 0)
    wanted = ratio * cases.size
    if wanted > non_cases.size:
        logger.warning("only %d non-cases for %d requested; keeping all", non_cases.size, wanted)
        chosen = non_cases
    else:
        chosen = substream(seed, "balance").choice(non_cases, size=wanted, replace=False)
    keep = np.sort(np.concatenate([cases, chosen]))
    return [cohort[i] for i in keep]


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    # largest-remainder rounding so the parts sum to n
    raw = [n * f for f in fractions]
    sizes = [math.floor(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_cohort(
    cohort: Sequence[T],
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    stratified: bool = True,
    label: Callable[[T], int] = lambda r: r.label,
) -> tuple[list[T], ...]:
    """Disjoint, exhaustive seeded split into len(fractions) parts (train, valid, test)."""
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions):
        raise ConfigError(f"split fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    rng = substream(seed, "split")
    n = len(cohort)
    if stratified:
        labels = np.array([label(r) for r in cohort])
        groups = [np.flatnonzero(labels == v) for v in np.unique(labels)]
    else:
        groups = [np.arange(n)]
    parts: list[list[int]] = [[] for _ in fractions]
    for idx in groups:
        idx = rng.permutation(idx)
        start = 0
        for k, size in enumerate(_allocate(idx.size, fractions)):
            parts[k].extend(idx[start : start + size].tolist())
            start += size
    out = []
    for p in parts:
        order = rng.permutation(len(p))
        out.append([cohort[p[i]] for i in order])
    return tuple(out)
