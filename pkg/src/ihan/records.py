"""Patient records: labeled, date-ordered encounters of typed medical codes."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from enum import Enum
from typing import Iterable


class CodeType(str, Enum):
    DIAG = "diag"
    PROC = "proc"
    LAB = "lab"
    RX = "rx"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, value: "str | CodeType") -> "CodeType":
        if isinstance(value, CodeType):
            return value
        try:
            return cls(value.strip().lower())
        except ValueError:
            raise ValueError(f"unknown code type {value!r}; expected one of diag, proc, lab, rx") from None


ALL_TYPES: tuple[CodeType, ...] = (CodeType.DIAG, CodeType.LAB, CodeType.RX, CodeType.PROC)


def parse_types(spec: "str | Iterable[str | CodeType]") -> tuple[CodeType, ...]:
    """Parse "diag,lab" (or an iterable) into an ordered, de-duplicated type tuple."""
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    out: list[CodeType] = []
    for item in items:
        if isinstance(item, str) and not item.strip():
            continue
        t = CodeType.parse(item)
        if t not in out:
            out.append(t)
    if not out:
        raise ValueError("at least one code type is required")
    return tuple(out)


@dataclass(frozen=True)
class Code:
    type: CodeType
    code: str
    description: str | None = None

    def namespaced(self) -> str:
        return f"{self.type.value}:{self.code}"


@dataclass(frozen=True)
class Encounter:
    date: dt.date
    codes: tuple[Code, ...]

    def __post_init__(self):
        if not self.codes:
            raise ValueError(f"encounter on {self.date} has no codes")

    def codes_of(self, code_type: CodeType) -> tuple[Code, ...]:
        return tuple(c for c in self.codes if c.type == code_type)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    label: int
    encounters: tuple[Encounter, ...]

    def __post_init__(self):
        if not self.encounters:
            raise ValueError(f"patient {self.patient_id}: at least one encounter is required")
        if self.label not in (0, 1):
            raise ValueError(f"patient {self.patient_id}: label must be 0 or 1, got {self.label!r}")
        for a, b in zip(self.encounters, self.encounters[1:]):
            if not a.date < b.date:
                raise ValueError(f"patient {self.patient_id}: encounters not strictly date-ascending at {b.date}")

    def has_type(self, code_type: CodeType) -> bool:
        return any(c.type == code_type for e in self.encounters for c in e.codes)

    def types_present(self) -> set[CodeType]:
        return {c.type for e in self.encounters for c in e.codes}
