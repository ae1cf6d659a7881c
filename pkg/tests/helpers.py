"""Random toy models and patients shared by the test modules."""

import datetime as dt

import numpy as np

from ihan.core.tensor import Tensor
from ihan.model import Mode, build_vocabularies, init_params
from ihan.records import ALL_TYPES, Code, CodeType, Encounter, PatientRecord

POOL = 12  # distinct codes per type in toy data


def code_name(t: CodeType, i: int) -> str:
    return f"{t.value[0].upper()}{i:02d}"


def random_patient(
    rng: np.random.Generator,
    types=ALL_TYPES,
    max_encounters: int = 5,
    max_codes: int = 4,
    pool: int = POOL,
    pid: str = "p",
    label: int | None = None,
) -> PatientRecord:
    n_enc = int(rng.integers(1, max_encounters + 1))
    start = dt.date(2020, 1, 1)
    days = np.sort(rng.choice(400, size=n_enc, replace=False))
    encounters = []
    for day in days:
        codes = []
        for _ in range(int(rng.integers(1, max_codes + 1))):
            t = types[int(rng.integers(len(types)))]
            codes.append(Code(t, code_name(t, int(rng.integers(pool)))))
        encounters.append(Encounter(start + dt.timedelta(days=int(day)), tuple(codes)))
    y = int(rng.integers(2)) if label is None else label
    return PatientRecord(pid, y, tuple(encounters))


def vocab_patients(types=ALL_TYPES, pool: int = POOL) -> list[PatientRecord]:
    """Patients that together contain every toy code of ``types``."""
    enc = tuple(
        Encounter(dt.date(2020, 1, 1 + i), tuple(Code(t, code_name(t, i)) for t in types)) for i in range(pool)
    )
    return [PatientRecord("vocab", 0, enc)]


def random_params(mode, types, rng: np.random.Generator, dim: int = 5, hidden: int | None = None, scale: float = 1.0):
    mode = Mode(mode)
    vocabs = build_vocabularies(mode, types, vocab_patients(types))
    params = init_params(mode, types, vocabs, rng, embedding_dim=dim, hidden_dim=hidden or dim)
    if scale != 1.0:
        params = params.with_tensors({k: Tensor(v.data * scale) for k, v in params.named_tensors().items()})
    # a non-zero head bias so the bias term is exercised
    return params.with_tensors({"head.b": Tensor.scalar(rng.normal())})
