"""IHAN forward pass.

Single code type (one "stream")::

    e_jk  = W_emb[:, code_jk]
    a_c   = softmax_k(W_c e_jk + b_c)            within each encounter
    v_j   = sum_k a_c[jk] e_jk
    h_j   = GRU(v_1..v_j)
    a_v   = softmax_j(W_v h_j + b_v)
    m     = sum_j a_v[j] v_j                      (weights v_j, not h_j)
    y_hat = sigmoid(W m + b)

``algorithm_comb`` runs one stream per code type and mixes the per-type
member vectors with a type-attention softmax (types absent from a patient are
masked out).  ``data_comb`` merges all codes of a date into one stream over a
shared ``type:code`` vocabulary.

Everything is computed for a mini-batch at once: codes, encounters and
patients are packed as columns and grouped with segment ids, so one tape
covers the batch.  A single patient is a batch of one.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from ihan.core import ops
from ihan.core.gru import GATE_NAMES, GRUParams, gru_cell, gru_sequence
from ihan.core.tensor import Tensor
from ihan.errors import DegenerateInputError, DimensionError
from ihan.records import Code, CodeType, PatientRecord
from ihan.vocab import DEFAULT_EMBEDDING_DIM, Vocabulary, build_vocabulary, init_embedding

SHARED_STREAM = "all"


class Mode(str, Enum):
    SINGLE_TYPE = "single_type"
    ALGORITHM_COMB = "algorithm_comb"
    DATA_COMB = "data_comb"

    def __str__(self) -> str:
        return self.value


def _uniform(rng: np.random.Generator, shape: tuple[int, int], dim: int) -> Tensor:
    bound = 1.0 / np.sqrt(dim)
    return Tensor._wrap(rng.uniform(-bound, bound, size=shape))


@dataclass(frozen=True)
class SingleTypeParams:
    """Encoder for one stream: embedding, code attention, GRU, visit attention."""

    vocab: Vocabulary
    emb: Tensor  # d x V
    W_c: Tensor  # 1 x d
    b_c: Tensor  # 1 x 1
    gru: GRUParams
    W_v: Tensor  # 1 x h
    b_v: Tensor  # 1 x 1

    def __post_init__(self):
        d, V = self.emb.shape
        h = self.gru.hidden_dim
        expected = {"emb": (d, self.vocab.size), "W_c": (1, d), "b_c": (1, 1), "W_v": (1, h), "b_v": (1, 1)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {getattr(self, name).shape}")
        if self.gru.input_dim != d:
            raise DimensionError(f"GRU input dim {self.gru.input_dim} != embedding dim {d}")

    @property
    def embedding_dim(self) -> int:
        return self.emb.rows

    @property
    def hidden_dim(self) -> int:
        return self.gru.hidden_dim

    def tensors(self) -> dict[str, Tensor]:
        out = {"emb": self.emb, "W_c": self.W_c, "b_c": self.b_c}
        out.update({f"gru.{k}": v for k, v in self.gru.tensors().items()})
        out.update({"W_v": self.W_v, "b_v": self.b_v})
        return out

    def with_tensors(self, values: Mapping[str, Tensor]) -> "SingleTypeParams":
        gru = GRUParams(**{k: values.get(f"gru.{k}", getattr(self.gru, k)) for k in GATE_NAMES})
        plain = {k: values[k] for k in ("emb", "W_c", "b_c", "W_v", "b_v") if k in values}
        return replace(self, gru=gru, **plain)

    @classmethod
    def init(
        cls, vocab: Vocabulary, embedding_dim: int, hidden_dim: int, rng: np.random.Generator
    ) -> "SingleTypeParams":
        return cls(
            vocab=vocab,
            emb=init_embedding(vocab, embedding_dim, rng),
            W_c=_uniform(rng, (1, embedding_dim), embedding_dim),
            b_c=Tensor.zeros(1, 1),
            gru=GRUParams.init(embedding_dim, hidden_dim, rng),
            W_v=_uniform(rng, (1, hidden_dim), hidden_dim),
            b_v=Tensor.zeros(1, 1),
        )


@dataclass(frozen=True)
class IhanParams:
    """All trainable parameters of one model configuration (plus its vocabularies)."""

    mode: Mode
    types: tuple[CodeType, ...]
    encoders: dict[str, SingleTypeParams]
    W: Tensor  # 1 x d
    b: Tensor  # 1 x 1
    W_t: Tensor | None = None  # 1 x d, algorithm_comb only
    b_t: Tensor | None = None

    def __post_init__(self):
        if not self.types:
            raise ValueError("IhanParams needs at least one code type")
        keys = stream_keys(self.mode, self.types)
        if list(self.encoders) != keys:
            raise ValueError(f"{self.mode} expects encoders {keys}, got {list(self.encoders)}")
        has_type_attn = self.W_t is not None and self.b_t is not None
        if has_type_attn != (self.mode == Mode.ALGORITHM_COMB):
            raise ValueError("type attention (W_t, b_t) exists exactly in algorithm_comb")
        d = self.embedding_dim
        if any(e.embedding_dim != d for e in self.encoders.values()):
            raise DimensionError("all encoders must share one embedding dim")
        if self.W.shape != (1, d) or self.b.shape != (1, 1):
            raise DimensionError(f"head W/b: expected (1, {d}) and (1, 1), got {self.W.shape}, {self.b.shape}")
        if has_type_attn and (self.W_t.shape != (1, d) or self.b_t.shape != (1, 1)):
            raise DimensionError(f"type attention: expected (1, {d}) and (1, 1)")

    @property
    def embedding_dim(self) -> int:
        return next(iter(self.encoders.values())).embedding_dim

    @property
    def hidden_dim(self) -> int:
        return next(iter(self.encoders.values())).hidden_dim

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, enc in self.encoders.items():
            out.update({f"{key}.{name}": t for name, t in enc.tensors().items()})
        if self.mode == Mode.ALGORITHM_COMB:
            out["type_attn.W_t"] = self.W_t
            out["type_attn.b_t"] = self.b_t
        out["head.W"] = self.W
        out["head.b"] = self.b
        return out

    def with_tensors(self, values: Mapping[str, Tensor]) -> "IhanParams":
        encoders = {}
        for key, enc in self.encoders.items():
            prefix = key + "."
            sub = {k[len(prefix) :]: v for k, v in values.items() if k.startswith(prefix)}
            encoders[key] = enc.with_tensors(sub)
        return replace(
            self,
            encoders=encoders,
            W=values.get("head.W", self.W),
            b=values.get("head.b", self.b),
            W_t=values.get("type_attn.W_t", self.W_t),
            b_t=values.get("type_attn.b_t", self.b_t),
        )

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.named_tensors().values())


def stream_keys(mode: Mode, types: Sequence[CodeType]) -> list[str]:
    if mode == Mode.SINGLE_TYPE:
        if len(types) != 1:
            raise ValueError(f"single_type mode takes exactly one code type, got {list(map(str, types))}")
        return [types[0].value]
    if mode == Mode.DATA_COMB:
        return [SHARED_STREAM]
    return [t.value for t in types]


def build_vocabularies(
    mode: Mode, types: Sequence[CodeType], records: Iterable[PatientRecord], min_count: int = 1
) -> dict[str, Vocabulary]:
    """Vocabularies for every stream of the configuration, from ``records`` only."""
    records = list(records)
    if mode == Mode.DATA_COMB:
        corpus = ((None, c.namespaced()) for r in records for e in r.encounters for c in e.codes if c.type in types)
        return {SHARED_STREAM: build_vocabulary(corpus, None, min_count)}
    out = {}
    for key in stream_keys(mode, types):
        ctype = CodeType(key)
        corpus = ((c.type, c.code) for r in records for e in r.encounters for c in e.codes if c.type == ctype)
        out[key] = build_vocabulary(corpus, ctype, min_count)
    return out


def init_params(
    mode: Mode | str,
    types: Sequence[CodeType],
    vocabs: Mapping[str, Vocabulary],
    rng: np.random.Generator,
    embedding_dim: int = DEFAULT_EMBEDDING_DIM,
    hidden_dim: int | None = None,
) -> IhanParams:
    mode = Mode(mode)
    types = tuple(types)
    hidden_dim = hidden_dim or embedding_dim
    encoders = {k: SingleTypeParams.init(vocabs[k], embedding_dim, hidden_dim, rng) for k in stream_keys(mode, types)}
    kwargs = {}
    if mode == Mode.ALGORITHM_COMB:
        kwargs = {"W_t": _uniform(rng, (1, embedding_dim), embedding_dim), "b_t": Tensor.zeros(1, 1)}
    return IhanParams(
        mode=mode,
        types=types,
        encoders=encoders,
        W=_uniform(rng, (1, embedding_dim), embedding_dim),
        b=Tensor.zeros(1, 1),
        **kwargs,
    )


# --------------------------------------------------------------------------
# inputs


@dataclass(frozen=True)
class StreamInput:
    """One patient's encounters for one stream (only encounters with >= 1 code)."""

    dates: tuple[dt.date, ...]
    codes: tuple[tuple[Code, ...], ...]
    indices: tuple[np.ndarray, ...]


def _active(params: IhanParams, active_types: Iterable[CodeType] | None) -> tuple[CodeType, ...]:
    if active_types is None:
        return params.types
    active = tuple(CodeType.parse(t) for t in active_types)
    unknown = [t for t in active if t not in params.types]
    if unknown:
        raise ValueError(f"active types {list(map(str, unknown))} not in model types {list(map(str, params.types))}")
    return tuple(t for t in params.types if t in active)


def stream_inputs(
    params: IhanParams, patient: PatientRecord, active_types: Iterable[CodeType] | None = None
) -> dict[str, StreamInput]:
    """Split a patient into per-stream encounter lists and vocabulary indices.

    Streams with no codes for this patient are omitted.
    """
    active = _active(params, active_types)
    out = {}
    if params.mode == Mode.DATA_COMB:
        groups = [(SHARED_STREAM, set(active), True)]
    else:
        groups = [(t.value, {t}, False) for t in active]
    for key, wanted, namespaced in groups:
        vocab = params.encoders[key].vocab
        dates, codes, indices = [], [], []
        for enc in patient.encounters:
            cs = tuple(c for c in enc.codes if c.type in wanted)
            if not cs:
                continue
            dates.append(enc.date)
            codes.append(cs)
            names = [c.namespaced() if namespaced else c.code for c in cs]
            indices.append(np.array([vocab.lookup(n) for n in names], dtype=np.intp))
        if dates:
            out[key] = StreamInput(tuple(dates), tuple(codes), tuple(indices))
    if not out:
        raise DegenerateInputError(
            f"patient {patient.patient_id} has no codes of active types {[t.value for t in active]}"
        )
    return out


def has_active_codes(patient: PatientRecord, types: Iterable[CodeType]) -> bool:
    wanted = set(types)
    return any(c.type in wanted for e in patient.encounters for c in e.codes)


@dataclass
class StreamBatch:
    key: str
    rows: np.ndarray  # batch row of each patient present in this stream (P)
    code_index: np.ndarray  # vocab index of each code occurrence (N)
    code_segment: np.ndarray  # encounter (0..J-1) of each code occurrence
    encounter_segment: np.ndarray  # local patient (0..P-1) of each encounter
    lengths: np.ndarray  # encounters per patient (P)
    codes_per_encounter: np.ndarray  # (J)

    @property
    def n_encounters(self) -> int:
        return int(self.encounter_segment.size)

    @property
    def n_patients(self) -> int:
        return int(self.rows.size)


def collate(params: IhanParams, inputs: Sequence[Mapping[str, StreamInput]]) -> dict[str, StreamBatch]:
    out = {}
    for key in params.encoders:
        rows, lengths, per_enc, idx = [], [], [], []
        for row, patient in enumerate(inputs):
            s = patient.get(key)
            if s is None:
                continue
            rows.append(row)
            lengths.append(len(s.indices))
            for arr in s.indices:
                per_enc.append(arr.size)
                idx.append(arr)
        if not rows:
            continue
        lengths_a = np.array(lengths, dtype=np.intp)
        per_enc_a = np.array(per_enc, dtype=np.intp)
        out[key] = StreamBatch(
            key=key,
            rows=np.array(rows, dtype=np.intp),
            code_index=np.concatenate(idx),
            code_segment=np.repeat(np.arange(per_enc_a.size), per_enc_a),
            encounter_segment=np.repeat(np.arange(lengths_a.size), lengths_a),
            lengths=lengths_a,
            codes_per_encounter=per_enc_a,
        )
    return out


# --------------------------------------------------------------------------
# forward


@dataclass
class StreamOutput:
    batch: StreamBatch
    code_weights: Tensor  # 1 x N
    visit_weights: Tensor  # 1 x J
    encounter_vectors: Tensor  # d x J
    member_vectors: Tensor  # d x P
    type_weights: np.ndarray  # (P)


@dataclass
class BatchOutput:
    logits: Tensor  # 1 x B
    y_hat: Tensor  # 1 x B
    member_vectors: Tensor  # d x B
    streams: dict[str, StreamOutput] = field(default_factory=dict)


def encode_stream(enc: SingleTypeParams, sb: StreamBatch) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Code attention, GRU and visit attention for one stream of a batch.

    Returns (member vectors d x P, code weights, visit weights, encounter vectors).
    """
    J, P = sb.n_encounters, sb.n_patients
    E = ops.take_columns(enc.emb, sb.code_index)
    code_scores = ops.add(ops.matmul(enc.W_c, E), enc.b_c)
    a_c = ops.segment_softmax(code_scores, sb.code_segment, J)
    V = ops.segment_sum(ops.mul(E, a_c), sb.code_segment, J)
    H = gru_sequence(V, enc.gru, sb.lengths)
    visit_scores = ops.add(ops.matmul(enc.W_v, H), enc.b_v)
    a_v = ops.segment_softmax(visit_scores, sb.encounter_segment, P)
    m = ops.segment_sum(ops.mul(V, a_v), sb.encounter_segment, P)
    return m, a_c, a_v, V


def forward_batch(params: IhanParams, inputs: Sequence[Mapping[str, StreamInput]]) -> BatchOutput:
    """Predictions for a batch of pre-encoded patients (see :func:`stream_inputs`)."""
    B = len(inputs)
    if B == 0:
        raise DegenerateInputError("empty batch")
    if any(not p for p in inputs):
        raise DegenerateInputError("every patient needs at least one non-empty stream")
    batches = collate(params, inputs)
    streams: dict[str, StreamOutput] = {}
    members = []
    for key, sb in batches.items():
        m, a_c, a_v, V = encode_stream(params.encoders[key], sb)
        streams[key] = StreamOutput(sb, a_c, a_v, V, m, np.ones(sb.n_patients))
        members.append((key, m, sb.rows))

    if params.mode == Mode.ALGORITHM_COMB:
        M = ops.concat_cols([m for _, m, _ in members])
        seg = np.concatenate([rows for _, _, rows in members])
        order = np.argsort(seg, kind="stable")
        M_sorted = ops.take_columns(M, order)
        seg_sorted = seg[order]
        type_scores = ops.add(ops.matmul(params.W_t, M_sorted), params.b_t)
        a_t = ops.segment_softmax(type_scores, seg_sorted, B)
        m = ops.segment_sum(ops.mul(M_sorted, a_t), seg_sorted, B)
        # hand each stream its own slice of the type weights for tracing
        a_t_unsorted = np.empty(seg.size)
        a_t_unsorted[order] = a_t.data[0]
        bounds = np.cumsum([0] + [rows.size for _, _, rows in members])
        for i, (key, _, _) in enumerate(members):
            streams[key].type_weights = a_t_unsorted[bounds[i] : bounds[i + 1]]
    else:
        (key, m, rows), = members
        if rows.size != B:
            raise DegenerateInputError("every patient needs codes in the model's stream")

    logits = ops.add(ops.matmul(params.W, m), params.b)
    return BatchOutput(logits=logits, y_hat=ops.sigmoid(logits), member_vectors=m, streams=streams)


def batch_loss(params: IhanParams, inputs: Sequence[Mapping[str, StreamInput]], labels: Sequence[int]) -> Tensor:
    """Mean BCE over the batch."""
    out = forward_batch(params, inputs)
    return ops.bce_loss(out.y_hat, np.asarray(labels, dtype=np.float64).reshape(1, -1))


@dataclass
class StreamTrace:
    key: str
    dates: tuple[dt.date, ...]
    codes: tuple[tuple[Code, ...], ...]
    code_indices: tuple[np.ndarray, ...]
    code_weights: list[np.ndarray]  # a_c per encounter
    visit_weights: np.ndarray  # a_v over encounters
    encounter_vectors: np.ndarray  # d x J
    member_vector: np.ndarray  # d
    type_weight: float  # a_t, 1.0 without type attention


@dataclass
class AttentionTrace:
    patient_id: str
    streams: dict[str, StreamTrace]
    member_vector: np.ndarray
    logit: float
    y_hat: float


def traces_from_batch(
    patients: Sequence[PatientRecord], inputs: Sequence[Mapping[str, StreamInput]], out: BatchOutput
) -> list[AttentionTrace]:
    per_patient: list[dict[str, StreamTrace]] = [{} for _ in patients]
    for key, so in out.streams.items():
        sb = so.batch
        a_c = so.code_weights.data[0]
        a_v = so.visit_weights.data[0]
        V = so.encounter_vectors.data
        M = so.member_vectors.data
        enc_start = np.concatenate([[0], np.cumsum(sb.lengths)])
        code_start = np.concatenate([[0], np.cumsum(sb.codes_per_encounter)])
        for p, row in enumerate(sb.rows):
            s = inputs[row][key]
            j0, j1 = enc_start[p], enc_start[p + 1]
            per_patient[row][key] = StreamTrace(
                key=key,
                dates=s.dates,
                codes=s.codes,
                code_indices=s.indices,
                code_weights=[a_c[code_start[j] : code_start[j + 1]].copy() for j in range(j0, j1)],
                visit_weights=a_v[j0:j1].copy(),
                encounter_vectors=V[:, j0:j1].copy(),
                member_vector=M[:, p].copy(),
                type_weight=float(so.type_weights[p]),
            )
    logits = out.logits.data[0]
    y_hat = out.y_hat.data[0]
    return [
        AttentionTrace(
            patient_id=patients[i].patient_id,
            streams=per_patient[i],
            member_vector=out.member_vectors.data[:, i].copy(),
            logit=float(logits[i]),
            y_hat=float(y_hat[i]),
        )
        for i in range(len(patients))
    ]


def forward(
    params: IhanParams, patient: PatientRecord, active_types: Iterable[CodeType] | None = None
) -> tuple[float, AttentionTrace]:
    """Risk prediction for one patient together with every attention weight used."""
    inputs = [stream_inputs(params, patient, active_types)]
    out = forward_batch(params, inputs)
    trace = traces_from_batch([patient], inputs, out)[0]
    return trace.y_hat, trace


def forward_many(
    params: IhanParams,
    patients: Sequence[PatientRecord],
    active_types: Iterable[CodeType] | None = None,
    batch_size: int = 256,
) -> list[AttentionTrace]:
    """Traces for many patients, evaluated in batches (no tape)."""
    traces: list[AttentionTrace] = []
    for start in range(0, len(patients), batch_size):
        chunk = patients[start : start + batch_size]
        inputs = [stream_inputs(params, p, active_types) for p in chunk]
        traces.extend(traces_from_batch(chunk, inputs, forward_batch(params, inputs)))
    return traces


def predict(
    params: IhanParams,
    patients: Sequence[PatientRecord],
    active_types: Iterable[CodeType] | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    scores = []
    for start in range(0, len(patients), batch_size):
        chunk = patients[start : start + batch_size]
        inputs = [stream_inputs(params, p, active_types) for p in chunk]
        scores.append(forward_batch(params, inputs).y_hat.data[0])
    return np.concatenate(scores) if scores else np.zeros(0)


# --------------------------------------------------------------------------
# unbatched single-stream path: plain primitives and step-by-step gru_cell.
# Slower than forward_batch; kept as the literal per-step form of the model.


def encode_encounter(enc: SingleTypeParams, codes: Sequence[str]) -> tuple[Tensor, Tensor]:
    """Encounter vector v (d x 1) and code weights (1 x K) for one encounter's codes."""
    if not codes:
        raise DegenerateInputError("encounter has no codes")
    idx = [enc.vocab.lookup(c) for c in codes]
    E = ops.take_columns(enc.emb, idx)
    alpha = ops.softmax(ops.add(ops.matmul(enc.W_c, E), enc.b_c))
    return ops.matmul(E, ops.transpose(alpha)), alpha


def encode_patient_single_type(
    enc: SingleTypeParams, encounters: Sequence[Sequence[str]]
) -> tuple[Tensor, dict[str, list[Tensor] | Tensor]]:
    """Member vector m (d x 1) over date-ordered encounters; empty encounters are skipped."""
    encounters = [e for e in encounters if e]
    if not encounters:
        raise DegenerateInputError("no non-empty encounters")
    vs, alphas = zip(*(encode_encounter(enc, codes) for codes in encounters))
    h = Tensor.zeros(enc.hidden_dim, 1)
    hs = []
    for v in vs:
        h = gru_cell(v, h, enc.gru)
        hs.append(h)
    H = ops.concat_cols(hs)
    V = ops.concat_cols(list(vs))
    a_v = ops.softmax(ops.add(ops.matmul(enc.W_v, H), enc.b_v))
    m = ops.matmul(V, ops.transpose(a_v))
    return m, {"code_weights": list(alphas), "visit_weights": a_v, "hidden": H, "encounter_vectors": V}
