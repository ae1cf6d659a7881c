import dataclasses
import datetime as dt
import itertools

import numpy as np
import pytest

from helpers import random_params, random_patient, vocab_patients
from ihan.core.tensor import Tensor
from ihan.errors import DegenerateInputError
from ihan.model import (
    SHARED_STREAM,
    IhanParams,
    Mode,
    build_vocabularies,
    encode_patient_single_type,
    forward,
    forward_batch,
    forward_many,
    init_params,
    predict,
    stream_inputs,
    stream_keys,
)
from ihan.records import ALL_TYPES, Code, CodeType, Encounter, PatientRecord
from ihan.vocab import UNK, Vocabulary, build_vocabulary, embed, init_embedding

DIAG, LAB, RX, PROC = CodeType.DIAG, CodeType.LAB, CodeType.RX, CodeType.PROC
MODES = [(Mode.SINGLE_TYPE, (DIAG,)), (Mode.ALGORITHM_COMB, ALL_TYPES), (Mode.DATA_COMB, ALL_TYPES)]


# --------------------------------------------------------------------------
# vocabulary


def test_vocabulary_indices_and_unk():
    v = build_vocabulary([(DIAG, "a"), (DIAG, "b"), (LAB, "x"), (DIAG, "a")], DIAG)
    assert v.codes == ("a", "b")
    assert v.size == 3 and v.unk_index == 2
    assert v.lookup("b") == 1
    assert v.lookup("never-seen") == v.unk_index
    assert v.code_at(2) == UNK


def test_vocabulary_min_count_and_roundtrip():
    v = build_vocabulary([(DIAG, "a"), (DIAG, "b"), (DIAG, "a")], DIAG, min_count=2)
    assert v.codes == ("a",)
    assert Vocabulary.from_dict(v.to_dict()) == v


def test_empty_corpus_gives_unk_only(caplog):
    v = build_vocabulary([], RX)
    assert v.size == 1
    assert "empty corpus" in caplog.text


def test_embedding_shape_and_lookup():
    v = build_vocabulary([(DIAG, c) for c in "abc"], DIAG)
    emb = init_embedding(v, 4, np.random.default_rng(0))
    assert emb.shape == (4, 4)
    np.testing.assert_array_equal(embed(v, emb, "b").data[:, 0], emb.data[:, 1])
    np.testing.assert_array_equal(embed(v, emb, "zzz").data[:, 0], emb.data[:, 3])


# --------------------------------------------------------------------------
# structure


def test_stream_keys():
    assert stream_keys(Mode.SINGLE_TYPE, (LAB,)) == ["lab"]
    assert stream_keys(Mode.DATA_COMB, ALL_TYPES) == [SHARED_STREAM]
    assert stream_keys(Mode.ALGORITHM_COMB, (DIAG, RX)) == ["diag", "rx"]
    with pytest.raises(ValueError):
        stream_keys(Mode.SINGLE_TYPE, (DIAG, LAB))


def test_data_comb_vocabulary_is_namespaced():
    vocabs = build_vocabularies(Mode.DATA_COMB, ALL_TYPES, vocab_patients())
    assert list(vocabs) == [SHARED_STREAM]
    assert "lab:L03" in vocabs[SHARED_STREAM]


def test_parameter_inventory():
    params = random_params(Mode.ALGORITHM_COMB, (DIAG, LAB), np.random.default_rng(0), dim=4, hidden=3)
    names = set(params.named_tensors())
    assert {"diag.emb", "lab.emb", "diag.gru.U_z", "type_attn.W_t", "head.W", "head.b"} <= names
    assert params.named_tensors()["diag.W_v"].shape == (1, 3)
    single = random_params(Mode.SINGLE_TYPE, (DIAG,), np.random.default_rng(0))
    assert not any(k.startswith("type_attn") for k in single.named_tensors())


def test_patient_without_active_codes_is_rejected():
    params = random_params(Mode.SINGLE_TYPE, (LAB,), np.random.default_rng(0))
    p = PatientRecord("x", 0, (Encounter(dt.date(2020, 1, 1), (Code(DIAG, "D00"),)),))
    with pytest.raises(DegenerateInputError):
        forward(params, p)


# --------------------------------------------------------------------------
# toy forward by hand


def test_single_code_single_encounter_by_hand():
    """With one code everywhere every softmax is 1, so y = sigmoid(W e + b)."""
    vocab = Vocabulary(DIAG, ("A",))
    params = init_params(Mode.SINGLE_TYPE, (DIAG,), {"diag": vocab}, np.random.default_rng(3), embedding_dim=3)
    params = params.with_tensors({"head.b": Tensor.scalar(0.25)})
    p = PatientRecord("x", 1, (Encounter(dt.date(2020, 1, 1), (Code(DIAG, "A"),)),))
    y, trace = forward(params, p)
    e = params.encoders["diag"].emb.data[:, 0]
    expected = 1.0 / (1.0 + np.exp(-(params.W.data[0] @ e + 0.25)))
    assert y == pytest.approx(expected, abs=1e-15)
    assert trace.streams["diag"].visit_weights.tolist() == [1.0]


def test_two_code_encounter_by_hand():
    vocab = Vocabulary(DIAG, ("A", "B"))
    params = init_params(Mode.SINGLE_TYPE, (DIAG,), {"diag": vocab}, np.random.default_rng(4), embedding_dim=2)
    enc = params.encoders["diag"]
    p = PatientRecord("x", 1, (Encounter(dt.date(2020, 1, 1), (Code(DIAG, "A"), Code(DIAG, "B"))),))
    y, _ = forward(params, p)
    eA, eB = enc.emb.data[:, 0], enc.emb.data[:, 1]
    sA, sB = enc.W_c.data[0] @ eA + enc.b_c.item(), enc.W_c.data[0] @ eB + enc.b_c.item()
    aA = np.exp(sA) / (np.exp(sA) + np.exp(sB))
    v = aA * eA + (1 - aA) * eB
    assert y == pytest.approx(1 / (1 + np.exp(-(params.W.data[0] @ v + params.b.item()))), abs=1e-15)


# --------------------------------------------------------------------------
# properties


@pytest.mark.parametrize("mode,types", MODES)
def test_batched_matches_literal_single_stream_path(mode, types):
    rng = np.random.default_rng(11)
    params = random_params(mode, types, rng, dim=4, hidden=3)
    for i in range(20):
        patient = random_patient(rng, types, pid=f"p{i}")
        _, trace = forward(params, patient)
        if mode == Mode.ALGORITHM_COMB:
            continue
        key = next(iter(params.encoders))
        names = [[c.namespaced() if mode == Mode.DATA_COMB else c.code for c in cs] for cs in trace.streams[key].codes]
        m, parts = encode_patient_single_type(params.encoders[key], names)
        np.testing.assert_allclose(trace.member_vector, m.data[:, 0], rtol=0, atol=1e-13)
        np.testing.assert_allclose(trace.streams[key].visit_weights, parts["visit_weights"].data[0], atol=1e-13)


@pytest.mark.parametrize("mode,types", MODES)
def test_batch_equals_one_at_a_time(mode, types):
    rng = np.random.default_rng(5)
    params = random_params(mode, types, rng)
    patients = [random_patient(rng, types, pid=f"p{i}") for i in range(30)]
    together = predict(params, patients, batch_size=7)
    alone = np.array([forward(params, p)[0] for p in patients])
    np.testing.assert_allclose(together, alone, rtol=0, atol=1e-14)


def test_algorithm_comb_masks_absent_types():
    rng = np.random.default_rng(6)
    params = random_params(Mode.ALGORITHM_COMB, ALL_TYPES, rng)
    p = random_patient(rng, (DIAG, RX))
    _, trace = forward(params, p)
    assert set(trace.streams) <= {"diag", "rx"}
    assert sum(s.type_weight for s in trace.streams.values()) == pytest.approx(1.0, abs=1e-12)


def test_active_types_restrict_streams():
    rng = np.random.default_rng(8)
    params = random_params(Mode.ALGORITHM_COMB, ALL_TYPES, rng)
    p = random_patient(rng, ALL_TYPES, max_encounters=6, max_codes=8)
    y, trace = forward(params, p, active_types=[DIAG])
    assert set(trace.streams) == {"diag"}


def test_unseen_code_maps_to_unk():
    rng = np.random.default_rng(9)
    params = random_params(Mode.SINGLE_TYPE, (DIAG,), rng)
    p = PatientRecord("x", 0, (Encounter(dt.date(2020, 1, 1), (Code(DIAG, "NEW"),)),))
    s = stream_inputs(params, p)["diag"]
    assert s.indices[0].tolist() == [params.encoders["diag"].vocab.unk_index]


def test_encounter_order_matters():
    rng = np.random.default_rng(10)
    params = random_params(Mode.SINGLE_TYPE, (DIAG,), rng, scale=3.0)
    base = random_patient(rng, (DIAG,), max_encounters=6)
    while len(base.encounters) < 3:
        base = random_patient(rng, (DIAG,), max_encounters=6)
    dates = [e.date for e in base.encounters]
    codes = [e.codes for e in base.encounters]
    flipped = PatientRecord("x", 0, tuple(Encounter(d, c) for d, c in zip(dates, codes[::-1])))
    assert forward(params, base)[0] != pytest.approx(forward(params, flipped)[0], abs=1e-9)


@pytest.mark.parametrize("mode,types", MODES)
def test_code_order_within_encounter_irrelevant(mode, types):
    rng = np.random.default_rng(12)
    params = random_params(mode, types, rng, scale=2.0)
    patient = random_patient(rng, types, max_encounters=3, max_codes=4)
    y0, _ = forward(params, patient)
    for perm in itertools.islice(itertools.permutations(range(len(patient.encounters[0].codes))), 24):
        e0 = patient.encounters[0]
        shuffled = dataclasses.replace(e0, codes=tuple(e0.codes[i] for i in perm))
        other = dataclasses.replace(patient, encounters=(shuffled,) + patient.encounters[1:])
        assert forward(params, other)[0] == pytest.approx(y0, abs=1e-12)


@pytest.mark.parametrize("mode,types", MODES)
def test_trace_logit_matches_prediction(mode, types):
    rng = np.random.default_rng(13)
    params = random_params(mode, types, rng)
    for trace in forward_many(params, [random_patient(rng, types, pid=f"p{i}") for i in range(10)]):
        assert trace.y_hat == pytest.approx(1 / (1 + np.exp(-trace.logit)), abs=1e-15)
        for s in trace.streams.values():
            assert s.visit_weights.sum() == pytest.approx(1.0, abs=1e-12)
            for a in s.code_weights:
                assert a.sum() == pytest.approx(1.0, abs=1e-12)


def test_type_attention_reduces_to_single_type():
    rng = np.random.default_rng(14)
    multi = random_params(Mode.ALGORITHM_COMB, (LAB,), rng)
    single = IhanParams(Mode.SINGLE_TYPE, (LAB,), multi.encoders, multi.W, multi.b)
    for i in range(10):
        p = random_patient(rng, (LAB,), pid=f"p{i}")
        assert forward(multi, p)[0] == pytest.approx(forward(single, p)[0], abs=1e-15)


def test_params_validation():
    params = random_params(Mode.ALGORITHM_COMB, (DIAG, LAB), np.random.default_rng(0))
    with pytest.raises(ValueError):
        dataclasses.replace(params, W_t=None)
    with pytest.raises(ValueError):
        dataclasses.replace(params, W=Tensor(np.zeros((1, 7))))


def test_forward_batch_rejects_empty():
    params = random_params(Mode.SINGLE_TYPE, (DIAG,), np.random.default_rng(0))
    with pytest.raises(DegenerateInputError):
        forward_batch(params, [])
