import numpy as np
import pytest

from helpers import random_params, random_patient
from ihan.checkpoint import MAGIC, checkpoint_body, load_checkpoint, save_checkpoint
from ihan.errors import CheckpointError
from ihan.model import Mode, predict
from ihan.records import ALL_TYPES, CodeType

MODES = [(Mode.SINGLE_TYPE, (CodeType.RX,)), (Mode.ALGORITHM_COMB, ALL_TYPES), (Mode.DATA_COMB, ALL_TYPES)]


@pytest.mark.parametrize("mode,types", MODES)
def test_roundtrip_is_bit_identical(tmp_path, mode, types):
    rng = np.random.default_rng(31)
    params = random_params(mode, types, rng, dim=6, hidden=4)
    patients = [random_patient(rng, types, pid=f"p{i}") for i in range(40)]
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, {"seed": 1}, {"test_auc": 0.5})
    ckpt = load_checkpoint(path)
    assert ckpt.config == {"seed": 1} and ckpt.metrics == {"test_auc": 0.5}
    assert "saved_at" in ckpt.metadata
    assert ckpt.params.mode == mode and ckpt.params.types == types
    for name, t in params.named_tensors().items():
        np.testing.assert_array_equal(ckpt.params.named_tensors()[name].data, t.data)
    assert {k: e.vocab for k, e in ckpt.params.encoders.items()} == {k: e.vocab for k, e in params.encoders.items()}
    np.testing.assert_array_equal(predict(ckpt.params, patients), predict(params, patients))


def test_body_excludes_timestamp(tmp_path):
    params = random_params(Mode.DATA_COMB, ALL_TYPES, np.random.default_rng(0))
    save_checkpoint(tmp_path / "a", params)
    save_checkpoint(tmp_path / "b", params)
    assert checkpoint_body(tmp_path / "a") == checkpoint_body(tmp_path / "b")
    assert (tmp_path / "a").read_bytes().startswith(checkpoint_body(tmp_path / "a"))


def test_corrupt_files_are_rejected(tmp_path):
    params = random_params(Mode.SINGLE_TYPE, (CodeType.DIAG,), np.random.default_rng(0))
    good = tmp_path / "good"
    save_checkpoint(good, params)
    blob = good.read_bytes()
    cases = {
        "magic": b"NOTACKPT" + blob[8:],
        "version": blob[:8] + (99).to_bytes(4, "little") + blob[12:],
        "truncated": blob[:-20],
        "trailing": blob + b"x",
        "empty": b"",
    }
    for name, data in cases.items():
        path = tmp_path / name
        path.write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    assert blob.startswith(MAGIC)
