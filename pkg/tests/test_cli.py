import csv
import json
from collections import defaultdict

import numpy as np
import pytest

from ihan import __version__
from ihan.checkpoint import load_checkpoint
from ihan.cli import main
from ihan.data import load_cohort, save_cohort, split_cohort
from ihan.model import Mode, predict
from ihan.records import Code, CodeType, Encounter

TINY = {
    "n_patients": 160, "vocab_size": 20, "n_risk_codes": 3, "risk_rank_range": [0, 8], "risk_weight": 6.0,
    "half_life_days": 365, "mean_encounters": 5, "min_encounters": 2, "max_encounters": 8, "seed": 5,
}
FAST = ["--emb-dim", "6", "--hidden-dim", "5", "--max-epochs", "3", "--patience", "1", "--lr", "0.01", "--seed", "2"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps(TINY))
    assert main(["generate", "--spec", str(d / "spec.json"), "--out", str(d / "c.jsonl"),
                 "--truth-out", str(d / "truth.json")]) == 0
    assert main(["train", "--data", str(d / "c.jsonl"), "--out", str(d / "m.ckpt"), *FAST]) == 0
    return d


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert __version__ in out and "checkpoint format 1" in out


# --------------------------------------------------------------------------
# generate


def test_generate_files_and_count(workdir):
    assert len(load_cohort(workdir / "c.jsonl", min_encounters=None)) == TINY["n_patients"]
    truth = json.loads((workdir / "truth.json").read_text())
    assert sorted(truth["risk_codes"]) == ["diag", "lab", "proc", "rx"]


def test_generate_same_seed_is_byte_identical(tmp_path, workdir, monkeypatch):
    spec = str(workdir / "spec.json")
    for name in ("a", "b"):
        assert main(["generate", "--spec", spec, "--out", str(tmp_path / f"{name}.jsonl"), "--seed", "9"]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    monkeypatch.setenv("IHAN_SEED", "9")
    assert main(["generate", "--spec", spec, "--out", str(tmp_path / "env.jsonl")]) == 0
    assert (tmp_path / "env.jsonl").read_bytes() == (tmp_path / "a.jsonl").read_bytes()
    assert (tmp_path / "a.jsonl").read_bytes() != (workdir / "c.jsonl").read_bytes()


def test_generate_reports_base_rate(tmp_path, capsys):
    spec = {**TINY, "n_patients": 2000, "base_rate": 0.25}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert main(["generate", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "c.jsonl")]) == 0
    rate = float(capsys.readouterr().out.split("positive rate")[1])
    assert abs(rate - 0.25) <= 0.03


def test_generate_unwritable_path_fails(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "no" / "such" / "dir.jsonl")]) == 1
    assert "error" in capsys.readouterr().err


# --------------------------------------------------------------------------
# train


def test_train_prints_auc_and_records_config(workdir, capsys):
    out = workdir / "again.ckpt"
    assert main(["train", "--data", str(workdir / "c.jsonl"), "--out", str(out), *FAST]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("test AUC ") and len(line.split()[-1].split(".")[1]) == 4
    ckpt = load_checkpoint(out)
    assert ckpt.config["seed"] == 2 and ckpt.config["embedding_dim"] == 6
    assert float(line.split()[-1]) == pytest.approx(ckpt.metrics["test_auc"], abs=5e-5)


def test_single_type_flag_forces_single_type_model(workdir):
    out = workdir / "diag.ckpt"
    args = ["train", "--data", str(workdir / "c.jsonl"), "--out", str(out), "--types", "diag", "--mode", "data_comb"]
    assert main(args + FAST) == 0
    params = load_checkpoint(out).params
    assert params.mode == Mode.SINGLE_TYPE and params.types == (CodeType.DIAG,)


def test_vocabulary_excludes_codes_outside_training_split(tmp_path, workdir):
    """Each patient gets a private code; only training patients' codes may enter the vocabulary."""
    records = load_cohort(workdir / "c.jsonl")
    probed = []
    for r in records:
        first = r.encounters[0]
        tagged = Encounter(first.date, first.codes + (Code(CodeType.DIAG, f"ONLY_{r.patient_id}"),))
        probed.append(type(r)(r.patient_id, r.label, (tagged,) + r.encounters[1:]))
    save_cohort(probed, tmp_path / "probe.jsonl")
    args = ["train", "--data", str(tmp_path / "probe.jsonl"), "--out", str(tmp_path / "m.ckpt"),
            "--types", "diag", "--balance-ratio", "0", *FAST]
    assert main(args) == 0
    train_set, valid_set, test_set = split_cohort(probed, (0.6, 0.2, 0.2), seed=2)
    vocab = load_checkpoint(tmp_path / "m.ckpt").params.encoders["diag"].vocab
    private = {c for c in vocab.codes if c.startswith("ONLY_")}
    assert private == {f"ONLY_{r.patient_id}" for r in train_set}
    for r in test_set:
        assert vocab.lookup(f"ONLY_{r.patient_id}") == vocab.unk_index


def test_degenerate_labels_exit_nonzero(tmp_path, workdir, capsys):
    records = [type(r)(r.patient_id, 0, r.encounters) for r in load_cohort(workdir / "c.jsonl")]
    save_cohort(records, tmp_path / "zeros.jsonl")
    args = ["train", "--data", str(tmp_path / "zeros.jsonl"), "--out", str(tmp_path / "m.ckpt"),
            "--balance-ratio", "0", *FAST]
    assert main(args) == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "m.ckpt").exists()


# --------------------------------------------------------------------------
# explain


def first_patient(workdir):
    return load_cohort(workdir / "c.jsonl")[0].patient_id


def explain(workdir, out, *extra):
    return main(["explain", "--ckpt", str(workdir / "m.ckpt"), "--data", str(workdir / "c.jsonl"),
                 "--out", str(out), *extra])


def test_explain_encounter_sorted(workdir, tmp_path):
    pid = first_patient(workdir)
    assert explain(workdir, tmp_path / "e.csv", "--patient", pid, "--level", "encounter", "--all") == 0
    table = rows(tmp_path / "e.csv")
    keys = [(r["date"], -abs(float(r["contribution"]))) for r in table]
    assert keys == sorted(keys)
    assert explain(workdir, tmp_path / "f.csv", "--patient", pid, "--level", "encounter") == 0
    shown = rows(tmp_path / "f.csv")
    assert all(abs(float(r["contribution"])) > 0.01 for r in shown)
    assert len(shown) == sum(abs(float(r["contribution"])) > 0.01 for r in table)


def test_explain_patient_level_partitions_encounter_level(workdir, tmp_path):
    pid = first_patient(workdir)
    assert explain(workdir, tmp_path / "e.csv", "--patient", pid, "--level", "encounter", "--all") == 0
    assert explain(workdir, tmp_path / "p.json", "--patient", pid, "--level", "patient", "--all") == 0
    sums = defaultdict(float)
    for r in rows(tmp_path / "e.csv"):
        sums[(r["code_type"], r["code"])] += float(r["contribution"])
    patient = json.loads((tmp_path / "p.json").read_text())
    assert len(patient) == len(sums)
    for r in patient:
        assert r["contribution"] == pytest.approx(sums[(r["code_type"], r["code"])], abs=1e-12)


def test_explain_cohort_level(workdir, tmp_path):
    assert explain(workdir, tmp_path / "c.csv", "--level", "cohort", "--min-patients", "5", "--all") == 0
    table = rows(tmp_path / "c.csv")
    assert list(table[0]) == ["code_type", "code", "n_patients", "mean_contribution"]
    means = [float(r["mean_contribution"]) for r in table]
    assert means == sorted(means, reverse=True)
    assert all(int(r["n_patients"]) >= 5 for r in table)


def test_explain_unknown_patient(workdir, tmp_path, capsys):
    assert explain(workdir, tmp_path / "x.csv", "--patient", "nobody", "--level", "encounter") == 1
    assert "nobody" in capsys.readouterr().err


# --------------------------------------------------------------------------
# predict


def test_predict_matches_in_process_forward(workdir, tmp_path):
    for name in ("a.csv", "b.csv"):
        assert main(["predict", "--ckpt", str(workdir / "m.ckpt"), "--data", str(workdir / "c.jsonl"),
                     "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    table = rows(tmp_path / "a.csv")
    scores = np.array([float(r["score"]) for r in table])
    assert np.all((scores > 0) & (scores < 1))
    params = load_checkpoint(workdir / "m.ckpt").params
    by_id = {r.patient_id: r for r in load_cohort(workdir / "c.jsonl", min_encounters=None)}
    expected = predict(params, [by_id[r["patient_id"]] for r in table])
    np.testing.assert_array_equal(scores, expected)


def test_predict_missing_checkpoint(tmp_path, workdir):
    assert main(["predict", "--ckpt", str(tmp_path / "nope"), "--data", str(workdir / "c.jsonl"),
                 "--out", str(tmp_path / "s.csv")]) == 1


# --------------------------------------------------------------------------
# experiment


def test_experiment_two_cells_two_runs(workdir, tmp_path):
    grid = {
        "cells": [
            {"mode": "single_type", "types": "diag", "embedding_dim": 4, "hidden_dim": 3, "max_epochs": 2,
             "patience": 1},
            {"model": "logistic_regression"},
        ]
    }
    (tmp_path / "grid.json").write_text(json.dumps(grid))
    args = ["experiment", "--data", str(workdir / "c.jsonl"), "--grid", str(tmp_path / "grid.json"),
            "--runs", "2", "--out", str(tmp_path / "out"), "--jobs", "1", "--seed", "3"]
    assert main(args) == 0
    summary = rows(tmp_path / "out" / "summary.csv")
    assert len(summary) == 2 and all(r["n_runs"] == "2" for r in summary)
    assert len(rows(tmp_path / "out" / "runs.csv")) == 4
    (pair,) = rows(tmp_path / "out" / "pairwise.csv")
    assert 0.0 <= float(pair["p_value"]) <= 1.0


def test_experiment_bad_grid(workdir, tmp_path):
    (tmp_path / "grid.json").write_text("{broken")
    args = ["experiment", "--data", str(workdir / "c.jsonl"), "--grid", str(tmp_path / "grid.json"),
            "--out", str(tmp_path / "out")]
    assert main(args) == 1
