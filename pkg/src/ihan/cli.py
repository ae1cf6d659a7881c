"""``ihan`` command line: generate, train, explain, predict, experiment."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from ihan import __version__
from ihan.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from ihan.data.cohort import balance_cohort, load_cohort, save_cohort, split_cohort
from ihan.data.synthetic import SyntheticSpec, generate_synthetic
from ihan.errors import ConfigError, IhanError
from ihan.experiment import (
    parse_grid,
    pairwise_tests,
    run_experiment,
    write_pairwise_csv,
    write_runs_csv,
    write_summary_csv,
)
from ihan.interpret import (
    COHORT_COLUMNS,
    DEFAULT_MIN_PATIENTS,
    DISPLAY_THRESHOLD,
    PATIENT_COLUMNS,
    aggregate_code_level,
    aggregate_patient_code,
    contributions,
    display_filter,
    encounter_columns,
    write_csv,
    write_json,
)
from ihan.metrics import auc
from ihan.model import Mode, forward_many, has_active_codes, predict
from ihan.records import parse_types
from ihan.seeding import resolve_seed
from ihan.train import TrainConfig, train, usable

logger = logging.getLogger("ihan")


def _fractions(text: str) -> tuple[float, ...]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split {text!r}; expected e.g. 0.6,0.2,0.2") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("split needs three fractions (train,valid,test)")
    return parts


def _load(path: str, eligibility: bool = True):
    return load_cohort(path, min_encounters=2 if eligibility else None)


def _prepare(records, ratio: int, seed: int):
    if ratio > 0:
        records = balance_cohort(records, ratio=ratio, seed=seed)
    return records


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    spec = SyntheticSpec()
    if args.spec:
        spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text()))
    if args.seed is not None or os.environ.get("IHAN_SEED"):
        spec = SyntheticSpec.from_dict({**spec.to_dict(), "seed": resolve_seed(args.seed)})
    cohort = generate_synthetic(spec)
    save_cohort(cohort.records, args.out)
    if args.truth_out:
        Path(args.truth_out).write_text(json.dumps(cohort.truth_json(), indent=1, sort_keys=True) + "\n")
    rate = sum(r.label for r in cohort.records) / len(cohort.records)
    print(f"patients {len(cohort.records)}  positive rate {rate:.4f}")
    return 0


def cmd_train(args) -> int:
    seed = resolve_seed(args.seed)
    types = parse_types(args.types)
    mode = Mode.SINGLE_TYPE if len(types) == 1 else Mode(args.mode)
    if mode == Mode.SINGLE_TYPE and len(types) != 1:
        raise ConfigError("--mode single_type needs exactly one type in --types")
    config = TrainConfig(
        mode=mode,
        types=types,
        embedding_dim=args.emb_dim,
        hidden_dim=args.hidden_dim,
        learning_rate=args.lr,
        batch_size=args.batch,
        max_epochs=args.max_epochs,
        patience=args.patience,
        seed=seed,
        clip_norm=args.clip_norm,
    )
    records = _prepare(_load(args.data), args.balance_ratio, seed)
    train_set, valid_set, test_set = split_cohort(records, args.split, seed=seed)
    params, history = train(config, train_set, valid_set)
    test_set = usable(test_set, types)
    test_auc = auc(predict(params, test_set), [r.label for r in test_set])
    metrics = {
        "test_auc": test_auc,
        "best_epoch": history.best_epoch,
        "stopped_epoch": history.stopped_epoch,
        "best_valid_loss": history.best_valid_loss,
        "n_train": len(train_set),
        "n_valid": len(valid_set),
        "n_test": len(test_set),
    }
    snapshot = {**config.to_dict(), "balance_ratio": args.balance_ratio, "split": list(args.split)}
    save_checkpoint(args.out, params, snapshot, metrics)
    print(f"test AUC {test_auc:.4f}")
    return 0


def _lookup_patients(records, patient_ids):
    by_id = {r.patient_id: r for r in records}
    missing = [p for p in patient_ids if p not in by_id]
    if missing:
        raise ConfigError(f"unknown patient id {missing[0]!r}")
    return [by_id[p] for p in patient_ids]


def cmd_explain(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    params = ckpt.params
    records = _load(args.data, eligibility=False)
    write = write_json if args.out.endswith(".json") else write_csv
    if args.level == "cohort":
        patients = [r for r in records if has_active_codes(r, params.types)]
    else:
        if not args.patient:
            raise ConfigError(f"--level {args.level} needs --patient")
        patients = _lookup_patients(records, [args.patient])
    reports = [contributions(params, p, t) for p, t in zip(patients, forward_many(params, patients))]

    if args.level == "encounter":
        rows = reports[0].sorted_entries()
        shown = rows if args.all else display_filter(rows, args.threshold)
        write(args.out, shown, encounter_columns(shown))
        print(f"patient {args.patient}: prediction {reports[0].prediction:.4f}, {len(shown)} of {len(rows)} rows")
    elif args.level == "patient":
        rows = aggregate_patient_code(reports[0])
        shown = rows if args.all else display_filter(rows, args.threshold)
        write(args.out, shown, PATIENT_COLUMNS)
        print(f"patient {args.patient}: prediction {reports[0].prediction:.4f}, {len(shown)} of {len(rows)} codes")
    else:
        rows = aggregate_code_level(reports, args.min_patients)
        shown = rows if args.all else display_filter(rows, args.threshold, field="mean_contribution")
        write(args.out, shown, COHORT_COLUMNS)
        print(f"{len(patients)} patients, {len(shown)} of {len(rows)} codes")
    return 0


def cmd_predict(args) -> int:
    params = load_checkpoint(args.ckpt).params
    records = _load(args.data, eligibility=False)
    kept = usable(records, params.types)
    scores = predict(params, kept)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "score"])
        for r, s in zip(kept, scores):
            w.writerow([r.patient_id, repr(float(s))])
    print(f"scored {len(kept)} patients")
    return 0


def cmd_experiment(args) -> int:
    seed = resolve_seed(args.seed)
    grid = json.loads(Path(args.grid).read_text())
    configs, pairs = parse_grid(grid, {"seed": seed})
    records = _prepare(_load(args.data), args.balance_ratio, seed)
    jobs = args.jobs or os.cpu_count() or 1
    summaries = [run_experiment(c, records, args.runs, args.split, jobs=jobs) for c in configs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(out / "summary.csv", summaries)
    write_runs_csv(out / "runs.csv", summaries)
    write_pairwise_csv(out / "pairwise.csv", pairwise_tests(summaries, pairs))
    for s in summaries:
        print(f"{s.label:45s} {s.mean_auc:.4f} +/- {s.std_auc:.4f}  (n={s.n_runs})")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ihan", description=__doc__)
    parser.add_argument(
        "--version", action="version", version=f"ihan {__version__} (checkpoint format {FORMAT_VERSION})"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic cohort and its planted risk codes")
    p.add_argument("--spec", help="JSON file of generator settings (defaults otherwise)")
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="balance, split, train and save a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.ALGORITHM_COMB.value)
    p.add_argument("--types", default="diag,lab,rx,proc")
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--emb-dim", type=int, default=128)
    p.add_argument("--hidden-dim", type=int, default=128)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--max-epochs", type=int, default=50)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--balance-ratio", type=int, default=3, help="non-cases per case; 0 keeps the cohort as is")
    p.add_argument("--split", type=_fractions, default=(0.6, 0.2, 0.2))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="contribution tables at encounter, patient or cohort level")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patient")
    p.add_argument("--level", choices=["encounter", "patient", "cohort"], default="encounter")
    p.add_argument("--out", required=True, help=".csv or .json")
    p.add_argument("--all", action="store_true", help=f"keep rows with |contribution| <= {DISPLAY_THRESHOLD}")
    p.add_argument("--threshold", type=float, default=DISPLAY_THRESHOLD)
    p.add_argument("--min-patients", type=int, default=DEFAULT_MIN_PATIENTS)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("predict", help="score patients with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="repeated runs over a grid of configurations")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=None, help="parallel runs (default: available cores)")
    p.add_argument("--seed", type=int)
    p.add_argument("--balance-ratio", type=int, default=3)
    p.add_argument("--split", type=_fractions, default=(0.6, 0.2, 0.2))
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (IhanError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
