from ihan.data.cohort import (
    balance_cohort,
    fuse_lab_code,
    is_eligible,
    load_cohort,
    parse_patient,
    record_to_json,
    save_cohort,
    split_cohort,
)
from ihan.data.synthetic import SyntheticCohort, SyntheticSpec, generate_synthetic, risk_score

__all__ = [
    "SyntheticCohort",
    "SyntheticSpec",
    "balance_cohort",
    "fuse_lab_code",
    "generate_synthetic",
    "is_eligible",
    "load_cohort",
    "parse_patient",
    "record_to_json",
    "risk_score",
    "save_cohort",
    "split_cohort",
]
