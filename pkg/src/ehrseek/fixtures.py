"""Deterministic synthetic EHR fixtures for tests and desk-scale runs.

Generates a data directory in the store layout (manifest + one CSV per
table): six event tables shaped after common ICU exports plus two
dictionary tables. Byte-identical output for a fixed seed.
"""

from __future__ import annotations

import csv
import json
import random
from datetime import datetime, timedelta
from pathlib import Path

from .core import DomainError, format_timestamp
from .store import (
    DICTIONARY_TABLE,
    EVENT_TABLE,
    ColumnSpec,
    TableManifest,
    TableSpec,
    manifest_to_dict,
)

_BASE_TIME = datetime(2130, 1, 1, 0, 0, 0)

_ICD_DIAGNOSES = [
    ("A419", "9", "Sepsis, unspecified organism"),
    ("R6521", "10", "Severe sepsis with septic shock"),
    ("I214", "10", "Non-ST elevation myocardial infarction"),
    ("I2510", "10", "Atherosclerotic heart disease of native coronary artery"),
    ("J189", "10", "Pneumonia, unspecified organism"),
    ("J90", "10", "Pleural effusion, not elsewhere classified"),
    ("N179", "10", "Acute kidney failure, unspecified"),
    ("E119", "10", "Type 2 diabetes mellitus without complications"),
    ("I10", "10", "Essential (primary) hypertension"),
    ("J449", "10", "Chronic obstructive pulmonary disease, unspecified"),
    ("I509", "10", "Heart failure, unspecified"),
    ("K219", "10", "Gastro-esophageal reflux disease without esophagitis"),
    ("D649", "10", "Anemia, unspecified"),
    ("F329", "10", "Major depressive disorder, single episode, unspecified"),
    ("G4733", "10", "Obstructive sleep apnea (adult) (pediatric)"),
    ("Z515", "10", "Encounter for palliative care"),
]

_LAB_ITEMS = [
    (50802, "Base Excess", "Blood", "Blood Gas"),
    (50813, "Lactate", "Blood", "Blood Gas"),
    (50862, "Albumin", "Blood", "Chemistry"),
    (50912, "Creatinine", "Blood", "Chemistry"),
    (50931, "Glucose", "Blood", "Chemistry"),
    (50971, "Potassium", "Blood", "Chemistry"),
    (50983, "Sodium", "Blood", "Chemistry"),
    (51006, "Urea Nitrogen", "Blood", "Chemistry"),
    (51221, "Hematocrit", "Blood", "Hematology"),
    (51222, "Hemoglobin", "Blood", "Hematology"),
    (51265, "Platelet Count", "Blood", "Hematology"),
    (51301, "White Blood Cells", "Blood", "Hematology"),
]

_DRUGS = [
    "Piperacillin-Tazobactam", "Vancomycin", "Furosemide", "Insulin",
    "Heparin", "Metoprolol", "Aspirin", "Ceftriaxone", "Norepinephrine",
    "Pantoprazole", "Acetaminophen", "Morphine Sulfate",
]
_ROUTES = ["IV", "PO", "SC", "IM"]
_ORGANISMS = [
    "ESCHERICHIA COLI", "STAPH AUREUS COAG +", "KLEBSIELLA PNEUMONIAE",
    "PSEUDOMONAS AERUGINOSA", "ENTEROCOCCUS FAECALIS", "CANDIDA ALBICANS",
]
_SPECIMENS = ["BLOOD CULTURE", "URINE", "SPUTUM", "SWAB"]
_CAREUNITS = [
    "Emergency Department", "Medical Intensive Care Unit (MICU)",
    "Surgical Intensive Care Unit (SICU)", "Medicine", "Cardiology",
]
_ADMISSION_TYPES = ["EW EMER.", "OBSERVATION ADMIT", "URGENT", "ELECTIVE"]
_ADMISSION_LOCATIONS = ["EMERGENCY ROOM", "PHYSICIAN REFERRAL", "TRANSFER FROM HOSPITAL"]
_LAB_FLAGS = ["", "abnormal"]


def fixture_manifest() -> TableManifest:
    """The manifest describing the synthetic table set."""
    def col(name: str, typ: str, desc: str) -> ColumnSpec:
        return ColumnSpec(name=name, type=typ, description=desc)

    tables = (
        TableSpec(
            name="admissions", kind=EVENT_TABLE, time_column="admittime",
            description="Hospital admissions with admission and discharge times.",
            columns=(
                col("subject_id", "integer", "patient identifier"),
                col("hadm_id", "integer", "hospital admission identifier"),
                col("admittime", "timestamp", "admission time"),
                col("dischtime", "timestamp", "discharge time"),
                col("admission_type", "text", "urgency class of the admission"),
                col("admission_location", "text", "where the patient was admitted from"),
            ),
        ),
        TableSpec(
            name="diagnoses_icd", kind=EVENT_TABLE, time_column="charttime",
            description="Billed ICD diagnoses recorded during a stay.",
            columns=(
                col("subject_id", "integer", "patient identifier"),
                col("hadm_id", "integer", "hospital admission identifier"),
                col("seq_num", "integer", "priority order of the diagnosis"),
                col("icd_code", "text", "ICD code, joins d_icd_diagnoses"),
                col("icd_version", "integer", "ICD revision (9 or 10)"),
                col("charttime", "timestamp", "time the diagnosis was recorded"),
            ),
        ),
        TableSpec(
            name="labevents", kind=EVENT_TABLE, time_column="charttime",
            description="Laboratory measurements with numeric results.",
            columns=(
                col("labevent_id", "integer", "row identifier"),
                col("subject_id", "integer", "patient identifier"),
                col("hadm_id", "integer", "hospital admission identifier"),
                col("itemid", "integer", "lab item, joins d_labitems"),
                col("charttime", "timestamp", "specimen chart time"),
                col("valuenum", "real", "numeric result value"),
                col("valueuom", "text", "unit of measure"),
                col("flag", "text", "abnormality flag"),
            ),
        ),
        TableSpec(
            name="microbiologyevents", kind=EVENT_TABLE, time_column="charttime",
            description="Microbiology cultures and identified organisms.",
            columns=(
                col("microevent_id", "integer", "row identifier"),
                col("subject_id", "integer", "patient identifier"),
                col("hadm_id", "integer", "hospital admission identifier"),
                col("charttime", "timestamp", "specimen chart time"),
                col("spec_type_desc", "text", "specimen type"),
                col("org_name", "text", "organism grown, empty when negative"),
            ),
        ),
        TableSpec(
            name="prescriptions", kind=EVENT_TABLE, time_column="starttime",
            description="Medication orders with start and stop times.",
            columns=(
                col("subject_id", "integer", "patient identifier"),
                col("hadm_id", "integer", "hospital admission identifier"),
                col("starttime", "timestamp", "order start time"),
                col("stoptime", "timestamp", "order stop time"),
                col("drug", "text", "medication name"),
                col("dose_val_rx", "real", "prescribed dose value"),
                col("dose_unit_rx", "text", "prescribed dose unit"),
                col("route", "text", "administration route"),
            ),
        ),
        TableSpec(
            name="transfers", kind=EVENT_TABLE, time_column="intime",
            description="Ward and unit transfers with in and out times.",
            columns=(
                col("subject_id", "integer", "patient identifier"),
                col("hadm_id", "integer", "hospital admission identifier"),
                col("transfer_id", "integer", "row identifier"),
                col("eventtype", "text", "admit, transfer, or discharge"),
                col("careunit", "text", "care unit name"),
                col("intime", "timestamp", "unit entry time"),
                col("outtime", "timestamp", "unit exit time"),
            ),
        ),
        TableSpec(
            name="d_icd_diagnoses", kind=DICTIONARY_TABLE,
            description="ICD diagnosis code titles.",
            columns=(
                col("icd_code", "text", "ICD code"),
                col("icd_version", "integer", "ICD revision"),
                col("long_title", "text", "full diagnosis title"),
            ),
        ),
        TableSpec(
            name="d_labitems", kind=DICTIONARY_TABLE,
            description="Laboratory item definitions.",
            columns=(
                col("itemid", "integer", "lab item identifier"),
                col("label", "text", "measurement name"),
                col("fluid", "text", "specimen fluid"),
                col("category", "text", "lab category"),
            ),
        ),
    )
    return TableManifest(tables=tables)


def _write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def fixture_generate(
    out_dir: str | Path,
    seed: int,
    n_patients: int,
    n_events_per_patient: int,
) -> Path:
    """Write a synthetic EHR data directory; returns its path.

    Every event table receives exactly ``n_events_per_patient`` rows per
    patient. Re-running with the same arguments reproduces byte-identical
    files.
    """
    if n_patients < 1 or n_events_per_patient < 1:
        raise DomainError("malformed_input", "n_patients and n_events_per_patient must be positive")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DomainError("io_failure", f"cannot create {out}: {exc}") from exc

    rng = random.Random(seed)
    manifest = fixture_manifest()

    admissions: list[tuple] = []
    diagnoses: list[tuple] = []
    labevents: list[tuple] = []
    microevents: list[tuple] = []
    prescriptions: list[tuple] = []
    transfers: list[tuple] = []

    def ts(base: datetime, minutes: float) -> str:
        return format_timestamp(base + timedelta(minutes=int(minutes)))

    lab_id = 1
    micro_id = 1
    transfer_id = 1
    for p in range(n_patients):
        subject_id = 10_000_000 + p
        patient_base = _BASE_TIME + timedelta(days=rng.randint(0, 3650), hours=rng.randint(0, 23))
        n = n_events_per_patient

        def offsets(span_minutes: int = 7 * 24 * 60) -> list[int]:
            return sorted(rng.randint(0, span_minutes) for _ in range(n))

        for j, off in enumerate(offsets(span_minutes=365 * 24 * 60)):
            hadm_id = 20_000_000 + p * 1000 + j
            admit = patient_base + timedelta(minutes=off)
            stay_h = rng.randint(24, 240)
            admissions.append((
                subject_id, hadm_id, format_timestamp(admit),
                format_timestamp(admit + timedelta(hours=stay_h)),
                rng.choice(_ADMISSION_TYPES), rng.choice(_ADMISSION_LOCATIONS),
            ))
        first_hadm = 20_000_000 + p * 1000

        for off in offsets():
            code, version, _ = rng.choice(_ICD_DIAGNOSES)
            diagnoses.append((
                subject_id, first_hadm, rng.randint(1, 8), code, int(version),
                ts(patient_base, off),
            ))
        for off in offsets():
            itemid, _, _, _ = rng.choice(_LAB_ITEMS)
            labevents.append((
                lab_id, subject_id, first_hadm, itemid, ts(patient_base, off),
                round(rng.uniform(0.1, 200.0), 1), "mg/dL", rng.choice(_LAB_FLAGS),
            ))
            lab_id += 1
        for off in offsets():
            grew = rng.random() < 0.6
            microevents.append((
                micro_id, subject_id, first_hadm, ts(patient_base, off),
                rng.choice(_SPECIMENS), rng.choice(_ORGANISMS) if grew else "",
            ))
            micro_id += 1
        for off in offsets():
            start = patient_base + timedelta(minutes=off)
            prescriptions.append((
                subject_id, first_hadm, format_timestamp(start),
                format_timestamp(start + timedelta(hours=rng.randint(4, 96))),
                rng.choice(_DRUGS), round(rng.uniform(0.5, 1000.0), 1),
                rng.choice(["mg", "g", "units", "mL"]), rng.choice(_ROUTES),
            ))
        for off in offsets():
            intime = patient_base + timedelta(minutes=off)
            transfers.append((
                subject_id, first_hadm, transfer_id,
                rng.choice(["admit", "transfer", "discharge"]), rng.choice(_CAREUNITS),
                format_timestamp(intime),
                format_timestamp(intime + timedelta(hours=rng.randint(1, 72))),
            ))
            transfer_id += 1

    data = {
        "admissions": admissions,
        "diagnoses_icd": diagnoses,
        "labevents": labevents,
        "microbiologyevents": microevents,
        "prescriptions": prescriptions,
        "transfers": transfers,
        "d_icd_diagnoses": [(c, int(v), t) for c, v, t in _ICD_DIAGNOSES],
        "d_labitems": list(_LAB_ITEMS),
    }

    (out / "manifest.json").write_text(
        json.dumps(manifest_to_dict(manifest), indent=2) + "\n", encoding="utf-8"
    )
    for spec in manifest.tables:
        _write_csv(out / f"{spec.name}.csv", spec.column_names(), data[spec.name])
    return out


def fixture_patient_ids(n_patients: int) -> list[str]:
    return [str(10_000_000 + p) for p in range(n_patients)]
