"""Shared fixtures: a small synthetic EHR store, a knowledge corpus, and
image files with sidecar labels."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in RESULTS:
        suffix = f"  ({detail})" if detail else ""
        terminalreporter.write_line(f"{status}  {name}{suffix}")

from ehrseek import dicom
from ehrseek.fixtures import fixture_generate, fixture_patient_ids
from ehrseek.store import load_snapshot

FIXTURE_SEED = 7
FIXTURE_PATIENTS = 4
FIXTURE_EVENTS = 12


@pytest.fixture(scope="session")
def store_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("store")
    fixture_generate(out, seed=FIXTURE_SEED, n_patients=FIXTURE_PATIENTS,
                     n_events_per_patient=FIXTURE_EVENTS)
    return out


@pytest.fixture(scope="session")
def patient_ids() -> list[str]:
    return fixture_patient_ids(FIXTURE_PATIENTS)


@pytest.fixture(scope="session")
def snapshot(store_dir, patient_ids):
    # A late cutoff so most of patient 0's events are visible.
    return load_snapshot(store_dir, patient_ids[0], "2141-01-01 00:00:00")


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("corpus")
    docs = {
        "doc-phenotype": {
            "title": "Benchmark phenotype label taxonomy",
            "url": "https://example.org/phenotype-taxonomy",
            "body": (
                "The harutyunyan phenotype taxonomy groups 25 acute and chronic "
                "conditions used for ICU phenotype prediction. "
                + "Labels include sepsis, pneumonia, and acute kidney failure. " * 40
            ),
        },
        "doc-sepsis": {
            "title": "Sepsis management overview",
            "url": "https://example.org/sepsis",
            "body": "Early antibiotics matter in sepsis. " * 300,
        },
        "doc-xray": {
            "title": "Chest radiograph reading primer",
            "url": "https://example.org/cxr",
            "body": "A pleural effusion blunts the costophrenic angle. " * 200,
        },
    }
    index = {}
    for doc_id, meta in docs.items():
        (out / f"{doc_id}.txt").write_text(meta["body"], encoding="utf-8")
        index[doc_id] = {"file": f"{doc_id}.txt", "title": meta["title"], "url": meta["url"]}
    (out / "index.json").write_text(json.dumps(index, indent=2), encoding="utf-8")
    return out


def _checker_pixels(width: int, height: int) -> bytes:
    return bytes(((x // 8) + (y // 8)) % 2 * 255 for y in range(height) for x in range(width))


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory) -> Path:
    from PIL import Image

    out = tmp_path_factory.mktemp("images")

    dicom.write_dicom(out / "big.dcm", 2048, 1536, _checker_pixels(2048, 1536),
                      view_position="PA")
    dicom.write_dicom(out / "small.dcm", 800, 600, _checker_pixels(800, 600))

    png = Image.frombytes("L", (512, 512), _checker_pixels(512, 512))
    png.save(out / "chest.png")
    (out / "chest.labels.json").write_text(
        json.dumps(
            {
                "findings": {"Pneumonia": 0.9, "Pleural Effusion": 0.62},
                "boxes": {"right basilar opacity": [40, 300, 120, 90]},
            }
        ),
        encoding="utf-8",
    )

    clear = Image.frombytes("L", (256, 256), _checker_pixels(256, 256))
    clear.save(out / "clear.png")
    (out / "clear.labels.json").write_text(json.dumps({"findings": {}}), encoding="utf-8")

    plain = Image.frombytes("L", (300, 200), _checker_pixels(300, 200))
    plain.save(out / "plain.png")

    (out / "fake.dcm").write_text("this is not an image", encoding="utf-8")
    return out
