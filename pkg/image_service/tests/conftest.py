"""Service test fixtures: the same image fixture set the primary uses.

Conformance tests deliberately import the primary package — its stub
backend is the oracle the service must reproduce.
"""

from __future__ import annotations

import json
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from image_service.app import ServiceConfig, create_app


def _checker_pixels(width: int, height: int) -> bytes:
    return bytes(((x // 8) + (y // 8)) % 2 * 255 for y in range(height) for x in range(width))


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory) -> Path:
    from PIL import Image

    from ehrseek import dicom

    out = tmp_path_factory.mktemp("images")
    dicom.write_dicom(out / "big.dcm", 2048, 1536, _checker_pixels(2048, 1536), view_position="PA")
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


@pytest.fixture(scope="session")
def client() -> TestClient:
    return TestClient(create_app(ServiceConfig()))
