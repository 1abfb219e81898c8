"""Contract equivalence: for the full fixture set, service responses must
equal the primary client's stub backend outputs after canonical JSON
ordering — one oracle, two implementations."""

from __future__ import annotations

import json

import pytest

from ehrseek.core import DomainError
from ehrseek.imaging import RemoteImagingBackend, StubImagingBackend

from image_service.app import ServiceConfig, create_app


def _canonical(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _fixture_calls(image_dir):
    chest = str(image_dir / "chest.png")
    return [
        ("image.dicom_processor", {"image_path": str(image_dir / "big.dcm")}),
        ("image.dicom_processor", {"image_path": str(image_dir / "small.dcm")}),
        ("image.image_visualizer", {"image_path": chest}),
        ("image.image_visualizer", {"image_path": str(image_dir / "plain.png")}),
        ("image.chest_xray_classifier", {"image_path": chest}),
        ("image.chest_xray_classifier", {"image_path": str(image_dir / "plain.png")}),
        ("image.chest_xray_classifier", {"image_path": str(image_dir / "clear.png")}),
        ("image.chest_xray_report_generator", {"image_path": chest}),
        ("image.chest_xray_report_generator", {"image_path": str(image_dir / "clear.png")}),
        ("image.xray_phrase_grounding", {"image_path": chest, "phrase": "right basilar opacity"}),
        ("image.xray_phrase_grounding", {"image_path": chest, "phrase": "unknown thing"}),
        ("image.chest_xray_segmentation", {"image_path": chest, "structures": ["left lung"]}),
        ("image.chest_xray_segmentation",
         {"image_path": chest, "structures": ["right lung", "heart", "trachea"]}),
    ]


class TestConformance:
    def test_full_fixture_set_matches_stub(self, client, image_dir):
        stub = StubImagingBackend()
        for tool, args in _fixture_calls(image_dir):
            expected = stub.run(tool, dict(args))
            body = client.post(f"/tools/{tool}", json=args).json()
            assert body["status"] == "ok", (tool, body)
            assert _canonical(body["payload"]) == _canonical(expected), tool

    def test_error_codes_match_stub(self, client, image_dir):
        stub = StubImagingBackend()
        error_calls = [
            ("image.dicom_processor", {"image_path": str(image_dir / "fake.dcm")}),
            ("image.image_visualizer", {"image_path": str(image_dir / "missing.png")}),
            ("image.xray_phrase_grounding",
             {"image_path": str(image_dir / "chest.png"), "phrase": "  "}),
            ("image.chest_xray_segmentation",
             {"image_path": str(image_dir / "chest.png"), "structures": ["gallbladder"]}),
        ]
        for tool, args in error_calls:
            with pytest.raises(DomainError) as err:
                stub.run(tool, dict(args))
            body = client.post(f"/tools/{tool}", json=args).json()
            assert body["status"] == "error"
            assert body["error_code"] == err.value.code, tool

    def test_rescale_case_large_landscape(self, client, image_dir):
        body = client.post(
            "/tools/image.dicom_processor", json={"image_path": str(image_dir / "big.dcm")}
        ).json()
        assert (body["payload"]["width"], body["payload"]["height"]) == (1568, 1176)

    def test_primary_remote_client_speaks_to_service(self, image_dir):
        """The primary's HTTP client consumes this service interchangeably
        with its stub — over a real socket."""
        import socket
        import threading
        import time

        import uvicorn

        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            port = probe.getsockname()[1]
        server = uvicorn.Server(
            uvicorn.Config(create_app(ServiceConfig()), host="127.0.0.1", port=port,
                           log_level="error")
        )
        thread = threading.Thread(target=server.run, daemon=True)
        thread.start()
        deadline = time.monotonic() + 10
        while not server.started:
            assert time.monotonic() < deadline, "service did not start"
            time.sleep(0.02)
        try:
            remote = RemoteImagingBackend(f"http://127.0.0.1:{port}")
            stub = StubImagingBackend()
            for tool, args in _fixture_calls(image_dir)[:6]:
                assert _canonical(remote.run(tool, dict(args))) == _canonical(
                    stub.run(tool, dict(args))
                )
        finally:
            server.should_exit = True
            thread.join(timeout=10)
