from __future__ import annotations

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from ehrseek import dicom
from ehrseek.core import DomainError, ImageRef
from ehrseek.imaging import (
    CXR_FINDINGS,
    MAX_IMAGE_EDGE,
    NO_ACUTE_FINDING_SENTENCE,
    RemoteImagingBackend,
    StubImagingBackend,
    chest_xray_classifier,
    chest_xray_report_generator,
    chest_xray_segmentation,
    dicom_processor,
    image_visualizer,
    resized_dimensions,
    xray_phrase_grounding,
)


def _ref(image_dir, name: str) -> ImageRef:
    return ImageRef(study_id="s1", image_id=name, path=str(image_dir / name))


@pytest.fixture(scope="module")
def stub():
    return StubImagingBackend()


class TestDicomCodec:
    def test_round_trip(self, tmp_path):
        pixels = bytes((x * 7 + y * 3) % 256 for y in range(10) for x in range(12))
        path = dicom.write_dicom(tmp_path / "t.dcm", 12, 10, pixels, view_position="AP")
        width, height, decoded, metadata = dicom.read_dicom(path)
        assert (width, height) == (12, 10)
        assert decoded == pixels
        assert metadata["view_position"] == "AP"
        assert metadata["photometric"] == "MONOCHROME2"

    def test_sixteen_bit_high_byte(self, tmp_path):
        import struct

        values = [0x0000, 0x01FF, 0xFF00, 0xABCD]
        pixels = b"".join(struct.pack("<H", v) for v in values)
        path = dicom.write_dicom(tmp_path / "t16.dcm", 4, 1, pixels, bits_allocated=16)
        _, _, decoded, metadata = dicom.read_dicom(path)
        assert list(decoded) == [0x00, 0x01, 0xFF, 0xAB]
        assert metadata["bits_allocated"] == 16

    def test_not_dicom(self, tmp_path):
        bad = tmp_path / "x.dcm"
        bad.write_text("hello")
        with pytest.raises(DomainError) as err:
            dicom.read_dicom(bad)
        assert err.value.code == "unreadable_image"


class TestResizeArithmetic:
    def test_rescale_case_large_landscape(self):
        # oracle: scale = 1568/2048; short edge 1536 * scale = 1176.0, half-up
        assert resized_dimensions(2048, 1536) == (1568, 1176)

    def test_below_limit_identity(self):
        assert resized_dimensions(800, 600) == (800, 600)

    def test_exact_limit_untouched(self):
        assert resized_dimensions(1568, 900) == (1568, 900)

    def test_portrait(self):
        assert resized_dimensions(1536, 2048) == (1176, 1568)

    @given(st.integers(1, 6000), st.integers(1, 6000))
    def test_never_upscales_never_exceeds(self, w, h):
        ow, oh = resized_dimensions(w, h)
        assert max(ow, oh) <= max(MAX_IMAGE_EDGE, max(w, h))
        assert max(ow, oh) <= MAX_IMAGE_EDGE or (w, h) == (ow, oh)
        assert ow <= w and oh <= h
        assert ow >= 1 and oh >= 1
        # oracle recomputation, round half up with a 1px floor
        if max(w, h) > MAX_IMAGE_EDGE:
            scale = MAX_IMAGE_EDGE / max(w, h)
            if w >= h:
                assert (ow, oh) == (MAX_IMAGE_EDGE, max(1, int(h * scale + 0.5)))
            else:
                assert (ow, oh) == (max(1, int(w * scale + 0.5)), MAX_IMAGE_EDGE)


class TestDicomProcessor:
    def test_large_dicom_resized(self, stub, image_dir):
        payload = dicom_processor(stub, _ref(image_dir, "big.dcm"))
        assert (payload["width"], payload["height"]) == (1568, 1176)
        assert payload["metadata"]["rows"] == 1536
        assert payload["metadata"]["view_position"] == "PA"
        with Image.open(payload["png_path"]) as image:
            assert image.size == (1568, 1176)

    def test_small_dicom_untouched(self, stub, image_dir):
        payload = dicom_processor(stub, _ref(image_dir, "small.dcm"))
        assert (payload["width"], payload["height"]) == (800, 600)

    def test_text_posing_as_dicom(self, stub, image_dir):
        with pytest.raises(DomainError) as err:
            dicom_processor(stub, _ref(image_dir, "fake.dcm"))
        assert err.value.code == "unreadable_image"


class TestVisualizer:
    def test_valid_png(self, stub, image_dir):
        payload = image_visualizer(stub, _ref(image_dir, "chest.png"))
        assert (payload["width"], payload["height"]) == (512, 512)

    def test_missing_file(self, stub, image_dir):
        with pytest.raises(DomainError) as err:
            image_visualizer(stub, ImageRef("s", "gone", str(image_dir / "gone.png")))
        assert err.value.code == "unreadable_image"

    def test_repeat_call_same_artifact(self, stub, image_dir):
        a = image_visualizer(stub, _ref(image_dir, "chest.png"))
        b = image_visualizer(stub, _ref(image_dir, "chest.png"))
        assert a == b


class TestClassifier:
    def test_sidecar_passthrough(self, stub, image_dir):
        probs = chest_xray_classifier(stub, _ref(image_dir, "chest.png"))
        assert probs.get("Pneumonia") == 0.9
        assert probs.get("Pleural Effusion") == 0.62
        assert probs.get("Edema") == 0.0

    def test_all_values_in_range(self, stub, image_dir):
        for name in ("chest.png", "plain.png", "clear.png"):
            probs = chest_xray_classifier(stub, _ref(image_dir, name))
            assert len(probs.entries) == 14
            assert all(0.0 <= p <= 1.0 for _, p in probs.entries)

    def test_deterministic_without_sidecar(self, stub, image_dir):
        a = chest_xray_classifier(stub, _ref(image_dir, "plain.png"))
        b = chest_xray_classifier(stub, _ref(image_dir, "plain.png"))
        assert a == b

    def test_label_order_pinned(self, stub, image_dir):
        probs = chest_xray_classifier(stub, _ref(image_dir, "plain.png"))
        assert tuple(label for label, _ in probs.entries) == CXR_FINDINGS


class TestReportGenerator:
    def test_impression_mentions_each_finding_above_half(self, stub, image_dir):
        probs = chest_xray_classifier(stub, _ref(image_dir, "chest.png"))
        report = chest_xray_report_generator(stub, _ref(image_dir, "chest.png"))
        expected = [label for label, p in probs.entries if p > 0.5 and label != "No Finding"]
        assert expected  # sidecar sets pneumonia and pleural effusion above 0.5
        for label in expected:
            assert label.lower() in report["impression"].lower()
        assert report["findings"] and report["impression"]

    def test_no_finding_sidecar_fixed_sentence(self, stub, image_dir):
        report = chest_xray_report_generator(stub, _ref(image_dir, "clear.png"))
        assert report["impression"] == NO_ACUTE_FINDING_SENTENCE

    def test_missing_file(self, stub, image_dir):
        with pytest.raises(DomainError) as err:
            chest_xray_report_generator(stub, ImageRef("s", "x", str(image_dir / "nope.png")))
        assert err.value.code == "unreadable_image"


class TestGrounding:
    def test_sidecar_box_verbatim(self, stub, image_dir):
        boxes = xray_phrase_grounding(stub, _ref(image_dir, "chest.png"), "right basilar opacity")
        assert boxes == [{"x": 40, "y": 300, "w": 120, "h": 90, "confidence": 1.0}]

    def test_unknown_phrase_empty(self, stub, image_dir):
        assert xray_phrase_grounding(stub, _ref(image_dir, "chest.png"), "aliens") == []

    def test_boxes_within_bounds(self, stub, image_dir):
        for boxes in (xray_phrase_grounding(stub, _ref(image_dir, "chest.png"), "right basilar opacity"),):
            for box in boxes:
                assert 0 <= box["x"] < 512 and 0 <= box["y"] < 512
                assert box["x"] + box["w"] <= 512 and box["y"] + box["h"] <= 512

    def test_empty_phrase(self, stub, image_dir):
        with pytest.raises(DomainError) as err:
            xray_phrase_grounding(stub, _ref(image_dir, "chest.png"), "  ")
        assert err.value.code == "empty_query"


class TestSegmentation:
    def test_left_lung_half_plane(self, stub, image_dir):
        masks = chest_xray_segmentation(stub, _ref(image_dir, "chest.png"), ["left lung"])
        assert len(masks) == 1
        assert masks[0]["area_px"] == (512 // 2) * 512
        with Image.open(masks[0]["mask_path"]) as mask:
            assert mask.size == (512, 512)
            assert mask.getpixel((0, 0)) == 255 and mask.getpixel((511, 0)) == 0

    def test_unknown_structure(self, stub, image_dir):
        with pytest.raises(DomainError) as err:
            chest_xray_segmentation(stub, _ref(image_dir, "chest.png"), ["gallbladder"])
        assert err.value.code == "unknown_structure"

    def test_two_structures_two_masks(self, stub, image_dir):
        masks = chest_xray_segmentation(stub, _ref(image_dir, "chest.png"), ["left lung", "heart"])
        assert len(masks) == 2
        assert all(m["area_px"] > 0 for m in masks)


class _WireHandler(BaseHTTPRequestHandler):
    backend = StubImagingBackend()

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        args = json.loads(self.rfile.read(length).decode("utf-8"))
        tool = self.path.rsplit("/", 1)[-1]
        try:
            payload = self.backend.run(tool, args)
            body = {"status": "ok", "payload": payload}
        except DomainError as exc:
            body = {"status": "error", "error_code": exc.code, "message": exc.message}
        data = json.dumps(body).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture(scope="module")
def wire_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _WireHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


class TestWireRoundTrip:
    def test_every_tool_matches_stub_over_http(self, wire_server, image_dir, stub):
        remote = RemoteImagingBackend(wire_server)
        chest = _ref(image_dir, "chest.png")
        calls = [
            ("image.dicom_processor", {"image_path": str(image_dir / "big.dcm")}),
            ("image.image_visualizer", {"image_path": chest.path}),
            ("image.chest_xray_classifier", {"image_path": chest.path}),
            ("image.chest_xray_report_generator", {"image_path": chest.path}),
            ("image.xray_phrase_grounding", {"image_path": chest.path, "phrase": "right basilar opacity"}),
            ("image.chest_xray_segmentation", {"image_path": chest.path, "structures": ["left lung"]}),
        ]
        for tool, args in calls:
            local = stub.run(tool, dict(args))
            over_wire = remote.run(tool, dict(args))
            assert json.dumps(over_wire, sort_keys=True) == json.dumps(local, sort_keys=True)

    def test_error_codes_cross_the_wire(self, wire_server, image_dir):
        remote = RemoteImagingBackend(wire_server)
        with pytest.raises(DomainError) as err:
            remote.run("image.dicom_processor", {"image_path": str(image_dir / "fake.dcm")})
        assert err.value.code == "unreadable_image"

    def test_base64_request(self, wire_server, image_dir, tmp_path):
        remote = RemoteImagingBackend(wire_server)
        blob = (image_dir / "plain.png").read_bytes()
        payload = remote.run(
            "image.image_visualizer",
            {"image_base64": base64.b64encode(blob).decode("ascii"), "image_name": "plain.png"},
        )
        assert (payload["width"], payload["height"]) == (300, 200)

    def test_unreachable_service(self):
        remote = RemoteImagingBackend("http://127.0.0.1:9")  # nothing listens on 9
        with pytest.raises(DomainError) as err:
            remote.run("image.chest_xray_classifier", {"image_path": "x.png"})
        assert err.value.code == "backend_unavailable"
