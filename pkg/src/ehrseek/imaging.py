"""Client-side contract for the six medical-image tools.

Tools run against a pluggable backend selected by configuration: the
in-process deterministic stub (default, fully offline) or a remote HTTP
service speaking the same wire protocol (POST ``/tools/<name>`` with a JSON
body, response ``{"status", "payload", "error_code"?}``).

Stub outputs are test plumbing with fully documented semantics — sidecar
label passthrough and content-hash fallbacks — never clinical claims.
"""

from __future__ import annotations

import base64
import hashlib
import json
import random
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

import httpx
from PIL import Image

from .core import DomainError, ImageRef
from . import dicom

#: Longest output edge after conversion; images are never upscaled.
MAX_IMAGE_EDGE = 1568

#: The pinned 14-label chest-pathology set, in fixed order.
CXR_FINDINGS: tuple[str, ...] = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
)

#: Anatomy vocabulary for segmentation, each mapped to its stub half-plane.
ANATOMY_HALF_PLANES: dict[str, str] = {
    "left lung": "left",
    "right lung": "right",
    "heart": "bottom",
    "trachea": "top",
    "spine": "bottom",
    "mediastinum": "top",
    "left clavicle": "top",
    "right clavicle": "top",
}

SIDECAR_SUFFIX = ".labels.json"
NO_ACUTE_FINDING_SENTENCE = "Impression: no acute cardiopulmonary abnormality identified."

TOOL_NAMES = (
    "image.dicom_processor",
    "image.image_visualizer",
    "image.chest_xray_classifier",
    "image.chest_xray_report_generator",
    "image.xray_phrase_grounding",
    "image.chest_xray_segmentation",
)


@dataclass(frozen=True)
class FindingProbabilities:
    """Per-finding probabilities over the pinned 14-label set, fixed order."""

    entries: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        labels = tuple(label for label, _ in self.entries)
        if labels != CXR_FINDINGS:
            raise ValueError("entries must cover the pinned label set in order")
        for label, prob in self.entries:
            if not 0.0 <= prob <= 1.0:
                raise ValueError(f"probability for {label} outside [0, 1]: {prob}")

    def get(self, label: str) -> float:
        for name, prob in self.entries:
            if name.lower() == label.lower():
                return prob
        raise KeyError(label)


class ImagingBackend(Protocol):
    def run(self, tool: str, args: dict[str, Any]) -> dict[str, Any]: ...


def resized_dimensions(width: int, height: int, max_edge: int = MAX_IMAGE_EDGE) -> tuple[int, int]:
    """Output dimensions: longest edge clamped to max_edge, aspect preserved,
    round half up on the short edge; never upscales."""
    long_edge = max(width, height)
    if long_edge <= max_edge:
        return width, height
    scale = max_edge / long_edge
    if width >= height:
        return max_edge, max(1, int(height * scale + 0.5))
    return max(1, int(width * scale + 0.5)), max_edge


def sidecar_path(image_path: str | Path) -> Path:
    return Path(str(Path(image_path).with_suffix("")) + SIDECAR_SUFFIX)


def _load_sidecar(image_path: Path) -> dict[str, Any] | None:
    path = sidecar_path(image_path)
    if not path.is_file():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def _open_image(path: Path) -> tuple[Image.Image, dict[str, Any]]:
    """Open a PNG or DICOM as a grayscale-or-RGB PIL image plus metadata."""
    if not path.is_file():
        raise DomainError("unreadable_image", f"no such image file: {path}")
    if path.suffix.lower() in (".dcm", ".dicom"):
        width, height, pixels, metadata = dicom.read_dicom(path)
        image = Image.frombytes("L", (width, height), pixels)
        return image, metadata
    try:
        image = Image.open(path)
        image.load()
    except Exception as exc:
        raise DomainError("unreadable_image", f"cannot decode {path}: {exc}") from exc
    return image, {"rows": image.height, "columns": image.width}


def _hash_probabilities(path: Path) -> list[float]:
    digest = hashlib.sha256(path.read_bytes()).digest()
    rng = random.Random(int.from_bytes(digest[:8], "big"))
    return [round(rng.random(), 6) for _ in CXR_FINDINGS]


def classify_from_sidecar_or_hash(path: Path) -> FindingProbabilities:
    """Stub classifier semantics, shared with the reference service: sidecar
    findings pass through (unnamed labels get 0), otherwise a vector seeded
    from the file's content hash."""
    sidecar = _load_sidecar(path)
    if sidecar is not None and "findings" in sidecar:
        declared = {str(k).lower(): float(v) for k, v in sidecar["findings"].items()}
        probs = [declared.get(label.lower(), 0.0) for label in CXR_FINDINGS]
    else:
        probs = _hash_probabilities(path)
    return FindingProbabilities(entries=tuple(zip(CXR_FINDINGS, probs)))


def render_report(probs: FindingProbabilities) -> dict[str, str]:
    """Template a findings/impression report from classifier output."""
    lines = [f"- {label}: probability {prob:.2f}" for label, prob in probs.entries]
    findings = "Automated chest radiograph findings:\n" + "\n".join(lines)
    positives = [
        label for label, prob in probs.entries if prob > 0.5 and label != "No Finding"
    ]
    if positives:
        impression = "Impression: findings suggestive of " + ", ".join(
            p.lower() for p in positives
        ) + "."
    else:
        impression = NO_ACUTE_FINDING_SENTENCE
    return {"findings": findings, "impression": impression}


class StubImagingBackend:
    """Deterministic in-process backend; artifacts are written next to the
    input image under fixed derived names so repeated calls are idempotent."""

    def __init__(self, artifact_dir: str | Path | None = None):
        self.artifact_dir = Path(artifact_dir) if artifact_dir else None

    # -- request plumbing ---------------------------------------------------

    def _materialize(self, args: dict[str, Any]) -> Path:
        if args.get("image_path"):
            return Path(args["image_path"])
        if args.get("image_base64"):
            blob = base64.b64decode(args["image_base64"])
            digest = hashlib.sha256(blob).hexdigest()[:16]
            root = self.artifact_dir or Path(tempfile.gettempdir()) / "ehrseek-imaging"
            root.mkdir(parents=True, exist_ok=True)
            name = args.get("image_name", "upload.png")
            target = root / f"{digest}_{Path(name).name}"
            if not target.exists():
                target.write_bytes(blob)
            return target
        raise DomainError("unreadable_image", "request carries neither image_path nor image_base64")

    def run(self, tool: str, args: dict[str, Any]) -> dict[str, Any]:
        handlers = {
            "image.dicom_processor": self._dicom_processor,
            "image.image_visualizer": self._image_visualizer,
            "image.chest_xray_classifier": self._classifier,
            "image.chest_xray_report_generator": self._report_generator,
            "image.xray_phrase_grounding": self._phrase_grounding,
            "image.chest_xray_segmentation": self._segmentation,
        }
        if tool not in handlers:
            raise DomainError("backend_unavailable", f"unknown imaging tool {tool!r}")
        return handlers[tool](self._materialize(args), args)

    # -- tool implementations ------------------------------------------------

    def _dicom_processor(self, path: Path, args: dict[str, Any]) -> dict[str, Any]:
        width, height, pixels, metadata = dicom.read_dicom(path)
        image = Image.frombytes("L", (width, height), pixels)
        out_w, out_h = resized_dimensions(width, height)
        if (out_w, out_h) != (width, height):
            image = image.resize((out_w, out_h), Image.LANCZOS)
        out_path = path.with_suffix("").with_name(path.stem + ".converted.png")
        image.save(out_path, format="PNG")
        return {
            "png_path": str(out_path),
            "width": out_w,
            "height": out_h,
            "metadata": metadata,
        }

    def _image_visualizer(self, path: Path, args: dict[str, Any]) -> dict[str, Any]:
        image, _ = _open_image(path)
        out_path = path.with_suffix("").with_name(path.stem + ".render.png")
        image.save(out_path, format="PNG")
        return {"render_path": str(out_path), "width": image.width, "height": image.height}

    def _classifier(self, path: Path, args: dict[str, Any]) -> dict[str, Any]:
        _open_image(path)  # fail fast on unreadable input
        probs = classify_from_sidecar_or_hash(path)
        return {"findings": [[label, prob] for label, prob in probs.entries]}

    def _report_generator(self, path: Path, args: dict[str, Any]) -> dict[str, Any]:
        _open_image(path)
        return render_report(classify_from_sidecar_or_hash(path))

    def _phrase_grounding(self, path: Path, args: dict[str, Any]) -> dict[str, Any]:
        phrase = str(args.get("phrase", "")).strip()
        if not phrase:
            raise DomainError("empty_query", "phrase must be nonempty")
        image, _ = _open_image(path)
        sidecar = _load_sidecar(path) or {}
        boxes = []
        for key, value in sidecar.get("boxes", {}).items():
            if key.lower() != phrase.lower():
                continue
            if isinstance(value, dict):
                raw, confidence = value["box"], float(value.get("confidence", 1.0))
            else:
                raw, confidence = value, 1.0
            x, y, w, h = (int(v) for v in raw)
            x = max(0, min(x, image.width - 1))
            y = max(0, min(y, image.height - 1))
            w = max(1, min(w, image.width - x))
            h = max(1, min(h, image.height - y))
            boxes.append({"x": x, "y": y, "w": w, "h": h, "confidence": confidence})
        return {"boxes": boxes}

    def _segmentation(self, path: Path, args: dict[str, Any]) -> dict[str, Any]:
        structures = args.get("structures") or []
        if isinstance(structures, str):
            structures = [structures]
        if not structures:
            raise DomainError("unknown_structure", "structures must be nonempty")
        image, _ = _open_image(path)
        masks = []
        for name in structures:
            half = ANATOMY_HALF_PLANES.get(str(name).lower())
            if half is None:
                known = ", ".join(sorted(ANATOMY_HALF_PLANES))
                raise DomainError("unknown_structure", f"{name!r} not in vocabulary: {known}")
            masks.append(self._write_mask(path, image.width, image.height, str(name).lower(), half))
        return {"masks": masks}

    @staticmethod
    def _write_mask(path: Path, width: int, height: int, structure: str, half: str) -> dict[str, Any]:
        mask = Image.new("L", (width, height), 0)
        if half == "left":
            region, area = (0, 0, width // 2, height), (width // 2) * height
        elif half == "right":
            region, area = (width // 2, 0, width, height), (width - width // 2) * height
        elif half == "top":
            region, area = (0, 0, width, height // 2), width * (height // 2)
        else:
            region, area = (0, height // 2, width, height), width * (height - height // 2)
        mask.paste(255, region)
        slug = structure.replace(" ", "_")
        out_path = path.with_suffix("").with_name(f"{path.stem}.mask.{slug}.png")
        mask.save(out_path, format="PNG")
        return {"structure": structure, "mask_path": str(out_path), "area_px": area}


class RemoteImagingBackend:
    """HTTP client for an imaging service speaking the wire protocol."""

    def __init__(
        self,
        base_url: str,
        token: str | None = None,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        timeout_s: float = 60.0,
    ):
        self.base_url = base_url.rstrip("/")
        headers = {"X-Auth-Token": token} if token else {}
        self._client = httpx.Client(transport=transport, timeout=timeout_s, headers=headers)
        self._gate = threading.Semaphore(max_in_flight)

    def run(self, tool: str, args: dict[str, Any]) -> dict[str, Any]:
        with self._gate:
            try:
                response = self._client.post(f"{self.base_url}/tools/{tool}", json=args)
            except httpx.HTTPError as exc:
                raise DomainError("backend_unavailable", f"imaging service unreachable: {exc}") from exc
        if response.status_code >= 500:
            raise DomainError("backend_unavailable", f"imaging service error {response.status_code}")
        body = response.json()
        if body.get("status") == "ok":
            return body["payload"]
        raise DomainError(body.get("error_code") or "backend_unavailable", body.get("message", "imaging request failed"))


# ---------------------------------------------------------------------------
# Typed convenience wrappers

def dicom_processor(backend: ImagingBackend, ref: ImageRef) -> dict[str, Any]:
    return backend.run("image.dicom_processor", {"image_path": ref.path})


def image_visualizer(backend: ImagingBackend, ref: ImageRef) -> dict[str, Any]:
    return backend.run("image.image_visualizer", {"image_path": ref.path})


def chest_xray_classifier(backend: ImagingBackend, ref: ImageRef) -> FindingProbabilities:
    payload = backend.run("image.chest_xray_classifier", {"image_path": ref.path})
    return FindingProbabilities(
        entries=tuple((label, float(prob)) for label, prob in payload["findings"])
    )


def chest_xray_report_generator(backend: ImagingBackend, ref: ImageRef) -> dict[str, str]:
    payload = backend.run("image.chest_xray_report_generator", {"image_path": ref.path})
    return {"findings": payload["findings"], "impression": payload["impression"]}


def xray_phrase_grounding(backend: ImagingBackend, ref: ImageRef, phrase: str) -> list[dict[str, Any]]:
    payload = backend.run("image.xray_phrase_grounding", {"image_path": ref.path, "phrase": phrase})
    return payload["boxes"]


def chest_xray_segmentation(
    backend: ImagingBackend, ref: ImageRef, structures: list[str]
) -> list[dict[str, Any]]:
    payload = backend.run(
        "image.chest_xray_segmentation", {"image_path": ref.path, "structures": structures}
    )
    return payload["masks"]
