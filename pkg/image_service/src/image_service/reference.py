"""Reference model backends for the six image tools.

These deterministic implementations define the service's conformance
target: sidecar label passthrough, content-hash fallbacks, half-up resize
arithmetic, and fixed report templates. Pixel-level or learned inference
belongs to external backends plugged in by configuration.
"""

from __future__ import annotations

import base64
import hashlib
import json
import random
import tempfile
from pathlib import Path
from typing import Any

from PIL import Image

from .codec import ImageError, decode_dicom

MAX_IMAGE_EDGE = 1568

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


def clamp_dimensions(width: int, height: int, max_edge: int = MAX_IMAGE_EDGE) -> tuple[int, int]:
    long_edge = max(width, height)
    if long_edge <= max_edge:
        return width, height
    scale = max_edge / long_edge
    if width >= height:
        return max_edge, max(1, int(height * scale + 0.5))
    return max(1, int(width * scale + 0.5)), max_edge


def _sidecar(path: Path) -> dict[str, Any] | None:
    sidecar_path = Path(str(path.with_suffix("")) + SIDECAR_SUFFIX)
    if sidecar_path.is_file():
        return json.loads(sidecar_path.read_text(encoding="utf-8"))
    return None


def _open_any(path: Path) -> Image.Image:
    if not path.is_file():
        raise ImageError("unreadable_image", f"no such image file: {path}")
    if path.suffix.lower() in (".dcm", ".dicom"):
        width, height, pixels, _ = decode_dicom(path)
        return Image.frombytes("L", (width, height), pixels)
    try:
        image = Image.open(path)
        image.load()
        return image
    except Exception as exc:
        raise ImageError("unreadable_image", f"cannot decode {path}: {exc}") from exc


def _finding_vector(path: Path) -> list[tuple[str, float]]:
    sidecar = _sidecar(path)
    if sidecar is not None and "findings" in sidecar:
        declared = {str(k).lower(): float(v) for k, v in sidecar["findings"].items()}
        return [(label, declared.get(label.lower(), 0.0)) for label in CXR_FINDINGS]
    digest = hashlib.sha256(path.read_bytes()).digest()
    rng = random.Random(int.from_bytes(digest[:8], "big"))
    return [(label, round(rng.random(), 6)) for label in CXR_FINDINGS]


class ReferenceBackend:
    """Deterministic handlers for every tool, one method per endpoint."""

    def __init__(self, artifact_dir: str | Path | None = None):
        self.artifact_dir = Path(artifact_dir) if artifact_dir else None

    def resolve_image(self, args: dict[str, Any]) -> Path:
        if args.get("image_path"):
            return Path(args["image_path"])
        if args.get("image_base64"):
            blob = base64.b64decode(args["image_base64"])
            digest = hashlib.sha256(blob).hexdigest()[:16]
            root = self.artifact_dir or Path(tempfile.gettempdir()) / "ehrseek-imaging"
            root.mkdir(parents=True, exist_ok=True)
            name = Path(args.get("image_name") or "upload.png").name
            target = root / f"{digest}_{name}"
            if not target.exists():
                target.write_bytes(blob)
            return target
        raise ImageError("unreadable_image", "request carries neither image_path nor image_base64")

    def run(self, tool: str, args: dict[str, Any]) -> dict[str, Any]:
        handler = {
            "image.dicom_processor": self.dicom_processor,
            "image.image_visualizer": self.image_visualizer,
            "image.chest_xray_classifier": self.chest_xray_classifier,
            "image.chest_xray_report_generator": self.chest_xray_report_generator,
            "image.xray_phrase_grounding": self.xray_phrase_grounding,
            "image.chest_xray_segmentation": self.chest_xray_segmentation,
        }.get(tool)
        if handler is None:
            raise ImageError("not_found", f"unknown tool {tool!r}")
        return handler(self.resolve_image(args), args)

    def dicom_processor(self, path: Path, args: dict[str, Any]) -> dict[str, Any]:
        width, height, pixels, metadata = decode_dicom(path)
        image = Image.frombytes("L", (width, height), pixels)
        out_w, out_h = clamp_dimensions(width, height)
        if (out_w, out_h) != (width, height):
            image = image.resize((out_w, out_h), Image.LANCZOS)
        out_path = path.with_name(path.stem + ".converted.png")
        image.save(out_path, format="PNG")
        return {"png_path": str(out_path), "width": out_w, "height": out_h, "metadata": metadata}

    def image_visualizer(self, path: Path, args: dict[str, Any]) -> dict[str, Any]:
        image = _open_any(path)
        out_path = path.with_name(path.stem + ".render.png")
        image.save(out_path, format="PNG")
        return {"render_path": str(out_path), "width": image.width, "height": image.height}

    def chest_xray_classifier(self, path: Path, args: dict[str, Any]) -> dict[str, Any]:
        _open_any(path)
        return {"findings": [[label, prob] for label, prob in _finding_vector(path)]}

    def chest_xray_report_generator(self, path: Path, args: dict[str, Any]) -> dict[str, Any]:
        _open_any(path)
        vector = _finding_vector(path)
        lines = [f"- {label}: probability {prob:.2f}" for label, prob in vector]
        findings = "Automated chest radiograph findings:\n" + "\n".join(lines)
        positives = [label for label, prob in vector if prob > 0.5 and label != "No Finding"]
        if positives:
            impression = (
                "Impression: findings suggestive of "
                + ", ".join(label.lower() for label in positives)
                + "."
            )
        else:
            impression = NO_ACUTE_FINDING_SENTENCE
        return {"findings": findings, "impression": impression}

    def xray_phrase_grounding(self, path: Path, args: dict[str, Any]) -> dict[str, Any]:
        phrase = str(args.get("phrase") or "").strip()
        if not phrase:
            raise ImageError("empty_query", "phrase must be nonempty")
        image = _open_any(path)
        boxes = []
        sidecar = _sidecar(path) or {}
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

    def chest_xray_segmentation(self, path: Path, args: dict[str, Any]) -> dict[str, Any]:
        structures = args.get("structures") or []
        if isinstance(structures, str):
            structures = [structures]
        if not structures:
            raise ImageError("unknown_structure", "structures must be nonempty")
        image = _open_any(path)
        masks = []
        for raw_name in structures:
            name = str(raw_name).lower()
            half = ANATOMY_HALF_PLANES.get(name)
            if half is None:
                known = ", ".join(sorted(ANATOMY_HALF_PLANES))
                raise ImageError("unknown_structure", f"{raw_name!r} not in vocabulary: {known}")
            masks.append(self._mask(path, image.width, image.height, name, half))
        return {"masks": masks}

    @staticmethod
    def _mask(path: Path, width: int, height: int, structure: str, half: str) -> dict[str, Any]:
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
        out_path = path.with_name(f"{path.stem}.mask.{slug}.png")
        mask.save(out_path, format="PNG")
        return {"structure": structure, "mask_path": str(out_path), "area_px": area}
