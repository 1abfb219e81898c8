"""Minimal DICOM Part-10 codec: uncompressed monochrome, explicit VR little
endian only.

Covers exactly what the imaging tools need: rows/columns/view-position
metadata and raw 8- or 16-bit pixel data. Anything outside that subset
(other transfer syntaxes, color, sequences with undefined length) is
rejected as unreadable.
"""

from __future__ import annotations

import struct
from pathlib import Path

from .core import DomainError

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"

_LONG_LENGTH_VRS = {b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN"}

TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)
TAG_VIEW_POSITION = (0x0018, 0x5101)
TAG_SAMPLES_PER_PIXEL = (0x0028, 0x0002)
TAG_PHOTOMETRIC = (0x0028, 0x0004)
TAG_ROWS = (0x0028, 0x0010)
TAG_COLUMNS = (0x0028, 0x0011)
TAG_BITS_ALLOCATED = (0x0028, 0x0100)
TAG_PIXEL_DATA = (0x7FE0, 0x0010)


def _encode_element(group: int, element: int, vr: bytes, value: bytes) -> bytes:
    if len(value) % 2:
        value += b"\x00" if vr in (b"UI", b"OB") else b" "
    head = struct.pack("<HH", group, element) + vr
    if vr in _LONG_LENGTH_VRS:
        return head + b"\x00\x00" + struct.pack("<I", len(value)) + value
    return head + struct.pack("<H", len(value)) + value


def write_dicom(
    path: str | Path,
    width: int,
    height: int,
    pixels: bytes,
    view_position: str | None = None,
    bits_allocated: int = 8,
) -> Path:
    """Write a monochrome explicit-VR-little-endian DICOM file."""
    expected = width * height * (bits_allocated // 8)
    if len(pixels) != expected:
        raise ValueError(f"pixel buffer is {len(pixels)} bytes, expected {expected}")

    meta = b"".join(
        (
            _encode_element(0x0002, 0x0001, b"OB", b"\x00\x01"),
            _encode_element(0x0002, 0x0002, b"UI", b"1.2.840.10008.5.1.4.1.1.7"),
            _encode_element(0x0002, 0x0003, b"UI", b"1.2.826.0.1.3680043.8.498.1"),
            _encode_element(0x0002, 0x0010, b"UI", EXPLICIT_VR_LE.encode("ascii")),
        )
    )
    body_parts = [
        _encode_element(0x0008, 0x0060, b"CS", b"CR"),
    ]
    if view_position:
        body_parts.append(_encode_element(*TAG_VIEW_POSITION, b"CS", view_position.encode("ascii")))
    body_parts.extend(
        (
            _encode_element(*TAG_SAMPLES_PER_PIXEL, b"US", struct.pack("<H", 1)),
            _encode_element(*TAG_PHOTOMETRIC, b"CS", b"MONOCHROME2"),
            _encode_element(*TAG_ROWS, b"US", struct.pack("<H", height)),
            _encode_element(*TAG_COLUMNS, b"US", struct.pack("<H", width)),
            _encode_element(*TAG_BITS_ALLOCATED, b"US", struct.pack("<H", bits_allocated)),
            _encode_element(0x0028, 0x0101, b"US", struct.pack("<H", bits_allocated)),
            _encode_element(0x0028, 0x0102, b"US", struct.pack("<H", bits_allocated - 1)),
            _encode_element(0x0028, 0x0103, b"US", struct.pack("<H", 0)),
            _encode_element(*TAG_PIXEL_DATA, b"OB", pixels),
        )
    )

    out = Path(path)
    with open(out, "wb") as fh:
        fh.write(b"\x00" * 128)
        fh.write(b"DICM")
        fh.write(_encode_element(0x0002, 0x0000, b"UL", struct.pack("<I", len(meta))))
        fh.write(meta)
        fh.write(b"".join(body_parts))
    return out


def _parse_elements(data: bytes, offset: int, end: int) -> dict[tuple[int, int], bytes]:
    elements: dict[tuple[int, int], bytes] = {}
    while offset + 8 <= end:
        group, element = struct.unpack_from("<HH", data, offset)
        vr = data[offset + 4 : offset + 6]
        if vr in _LONG_LENGTH_VRS:
            (length,) = struct.unpack_from("<I", data, offset + 8)
            value_start = offset + 12
        elif vr.isalpha() and vr.isupper():
            (length,) = struct.unpack_from("<H", data, offset + 6)
            value_start = offset + 8
        else:
            raise DomainError("unreadable_image", "implicit VR or corrupt element encoding")
        if length == 0xFFFFFFFF:
            raise DomainError("unreadable_image", "undefined-length elements not supported")
        value_end = value_start + length
        if value_end > end:
            raise DomainError("unreadable_image", "element length overruns file")
        elements[(group, element)] = data[value_start:value_end]
        offset = value_end
    return elements


def read_dicom(path: str | Path) -> tuple[int, int, bytes, dict[str, object]]:
    """Decode a DICOM file; returns (width, height, 8-bit pixel bytes, metadata).

    16-bit pixel data is downscaled to 8 bits by dropping the low byte.
    Raises ``unreadable_image`` on anything outside the supported subset.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 132 or raw[128:132] != b"DICM":
        raise DomainError("unreadable_image", f"{path} is not a DICOM part-10 file")

    # File meta group: group length element first, always explicit VR LE.
    group, element = struct.unpack_from("<HH", raw, 132)
    if (group, element) != (0x0002, 0x0000) or raw[136:138] != b"UL":
        raise DomainError("unreadable_image", "missing file meta group length")
    (meta_len,) = struct.unpack_from("<I", raw, 140)
    meta_end = 144 + meta_len
    meta = _parse_elements(raw, 144, meta_end)
    syntax = meta.get(TAG_TRANSFER_SYNTAX, b"").rstrip(b"\x00").decode("ascii", "replace")
    if syntax != EXPLICIT_VR_LE:
        raise DomainError("unreadable_image", f"unsupported transfer syntax {syntax!r}")

    body = _parse_elements(raw, meta_end, len(raw))
    try:
        (rows,) = struct.unpack("<H", body[TAG_ROWS])
        (cols,) = struct.unpack("<H", body[TAG_COLUMNS])
        (bits,) = struct.unpack("<H", body[TAG_BITS_ALLOCATED])
        pixels = body[TAG_PIXEL_DATA]
    except (KeyError, struct.error) as exc:
        raise DomainError("unreadable_image", f"missing image elements: {exc}") from exc
    if bits not in (8, 16):
        raise DomainError("unreadable_image", f"unsupported bits allocated: {bits}")

    needed = rows * cols * (bits // 8)
    if len(pixels) < needed:
        raise DomainError("unreadable_image", "pixel data shorter than rows*columns")
    pixels = pixels[:needed]
    if bits == 16:
        pixels = bytes(pixels[i + 1] for i in range(0, len(pixels), 2))  # keep high byte (LE)

    metadata: dict[str, object] = {
        "rows": rows,
        "columns": cols,
        "bits_allocated": bits,
        "photometric": body.get(TAG_PHOTOMETRIC, b"").strip().decode("ascii", "replace"),
    }
    view = body.get(TAG_VIEW_POSITION)
    if view is not None:
        metadata["view_position"] = view.strip().decode("ascii", "replace")
    return cols, rows, pixels, metadata
