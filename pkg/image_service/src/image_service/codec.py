"""DICOM decoding for the reference service.

Supports the explicit-VR little-endian transfer syntax with uncompressed
monochrome pixel data (8 or 16 bit). Files outside that subset raise
:class:`ImageError` with code ``unreadable_image``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator


class ImageError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
_FOUR_BYTE_LENGTH_VRS = frozenset((b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN"))


def _walk_elements(buffer: bytes, start: int, stop: int) -> Iterator[tuple[tuple[int, int], bytes]]:
    cursor = start
    while cursor + 8 <= stop:
        group, element = struct.unpack_from("<HH", buffer, cursor)
        vr = buffer[cursor + 4 : cursor + 6]
        if vr in _FOUR_BYTE_LENGTH_VRS:
            (length,) = struct.unpack_from("<I", buffer, cursor + 8)
            cursor += 12
        elif vr.isalpha() and vr.isupper():
            (length,) = struct.unpack_from("<H", buffer, cursor + 6)
            cursor += 8
        else:
            raise ImageError("unreadable_image", "element is not explicit VR")
        if length == 0xFFFFFFFF:
            raise ImageError("unreadable_image", "undefined-length element unsupported")
        if cursor + length > stop:
            raise ImageError("unreadable_image", "element overruns the file")
        yield (group, element), buffer[cursor : cursor + length]
        cursor += length


def decode_dicom(path: str | Path) -> tuple[int, int, bytes, dict[str, object]]:
    """Return (width, height, 8-bit grayscale pixels, metadata)."""
    buffer = Path(path).read_bytes()
    if len(buffer) < 132 or buffer[128:132] != b"DICM":
        raise ImageError("unreadable_image", f"{path} lacks the DICM magic")

    head_tag = struct.unpack_from("<HH", buffer, 132)
    if head_tag != (0x0002, 0x0000) or buffer[136:138] != b"UL":
        raise ImageError("unreadable_image", "file meta group length missing")
    (meta_length,) = struct.unpack_from("<I", buffer, 140)
    meta_stop = 144 + meta_length

    transfer_syntax = ""
    for tag, value in _walk_elements(buffer, 144, meta_stop):
        if tag == (0x0002, 0x0010):
            transfer_syntax = value.rstrip(b"\x00").decode("ascii", "replace")
    if transfer_syntax != EXPLICIT_VR_LE:
        raise ImageError("unreadable_image", f"unsupported transfer syntax {transfer_syntax!r}")

    rows = columns = bits = None
    photometric = ""
    view_position = None
    pixels = None
    for tag, value in _walk_elements(buffer, meta_stop, len(buffer)):
        if tag == (0x0028, 0x0010):
            (rows,) = struct.unpack("<H", value)
        elif tag == (0x0028, 0x0011):
            (columns,) = struct.unpack("<H", value)
        elif tag == (0x0028, 0x0100):
            (bits,) = struct.unpack("<H", value)
        elif tag == (0x0028, 0x0004):
            photometric = value.strip().decode("ascii", "replace")
        elif tag == (0x0018, 0x5101):
            view_position = value.strip().decode("ascii", "replace")
        elif tag == (0x7FE0, 0x0010):
            pixels = value

    if rows is None or columns is None or bits is None or pixels is None:
        raise ImageError("unreadable_image", "rows/columns/bits/pixel data incomplete")
    if bits not in (8, 16):
        raise ImageError("unreadable_image", f"unsupported bits allocated: {bits}")
    needed = rows * columns * (bits // 8)
    if len(pixels) < needed:
        raise ImageError("unreadable_image", "pixel data shorter than rows*columns")
    pixels = pixels[:needed]
    if bits == 16:
        pixels = pixels[1::2]  # little endian: keep the high byte of each sample

    metadata: dict[str, object] = {
        "rows": rows,
        "columns": columns,
        "bits_allocated": bits,
        "photometric": photometric,
    }
    if view_position is not None:
        metadata["view_position"] = view_position
    return columns, rows, pixels, metadata
