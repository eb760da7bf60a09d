"""Writers (and check-only readers) for the embedding/manifest interchange files.

The byte layout is the consumer's contract:

    magic "GRVE" | u16 version=1 | u8 dtype=1 (f32) | u8 reserved=0
    | u64 n | u64 d | n*d float32, little-endian, row-major

The manifest is a 5-field TSV: pair_id, image_row, text_row, group_id, split.
This module deliberately re-states the layout instead of importing the
consumer package: the two components only meet at the files.
"""
import struct

import numpy as np

MAGIC = b"GRVE"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sHBBQQ")


def write_embedding_file(matrix, path) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got {m.ndim}-D")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, 0, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def check_embedding_file(path) -> tuple:
    """Validate header/payload consistency; return (n, d)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, dtype, _, n, d = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise ValueError(f"{path}: unsupported dtype code {dtype}")
    want = _HEADER.size + 4 * n * d
    if len(blob) != want:
        raise ValueError(f"{path}: payload is {len(blob)} bytes, expected {want}")
    return n, d


def write_manifest(records, path) -> None:
    """records: iterable of (pair_id, image_row, text_row, group_id, split)."""
    lines = ["\t".join(str(f) for f in rec) for rec in records]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def check_manifest(path, n_images: int, n_texts: int) -> int:
    """Validate field count, row bounds, and group consistency; return #rows."""
    group_of_image: dict = {}
    count = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise ValueError(f"{path}: line {lineno}: expected 5 fields, "
                                 f"got {len(fields)}")
            _, image_s, text_s, group, _ = fields
            try:
                image_row, text_row = int(image_s), int(text_s)
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-integer row index") from None
            if not 0 <= image_row < n_images:
                raise ValueError(f"{path}: line {lineno}: image_row {image_row} "
                                 f"outside [0, {n_images})")
            if not 0 <= text_row < n_texts:
                raise ValueError(f"{path}: line {lineno}: text_row {text_row} "
                                 f"outside [0, {n_texts})")
            seen = group_of_image.setdefault(image_row, group)
            if seen != group:
                raise ValueError(f"{path}: line {lineno}: image {image_row} "
                                 f"appears in groups {seen!r} and {group!r}")
            count += 1
    return count
