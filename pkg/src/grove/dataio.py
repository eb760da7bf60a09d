"""Bit-exact on-disk formats: embedding matrices, pair manifests, checkpoints.

Three deliberately minimal formats, all little-endian regardless of host:

  embeddings   "GRVE" | u16 version=1 | u8 dtype=1 (f32) | u8 reserved=0
               | u64 n | u64 d | n*d f32 row-major
  manifest     TSV, one record per line, five fields:
               pair_id, image_row, text_row, group_id, split(train|val|test);
               blank lines skipped, no header line
  checkpoint   u64 header length | JSON header (format version, training
               config echo, tensor directory) | concatenated f64 tensors
               in directory order

Embeddings are f32 on disk (encoder output precision) and promoted to f64
for the numerics core; checkpoints stay f64 so a reloaded model reproduces
training state bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (BadHeader, BadMagic, BadSplitLabel, BadVersion,
                     InconsistentGroup, IndexOutOfRange, ShapeMismatch,
                     TruncatedPayload, UnsupportedDtype)
from .gplvm import TENSOR_NAMES, GroveModel, TrainConfig, assemble_model

MAGIC = b"GRVE"
EMBEDDING_VERSION = 1
DTYPE_F32 = 1
CHECKPOINT_VERSION = 1
SPLITS = ("train", "val", "test")

_HEADER = struct.Struct("<4sHBBQQ")     # magic, version, dtype, reserved, n, d


def write_embeddings(matrix, path) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeMismatch(f"embedding matrix must be 2-D, got shape {matrix.shape}")
    n, d = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, EMBEDDING_VERSION, DTYPE_F32, 0, n, d))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_embeddings(path):
    """Returns (matrix promoted to f64, metadata dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise TruncatedPayload(
            f"{path}: file is {len(blob)} bytes, header needs {_HEADER.size}"
        )
    magic, version, dtype, _reserved, n, d = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise BadVersion(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtype(f"{path}: unsupported dtype code {dtype}")
    expected = _HEADER.size + 4 * n * d
    if len(blob) != expected:
        raise TruncatedPayload(
            f"{path}: expected {expected} bytes for {n}x{d}, found {len(blob)}"
        )
    payload = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    matrix = payload.reshape(n, d).astype(np.float64)
    return matrix, {"n": int(n), "d": int(d), "version": version, "dtype": "f32"}


# ------------------------------------------------------------------ manifests

@dataclass(frozen=True)
class ManifestRecord:
    pair_id: str
    image_row: int
    text_row: int
    group_id: str
    split: str


@dataclass
class EmbeddingDataset:
    """Validated paired data: every index is known to be in range and every
    group maps to exactly one image row."""
    image: np.ndarray
    text: np.ndarray
    records: list

    def split_indices(self, split: str) -> list:
        if split not in SPLITS:
            raise BadSplitLabel(f"unknown split {split!r}")
        return [i for i, r in enumerate(self.records) if r.split == split]

    def groups(self) -> dict:
        """group_id -> list of record indices, in file order."""
        out: dict = {}
        for i, r in enumerate(self.records):
            out.setdefault(r.group_id, []).append(i)
        return out

    def subset(self, split: str) -> "EmbeddingDataset":
        keep = [self.records[i] for i in self.split_indices(split)]
        return EmbeddingDataset(image=self.image, text=self.text, records=keep)


def _parse_manifest_line(line: str, lineno: int) -> ManifestRecord:
    fields = line.split("\t")
    if len(fields) != 5:
        raise BadHeader(
            f"manifest line {lineno}: expected 5 tab-separated fields, got {len(fields)}"
        )
    pair_id, image_s, text_s, group_id, split = fields
    try:
        image_row = int(image_s)
        text_row = int(text_s)
    except ValueError:
        raise BadHeader(
            f"manifest line {lineno}: image_row and text_row must be integers"
        ) from None
    if split not in SPLITS:
        raise BadSplitLabel(
            f"manifest line {lineno}: split must be one of {SPLITS}, got {split!r}"
        )
    return ManifestRecord(pair_id, image_row, text_row, group_id, split)


def read_manifest(path, image_file, text_file) -> EmbeddingDataset:
    image, _ = read_embeddings(image_file)
    text, _ = read_embeddings(text_file)
    records = []
    group_image: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            rec = _parse_manifest_line(line, lineno)
            if not 0 <= rec.image_row < image.shape[0]:
                raise IndexOutOfRange(
                    f"manifest line {lineno}: image_row {rec.image_row} outside "
                    f"[0, {image.shape[0]})"
                )
            if not 0 <= rec.text_row < text.shape[0]:
                raise IndexOutOfRange(
                    f"manifest line {lineno}: text_row {rec.text_row} outside "
                    f"[0, {text.shape[0]})"
                )
            prior = group_image.setdefault(rec.group_id, rec.image_row)
            if prior != rec.image_row:
                raise InconsistentGroup(
                    f"manifest line {lineno}: group {rec.group_id!r} maps to "
                    f"image rows {prior} and {rec.image_row}"
                )
            records.append(rec)
    return EmbeddingDataset(image=image, text=text, records=records)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: GroveModel, path) -> None:
    if model.config is None:
        raise ValueError("model carries no training config to echo")
    params = model.parameters()
    directory = {}
    offset = 0
    for name in TENSOR_NAMES:
        arr = np.asarray(params[name], dtype=np.float64)
        directory[name] = {"offset": offset, "shape": list(arr.shape), "dtype": "f64"}
        offset += 8 * arr.size
    header = json.dumps({
        "format": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "tensors": directory,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in TENSOR_NAMES:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> GroveModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise TruncatedPayload(f"{path}: file too short for header length")
    (header_len,) = struct.unpack_from("<Q", blob)
    if 8 + header_len > len(blob):
        raise BadHeader(
            f"{path}: header length {header_len} exceeds file size {len(blob)}"
        )
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadHeader(f"{path}: unreadable header: {exc}") from None
    for key in ("format", "config", "tensors"):
        if key not in header:
            raise BadHeader(f"{path}: header missing {key!r}")
    if header["format"] != CHECKPOINT_VERSION:
        raise BadVersion(f"{path}: unsupported checkpoint format {header['format']}")
    try:
        config = TrainConfig(**header["config"]).validate()
    except (TypeError, ValueError) as exc:
        raise BadHeader(f"{path}: bad config echo: {exc}") from None

    payload = blob[8 + header_len:]
    tensors = {}
    for name in TENSOR_NAMES:
        entry = header["tensors"].get(name)
        if entry is None:
            raise BadHeader(f"{path}: tensor directory missing {name!r}")
        shape = tuple(int(s) for s in entry["shape"])
        if entry.get("dtype") != "f64":
            raise BadHeader(f"{path}: tensor {name} has dtype {entry.get('dtype')!r}")
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        stop = start + 8 * count
        if start < 0 or stop > len(payload):
            raise TruncatedPayload(
                f"{path}: tensor {name} spans bytes [{start}, {stop}) of a "
                f"{len(payload)}-byte payload"
            )
        tensors[name] = np.frombuffer(
            payload[start:stop], dtype="<f8"
        ).reshape(shape).copy()
    return assemble_model(config, tensors)
