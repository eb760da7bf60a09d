"""Run a frozen encoder pair over an image folder + caption table and write
the interchange files: images.bin, texts.bin, manifest.tsv under one prefix."""
import pathlib
import sys
from dataclasses import dataclass

import numpy as np
import PIL

from .encoders import build_encoder, preprocess_image
from .formats import (check_embedding_file, check_manifest, write_embedding_file,
                      write_manifest)


class MissingImage(Exception):
    pass


class ModelLoadFailure(Exception):
    pass


def _log(msg: str) -> None:
    print(f"[grove-extract] {msg}", file=sys.stderr)


@dataclass
class ExtractJob:
    model: str
    image_dir: str
    caption_file: str
    out_prefix: str
    device: str = "cpu"
    batch_size: int = 8
    normalize: bool = False
    random_init: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def read_caption_table(path) -> dict:
    """TSV of filename<TAB>caption, one caption per line; returns an ordered
    filename -> list-of-captions map. Blank captions are dropped."""
    table: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"caption table line {lineno}: expected "
                                 f"filename<TAB>caption, got {len(parts)} fields")
            name, caption = parts
            table.setdefault(name, [])
            if caption.strip():
                table[name].append(caption.strip())
    return table


def output_paths(prefix) -> tuple:
    prefix = str(prefix)
    return (pathlib.Path(prefix + ".images.bin"),
            pathlib.Path(prefix + ".texts.bin"),
            pathlib.Path(prefix + ".manifest.tsv"))


def extract(job: ExtractJob) -> dict:
    job.validate()
    table = read_caption_table(job.caption_file)

    kept, dropped = [], 0
    for name, captions in table.items():
        if captions:
            kept.append((name, captions))
        else:
            dropped += 1
            _log(f"warning: {name} has no captions; excluded")
    if not kept:
        raise ValueError("caption table holds no captioned images")

    image_dir = pathlib.Path(job.image_dir)
    for name, _ in kept:
        if not (image_dir / name).is_file():
            raise MissingImage(f"caption table references {name}, not found "
                               f"under {image_dir}")

    try:
        encoder = build_encoder(job.model, job.device, job.random_init, job.seed)
    except (OSError, EnvironmentError, ValueError) as exc:
        if isinstance(exc, ValueError) and "unknown model" in str(exc):
            raise
        raise ModelLoadFailure(f"could not load {job.model}: {exc}") from exc

    pixels = []
    for name, _ in kept:
        try:
            pixels.append(preprocess_image(image_dir / name, encoder.image_size))
        except (OSError, PIL.UnidentifiedImageError) as exc:
            raise MissingImage(f"cannot decode {name}: {exc}") from exc

    image_rows = []
    for start in range(0, len(pixels), job.batch_size):
        batch = np.stack(pixels[start:start + job.batch_size])
        image_rows.append(encoder.encode_image_batch(batch))
    image_matrix = np.vstack(image_rows)

    texts, records = [], []
    for img_idx, (name, captions) in enumerate(kept):
        group = pathlib.Path(name).stem
        for k, caption in enumerate(captions):
            records.append((f"{group}#{k}", img_idx, len(texts), group, "train"))
            texts.append(caption)
    text_rows = []
    for start in range(0, len(texts), job.batch_size):
        text_rows.append(encoder.encode_text_batch(texts[start:start + job.batch_size]))
    text_matrix = np.vstack(text_rows)

    if job.normalize:
        image_matrix = image_matrix / np.linalg.norm(image_matrix, axis=1, keepdims=True)
        text_matrix = text_matrix / np.linalg.norm(text_matrix, axis=1, keepdims=True)

    img_path, txt_path, man_path = output_paths(job.out_prefix)
    img_path.parent.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        write_embedding_file(image_matrix, img_path)
        written.append(img_path)
        write_embedding_file(text_matrix, txt_path)
        written.append(txt_path)
        write_manifest(records, man_path)
        written.append(man_path)
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise

    if dropped:
        _log(f"{dropped} image(s) excluded for having no captions")
    return {
        "model": job.model,
        "images": int(image_matrix.shape[0]),
        "texts": int(text_matrix.shape[0]),
        "dim": int(image_matrix.shape[1]),
        "pairs": len(records),
        "excluded": dropped,
        "normalized": job.normalize,
        "outputs": [str(p) for p in (img_path, txt_path, man_path)],
    }


def validate(prefix) -> dict:
    """Check the three files under a prefix for structural consistency."""
    img_path, txt_path, man_path = output_paths(prefix)
    n_img, d_img = check_embedding_file(img_path)
    n_txt, d_txt = check_embedding_file(txt_path)
    if d_img != d_txt:
        raise ValueError(f"dimension mismatch: images d={d_img}, texts d={d_txt}")
    for path, n, d in ((img_path, n_img, d_img), (txt_path, n_txt, d_txt)):
        with open(path, "rb") as fh:
            fh.seek(24)
            mat = np.frombuffer(fh.read(), dtype="<f4").reshape(n, d)
        norms = np.linalg.norm(mat.astype(np.float64), axis=1)
        if not np.all(np.isfinite(norms)) or np.any(norms == 0.0):
            raise ValueError(f"{path}: embedding rows must have finite nonzero norms")
    rows = check_manifest(man_path, n_img, n_txt)
    return {
        "images": {"n": n_img, "d": d_img},
        "texts": {"n": n_txt, "d": d_txt},
        "manifest_rows": rows,
        "ok": True,
    }
