"""Extractor contract tests: formats, caption policy, end-to-end export.

The heavyweight encoder is instantiated once (seeded random weights, no
downloads) and shared across the file-producing tests.
"""
import json
import pathlib
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from grove_extractor import cli as xcli
from grove_extractor.encoders import HashTokenizer, build_encoder, preprocess_image
from grove_extractor.extract import (ExtractJob, MissingImage, extract,
                                     read_caption_table, validate)
from grove_extractor.formats import (check_embedding_file, check_manifest,
                                     write_embedding_file, write_manifest)

from grove.dataio import read_embeddings, read_manifest


def write_noise_image(path, seed, size=(80, 60)):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
    Image.fromarray(arr).save(path)


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    (root / "imgs").mkdir()
    for i in range(4):
        write_noise_image(root / "imgs" / f"pic{i}.png", seed=i, size=(70 + 6 * i, 50))
    lines = []
    for i in range(4):
        lines.append(f"pic{i}.png\ta photo number {i} of colored noise")
        lines.append(f"pic{i}.png\tstatic pattern {i} in a frame")
    (root / "caps.tsv").write_text("\n".join(lines) + "\n")
    return root


@pytest.fixture(scope="module")
def extracted(fixture_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("out")
    job = ExtractJob(model="clip-vitb32", image_dir=str(fixture_dir / "imgs"),
                     caption_file=str(fixture_dir / "caps.tsv"),
                     out_prefix=str(out / "demo"), random_init=True, seed=0)
    summary = extract(job)
    return out / "demo", summary


# ------------------------------------------------------------- file format

def test_embedding_file_roundtrip(tmp_path):
    m = np.arange(12, dtype=np.float64).reshape(3, 4) / 7.0
    write_embedding_file(m, tmp_path / "e.bin")
    assert check_embedding_file(tmp_path / "e.bin") == (3, 4)


def test_check_catches_bad_magic(tmp_path):
    p = tmp_path / "e.bin"
    write_embedding_file(np.zeros((2, 2)), p)
    blob = bytearray(p.read_bytes())
    blob[:4] = b"WXYZ"
    p.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="magic"):
        check_embedding_file(p)


def test_check_catches_truncation(tmp_path):
    p = tmp_path / "e.bin"
    write_embedding_file(np.zeros((2, 2)), p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError, match="payload"):
        check_embedding_file(p)


def test_manifest_bounds_checked(tmp_path):
    p = tmp_path / "m.tsv"
    write_manifest([("a#0", 0, 0, "a", "train"), ("a#1", 0, 5, "a", "train")], p)
    with pytest.raises(ValueError, match="line 2"):
        check_manifest(p, n_images=1, n_texts=2)


def test_manifest_group_consistency(tmp_path):
    p = tmp_path / "m.tsv"
    write_manifest([("a#0", 0, 0, "a", "train"), ("b#0", 0, 1, "b", "train")], p)
    with pytest.raises(ValueError, match="groups"):
        check_manifest(p, n_images=1, n_texts=2)


# ---------------------------------------------------------- caption policy

def test_caption_table_groups_and_order(tmp_path):
    p = tmp_path / "caps.tsv"
    p.write_text("b.png\tsecond image first line\n"
                 "a.png\tfirst image\n"
                 "b.png\tsecond image again\n\n")
    table = read_caption_table(p)
    assert list(table) == ["b.png", "a.png"]
    assert table["b.png"] == ["second image first line", "second image again"]


def test_blank_caption_dropped(tmp_path):
    p = tmp_path / "caps.tsv"
    p.write_text("a.png\t   \na.png\treal caption\n")
    assert read_caption_table(p)["a.png"] == ["real caption"]


def test_missing_image_aborts_cleanly(fixture_dir, tmp_path):
    caps = tmp_path / "caps.tsv"
    caps.write_text("pic0.png\tfine\nghost.png\talso listed\n")
    job = ExtractJob(model="clip-vitb32", image_dir=str(fixture_dir / "imgs"),
                     caption_file=str(caps), out_prefix=str(tmp_path / "x"),
                     random_init=True)
    with pytest.raises(MissingImage, match="ghost.png"):
        extract(job)
    assert not list(tmp_path.glob("x.*"))


def test_captionless_image_excluded(fixture_dir, tmp_path, capsys):
    caps = tmp_path / "caps.tsv"
    caps.write_text("pic0.png\tonly captioned image\npic1.png\t \n")
    job = ExtractJob(model="clip-vitb32", image_dir=str(fixture_dir / "imgs"),
                     caption_file=str(caps), out_prefix=str(tmp_path / "x"),
                     random_init=True)
    summary = extract(job)
    assert summary["images"] == 1 and summary["excluded"] == 1
    assert "pic1.png" in capsys.readouterr().err


# ------------------------------------------------------------- components

def test_preprocess_shape_and_range(fixture_dir):
    arr = preprocess_image(fixture_dir / "imgs" / "pic0.png", 224)
    assert arr.shape == (3, 224, 224)
    assert np.isfinite(arr).all()
    assert arr.std() > 0.1


def test_hash_tokenizer_deterministic_and_bounded():
    tok = HashTokenizer(1000, bos_id=1, eos_id=2, pad_id=0)
    ids_a, mask_a = tok(["a small test sentence", "short"])
    ids_b, _ = tok(["a small test sentence", "short"])
    assert (ids_a == ids_b).all()
    assert ids_a.max() < 1000 and ids_a.min() >= 0
    assert mask_a[1].sum() < mask_a[0].sum()


def test_unknown_model_rejected():
    with pytest.raises(ValueError, match="unknown model"):
        build_encoder("resnet50", random_init=True)


# ------------------------------------------------------- end-to-end + A8

def test_extract_summary_counts(extracted):
    _, summary = extracted
    assert summary["images"] == 4
    assert summary["texts"] == 8
    assert summary["dim"] == 512
    assert summary["pairs"] == 8


def test_validate_passes_on_fresh_output(extracted):
    prefix, _ = extracted
    report = validate(prefix)
    assert report["ok"] and report["manifest_rows"] == 8


def test_validate_names_corrupted_file(extracted, tmp_path):
    prefix, _ = extracted
    for name in ("images.bin", "texts.bin", "manifest.tsv"):
        src = pathlib.Path(f"{prefix}.{name}")
        (tmp_path / f"v.{name}").write_bytes(src.read_bytes())
    bad = tmp_path / "v.images.bin"
    blob = bytearray(bad.read_bytes())
    blob[:4] = b"NOPE"
    bad.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="images.bin"):
        validate(tmp_path / "v")


def test_deterministic_across_runs(fixture_dir, tmp_path):
    jobs = []
    for tag in ("a", "b"):
        job = ExtractJob(model="clip-vitb32",
                         image_dir=str(fixture_dir / "imgs"),
                         caption_file=str(fixture_dir / "caps.tsv"),
                         out_prefix=str(tmp_path / tag), random_init=True,
                         seed=3)
        extract(job)
        jobs.append(tmp_path / f"{tag}.images.bin")
    assert jobs[0].read_bytes() == jobs[1].read_bytes()


def test_acceptance_a8_extractor_contract(extracted, tmp_path):
    """A8: extract -> primary validators pass with d=512 -> 2-epoch train."""
    prefix, summary = extracted
    image, img_meta = read_embeddings(f"{prefix}.images.bin")
    text, txt_meta = read_embeddings(f"{prefix}.texts.bin")
    assert img_meta["d"] == 512 and txt_meta["d"] == 512
    assert img_meta["n"] == 4 and txt_meta["n"] == 8
    ds = read_manifest(f"{prefix}.manifest.tsv", f"{prefix}.images.bin",
                       f"{prefix}.texts.bin")
    assert len(ds.records) == 8 and len(ds.groups()) == 4

    config = tmp_path / "train.cfg"
    config.write_text("epochs=2\nbatch_size=8\nq_dim=2\nm_inducing=8\n"
                      "learning_rate=0.01\nlambda1=0.01\nlambda2=1.0\nseed=0\n")
    ckpt = tmp_path / "model.ckpt"
    proc = subprocess.run(
        [sys.executable, "-m", "grove.cli", "train",
         "--images", f"{prefix}.images.bin", "--texts", f"{prefix}.texts.bin",
         "--manifest", f"{prefix}.manifest.tsv", "--config", str(config),
         "--out", str(ckpt)],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    out = json.loads(proc.stdout)
    assert out["epochs"] == 2 and out["n_pairs"] == 8
    assert ckpt.is_file()
    print("A8 extractor contract: PASS")


def test_cli_validate_roundtrip(extracted, capsys):
    prefix, _ = extracted
    rc = xcli.main(["validate", "--prefix", str(prefix)])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["images"]["d"] == 512
