import json
import logging

import numpy as np
import pytest
from PIL import Image

from mmfs_exporter.cli import main
from mmfs_exporter.encoders import StubImageEncoder, StubTextEncoder
from mmfs_exporter.export import ExportError, discover_corpus, export

# the primary engine is only touched through its public dataset loader,
# which is the contract under test
from mmfew.mmfs import load_dataset


def build_corpus(root, n_classes=5, n_images=3, long_class=None):
    descriptions = {}
    rng = np.random.default_rng(0)
    for c in range(n_classes):
        name = f"species_{c}"
        d = root / "corpus" / name
        d.mkdir(parents=True)
        for i in range(n_images):
            img = Image.fromarray(
                rng.integers(0, 255, (8, 8, 3), dtype=np.uint8), "RGB"
            )
            img.save(d / f"img_{i}.png")
        words = ["stripy"] * (80 if name == long_class else 5)
        descriptions[name] = f"{name} is " + " ".join(words)
    desc_path = root / "descriptions.json"
    desc_path.write_text(json.dumps(descriptions))
    return root / "corpus", desc_path


def test_stub_export_loads_in_primary_engine_bit_identical(tmp_path):
    corpus_dir, desc_path = build_corpus(tmp_path)
    corpus = discover_corpus(corpus_dir, desc_path)
    image_enc, text_enc = StubImageEncoder(), StubTextEncoder()
    export(corpus, tmp_path / "out", image_enc, text_enc)

    records, split = load_dataset(tmp_path / "out")
    assert len(records) == 5
    for rec, cls in zip(records, corpus.classes):
        assert rec.name == cls.name
        expected_text, _ = text_enc.encode(cls.description)
        assert np.array_equal(rec.text_embedding, expected_text.astype(np.float64))
        for row, path in zip(rec.image_embeddings, cls.image_paths):
            expected = image_enc.encode(path.read_bytes()).astype(np.float64)
            assert np.array_equal(row, expected)
    assert set(split.train) | set(split.val) | set(split.test) == {r.class_id for r in records}


def test_overlong_description_truncated_and_logged(tmp_path, caplog):
    corpus_dir, desc_path = build_corpus(tmp_path, long_class="species_2")
    corpus = discover_corpus(corpus_dir, desc_path)
    with caplog.at_level(logging.WARNING, logger="mmfs_exporter"):
        manifest_path = export(corpus, tmp_path / "out", StubImageEncoder(), StubTextEncoder())
    assert any("truncated" in r.message for r in caplog.records)
    manifest = json.loads(manifest_path.read_text())
    assert manifest["metadata"]["truncated_classes"] == ["species_2"]
    # truncation matters: same prefix + different tails embed identically
    enc = StubTextEncoder()
    base = "word " * enc.max_tokens
    a, ta = enc.encode(base + "alpha")
    b, tb = enc.encode(base + "beta")
    assert ta and tb and np.array_equal(a, b)


def test_reexport_byte_stable_modulo_timestamp(tmp_path):
    corpus_dir, desc_path = build_corpus(tmp_path)
    corpus = discover_corpus(corpus_dir, desc_path)
    for name in ("a", "b"):
        export(corpus, tmp_path / name, StubImageEncoder(), StubTextEncoder())
    bin_a = (tmp_path / "a" / "embeddings.bin").read_bytes()
    bin_b = (tmp_path / "b" / "embeddings.bin").read_bytes()
    assert bin_a == bin_b
    man_a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    man_b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    man_a["metadata"].pop("created_at")
    man_b["metadata"].pop("created_at")
    assert man_a == man_b


def test_corrupt_image_skipped_with_warning(tmp_path, caplog):
    corpus_dir, desc_path = build_corpus(tmp_path, n_images=3)
    (corpus_dir / "species_1" / "img_1.png").write_bytes(b"not an image")
    corpus = discover_corpus(corpus_dir, desc_path)
    with caplog.at_level(logging.WARNING, logger="mmfs_exporter"):
        manifest_path = export(corpus, tmp_path / "out", StubImageEncoder(), StubTextEncoder())
    assert any("undecodable" in r.message for r in caplog.records)
    manifest = json.loads(manifest_path.read_text())
    by_name = {c["name"]: c for c in manifest["classes"]}
    assert by_name["species_1"]["n_images"] == 2
    assert by_name["species_0"]["n_images"] == 3
    records, _ = load_dataset(tmp_path / "out")
    assert {r.name: r.image_embeddings.shape[0] for r in records}["species_1"] == 2


def test_class_losing_all_images_hard_fails(tmp_path):
    corpus_dir, desc_path = build_corpus(tmp_path, n_images=1)
    (corpus_dir / "species_3" / "img_0.png").write_bytes(b"junk")
    corpus = discover_corpus(corpus_dir, desc_path)
    with pytest.raises(ExportError):
        export(corpus, tmp_path / "out", StubImageEncoder(), StubTextEncoder())


def test_missing_description_rejected(tmp_path):
    corpus_dir, desc_path = build_corpus(tmp_path, n_classes=3)
    descs = json.loads(desc_path.read_text())
    del descs["species_1"]
    desc_path.write_text(json.dumps(descs))
    with pytest.raises(ExportError):
        discover_corpus(corpus_dir, desc_path)


def test_cli_stub_round_trip(tmp_path, capsys):
    corpus_dir, desc_path = build_corpus(tmp_path)
    rc = main([
        "--corpus", str(corpus_dir), "--descriptions", str(desc_path),
        "--out", str(tmp_path / "out"), "--stub",
    ])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    records, _ = load_dataset(tmp_path / "out")
    assert len(records) == 5
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["metadata"]["image_encoder"] == "stub-image"


def test_cli_error_exit_code(tmp_path, capsys):
    rc = main([
        "--corpus", str(tmp_path / "missing"), "--descriptions", str(tmp_path / "d.json"),
        "--out", str(tmp_path / "out"), "--stub",
    ])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["type"] == "ExportError"
