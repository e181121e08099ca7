"""Corpus discovery and MMFS v1 export.

Corpus layout: one subdirectory per class under the corpus root, each
holding that class's image files; a descriptions JSON maps class names
to description strings. Classes are assigned ids in sorted-name order,
so re-export is byte-stable (the manifest's created_at timestamp is the
only varying field).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger("mmfs_exporter")

FORMAT_NAME = "mmfs"
FORMAT_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


class ExportError(RuntimeError):
    pass


@dataclass
class CorpusClass:
    name: str
    description: str
    image_paths: list[Path]


@dataclass
class CorpusManifest:
    root: Path
    classes: list[CorpusClass]


def discover_corpus(corpus_dir, descriptions_path) -> CorpusManifest:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise ExportError(f"corpus directory not found: {root}")
    try:
        descriptions = json.loads(Path(descriptions_path).read_text())
    except FileNotFoundError:
        raise ExportError(f"descriptions file not found: {descriptions_path}") from None
    except json.JSONDecodeError as e:
        raise ExportError(f"descriptions file is not valid JSON: {e}") from None
    classes = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        name = class_dir.name
        images = sorted(
            p for p in class_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        desc = descriptions.get(name, "")
        if not desc.strip():
            raise ExportError(f"class {name!r} has no description")
        if not images:
            raise ExportError(f"class {name!r} has no images")
        classes.append(CorpusClass(name=name, description=desc, image_paths=images))
    if not classes:
        raise ExportError(f"no class directories under {root}")
    return CorpusManifest(root=root, classes=classes)


def _decode_ok(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except (UnidentifiedImageError, OSError):
        return False


def export(corpus: CorpusManifest, out_dir, image_encoder, text_encoder) -> Path:
    """Encode the corpus and write manifest.json + embeddings.bin.

    Undecodable images are skipped with a warning (n_images shrinks); a
    class losing every image is a hard failure. Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chunks: list[bytes] = []
    offset = 0
    entries = []
    truncated_classes = []
    skipped_files = []
    for cls in corpus.classes:
        text_vec, truncated = text_encoder.encode(cls.description)
        if truncated:
            truncated_classes.append(cls.name)
            log.warning("description for class %r exceeded the encoder maximum; truncated", cls.name)
        image_vecs = []
        for path in cls.image_paths:
            if not _decode_ok(path):
                skipped_files.append(str(path))
                log.warning("skipping undecodable image %s", path)
                continue
            image_vecs.append(image_encoder.encode(path.read_bytes()))
        if not image_vecs:
            raise ExportError(f"class {cls.name!r} lost all images to decode failures")
        text32 = np.asarray(text_vec, dtype="<f4")
        images32 = np.stack(image_vecs).astype("<f4")
        text_offset = offset
        offset += text32.size
        image_offset = offset
        offset += images32.size
        chunks.append(text32.tobytes())
        chunks.append(images32.tobytes())
        entries.append({
            "id": len(entries),
            "name": cls.name,
            "n_images": int(images32.shape[0]),
            "text_offset": text_offset,
            "image_offset": image_offset,
        })
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "image_dim": int(image_encoder.dim),
        "text_dim": int(text_encoder.dim),
        "classes": entries,
        "metadata": {
            "image_encoder": image_encoder.name,
            "text_encoder": text_encoder.name,
            "text_embedding": "pooled sentence representation",
            "image_embedding": "penultimate feature vector",
            "truncated_classes": truncated_classes,
            "skipped_files": skipped_files,
            "created_at": datetime.now(timezone.utc).isoformat(),
        },
    }
    (out / "embeddings.bin").write_bytes(b"".join(chunks))
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path
