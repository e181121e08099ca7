"""MMFS v1 cached-embedding dataset format.

`manifest.json` describes classes and offsets; `embeddings.bin` holds
little-endian float32 values. Offsets count 32-bit floats from the start
of the binary: each class's text embedding (text_dim floats) lives at
text_offset, its images (n_images x image_dim floats, contiguous) at
image_offset. The loader upconverts to float64.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .episodes import ClassRecord, MetaSplit, make_meta_split

__all__ = [
    "DatasetError",
    "FormatError",
    "DimMismatch",
    "TruncatedPayload",
    "MissingDescription",
    "write_dataset",
    "load_dataset",
]

FORMAT_NAME = "mmfs"
FORMAT_VERSION = 1


class DatasetError(Exception):
    pass


class FormatError(DatasetError):
    pass


class DimMismatch(DatasetError):
    pass


class TruncatedPayload(DatasetError):
    pass


class MissingDescription(DatasetError):
    pass


def write_dataset(out_dir, records, split: MetaSplit | None = None, metadata: dict | None = None) -> Path:
    """Write records as MMFS v1; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not records:
        raise FormatError("cannot write a dataset with no classes")
    image_dim = records[0].image_embeddings.shape[1]
    text_dim = records[0].text_embedding.shape[0]
    classes = []
    chunks = []
    offset = 0
    for rec in records:
        if rec.image_embeddings.shape[1] != image_dim or rec.text_embedding.shape[0] != text_dim:
            raise DimMismatch(f"class {rec.class_id} dims differ from the first class")
        text32 = rec.text_embedding.astype("<f4")
        images32 = np.ascontiguousarray(rec.image_embeddings, dtype="<f4")
        text_offset = offset
        offset += text32.size
        image_offset = offset
        offset += images32.size
        chunks.append(text32.tobytes())
        chunks.append(images32.tobytes())
        classes.append(
            {
                "id": int(rec.class_id),
                "name": rec.name,
                "n_images": int(rec.image_embeddings.shape[0]),
                "text_offset": text_offset,
                "image_offset": image_offset,
            }
        )
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "image_dim": int(image_dim),
        "text_dim": int(text_dim),
        "classes": classes,
    }
    if split is not None:
        manifest["splits"] = {
            "train": list(split.train),
            "val": list(split.val),
            "test": list(split.test),
        }
    if metadata is not None:
        manifest["metadata"] = metadata
    (out / "embeddings.bin").write_bytes(b"".join(chunks))
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


def load_dataset(
    path,
    expect_image_dim: int | None = None,
    expect_text_dim: int | None = None,
    split_seed: int = 0,
) -> tuple[list[ClassRecord], MetaSplit]:
    """Load an MMFS v1 dataset from a manifest path or its directory.

    The split comes from the manifest when present, otherwise from
    make_meta_split over the class ids with `split_seed`.
    """
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise FormatError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"bad format tag {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported version {manifest.get('version')!r}")
    classes = manifest.get("classes")
    if not classes:
        raise FormatError("manifest declares no classes")
    image_dim = int(manifest.get("image_dim", 0))
    text_dim = int(manifest.get("text_dim", 0))
    if image_dim < 1 or text_dim < 1:
        raise DimMismatch(f"invalid dims image={image_dim} text={text_dim}")
    if expect_image_dim is not None and image_dim != expect_image_dim:
        raise DimMismatch(f"dataset image_dim {image_dim} != expected {expect_image_dim}")
    if expect_text_dim is not None and text_dim != expect_text_dim:
        raise DimMismatch(f"dataset text_dim {text_dim} != expected {expect_text_dim}")

    payload_path = manifest_path.parent / "embeddings.bin"
    if not payload_path.exists():
        raise FormatError(f"no embedding payload at {payload_path}")
    payload = np.fromfile(payload_path, dtype="<f4")
    records = []
    for entry in classes:
        for key in ("id", "name", "n_images", "image_offset"):
            if key not in entry:
                raise FormatError(f"class entry missing field {key!r}")
        if entry.get("text_offset") is None:
            raise MissingDescription(f"class {entry['id']} has no text embedding")
        t0 = int(entry["text_offset"])
        i0 = int(entry["image_offset"])
        n_images = int(entry["n_images"])
        if t0 + text_dim > payload.size or i0 + n_images * image_dim > payload.size:
            raise TruncatedPayload(
                f"class {entry['id']} embeddings extend past end of payload "
                f"({payload.size} floats)"
            )
        text = payload[t0 : t0 + text_dim].astype(np.float64)
        images = (
            payload[i0 : i0 + n_images * image_dim]
            .astype(np.float64)
            .reshape(n_images, image_dim)
        )
        records.append(
            ClassRecord(
                class_id=int(entry["id"]),
                name=str(entry["name"]),
                text_embedding=text,
                image_embeddings=images,
            )
        )

    splits = manifest.get("splits")
    if splits:
        split = MetaSplit(
            train=tuple(splits.get("train", ())),
            val=tuple(splits.get("val", ())),
            test=tuple(splits.get("test", ())),
        )
    else:
        split = make_meta_split([r.class_id for r in records], seed=split_seed)
    return records, split
