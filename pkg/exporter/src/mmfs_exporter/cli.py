"""CLI: export a raw corpus to MMFS v1 cached embeddings."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .encoders import EncoderError, make_image_encoder, make_text_encoder
from .export import ExportError, discover_corpus, export


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mmfs-export",
        description="Convert an image+description corpus into MMFS v1 embeddings.",
    )
    p.add_argument("--corpus", required=True, help="root dir with one subdirectory per class")
    p.add_argument("--descriptions", required=True, help="JSON mapping class name -> description")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--image-encoder", default="resnet152")
    p.add_argument("--text-encoder", default="bert-base-uncased")
    p.add_argument("--stub", action="store_true",
                   help="use deterministic fake encoders (contract tests)")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        image_enc = make_image_encoder("stub" if args.stub else args.image_encoder)
        text_enc = make_text_encoder("stub" if args.stub else args.text_encoder)
        corpus = discover_corpus(args.corpus, args.descriptions)
        manifest_path = export(corpus, args.out, image_enc, text_enc)
    except (ExportError, EncoderError) as e:
        print(json.dumps({"error": {"type": type(e).__name__, "message": str(e)}}),
              file=sys.stderr)
        return 1
    print(json.dumps({"manifest": str(manifest_path)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
