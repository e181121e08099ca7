"""Pluggable frozen encoders.

The stub pair hashes input bytes into seeded gaussian vectors, which
makes contract tests fully deterministic without model weights. The real
encoders (ResNet-152 penultimate features, BERT pooled sentence vectors)
are imported lazily; they need torch/torchvision/transformers plus
locally available weights.
"""

from __future__ import annotations

import hashlib

import numpy as np


class EncoderError(RuntimeError):
    pass


def _hash_vector(payload: bytes, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.standard_normal(dim).astype(np.float32)


class StubImageEncoder:
    name = "stub-image"
    dim = 2048

    def encode(self, image_bytes: bytes) -> np.ndarray:
        return _hash_vector(b"img:" + image_bytes, self.dim)


class StubTextEncoder:
    name = "stub-text"
    dim = 768
    max_tokens = 32

    def encode(self, text: str) -> tuple[np.ndarray, bool]:
        """Returns (embedding, truncated). Token = whitespace split."""
        tokens = text.split()
        truncated = len(tokens) > self.max_tokens
        if truncated:
            text = " ".join(tokens[: self.max_tokens])
        return _hash_vector(b"txt:" + text.encode("utf-8"), self.dim), truncated


class ResNet152ImageEncoder:
    """Penultimate (pre-classifier) features of a frozen ResNet-152."""

    name = "resnet152"
    dim = 2048

    def __init__(self):
        try:
            import io

            import torch
            import torchvision.models as tvm
            import torchvision.transforms as T
            from PIL import Image
        except ImportError as e:
            raise EncoderError(f"resnet152 encoder needs torch/torchvision: {e}") from None
        self._io = io
        self._torch = torch
        self._Image = Image
        weights = tvm.ResNet152_Weights.IMAGENET1K_V1
        model = tvm.resnet152(weights=weights)
        model.fc = torch.nn.Identity()
        model.eval()
        self._model = model
        self._tf = T.Compose([
            T.Resize(256), T.CenterCrop(224), T.ToTensor(),
            T.Normalize(mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]),
        ])

    def encode(self, image_bytes: bytes) -> np.ndarray:
        img = self._Image.open(self._io.BytesIO(image_bytes)).convert("RGB")
        with self._torch.no_grad():
            feats = self._model(self._tf(img)[None])
        return feats[0].numpy().astype(np.float32)


class BertTextEncoder:
    """Pooled sentence representation of a frozen BERT model."""

    name = "bert-base-uncased"
    dim = 768

    def __init__(self, model_id: str = "bert-base-uncased"):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as e:
            raise EncoderError(f"bert encoder needs transformers/torch: {e}") from None
        self._torch = torch
        self.name = model_id
        self._tokenizer = AutoTokenizer.from_pretrained(model_id)
        self._model = AutoModel.from_pretrained(model_id)
        self._model.eval()
        self.max_tokens = self._tokenizer.model_max_length

    def encode(self, text: str) -> tuple[np.ndarray, bool]:
        enc = self._tokenizer(text, truncation=True, return_tensors="pt",
                              return_overflowing_tokens=False)
        truncated = len(self._tokenizer(text)["input_ids"]) > self.max_tokens
        with self._torch.no_grad():
            out = self._model(**enc)
        pooled = out.pooler_output if out.pooler_output is not None else out.last_hidden_state.mean(1)
        return pooled[0].numpy().astype(np.float32), truncated


def make_image_encoder(identifier: str):
    if identifier == "stub":
        return StubImageEncoder()
    if identifier == "resnet152":
        return ResNet152ImageEncoder()
    raise EncoderError(f"unknown image encoder {identifier!r}")


def make_text_encoder(identifier: str):
    if identifier == "stub":
        return StubTextEncoder()
    return BertTextEncoder(identifier)
