"""Trainable networks: shared body MLP, per-class head, head-generating
hypernetwork, and the AM3 text/gate/projection networks.

Parameters are flat dicts of named float64 arrays (the same naming the
checkpoint format stores). Forward functions take the dict bound to a
Graph as Tensors, so parameter sets stay immutable between episodes and
a fresh tape is used per batch.

Head parameters are a single K x (feature_dim + 1) matrix; row i holds
the weights and trailing bias that produce the logit for class i only.
"""

from __future__ import annotations

from enum import Enum
from typing import Mapping

import numpy as np

from .diffcore import (
    Graph,
    Mode,
    ShapeMismatch,
    Tensor,
    add,
    dropout,
    matmul,
    mul,
    narrow,
    relu,
    reshape,
    sigmoid,
    sub,
    transpose,
)

__all__ = [
    "MixMode",
    "init_dense",
    "init_body_params",
    "init_hyper_params",
    "init_head_params",
    "init_am3_params",
    "bind_params",
    "body_forward",
    "hyper_forward",
    "head_forward",
    "project_images",
    "am3_text_feature",
    "am3_mix",
]


class MixMode(Enum):
    """How AM3 combines image and text prototypes."""

    LEARNED = "learned"
    FORCE_IMAGE_ONLY = "image-only"  # lambda := 1 (uni-modal / ProtoNet)
    FORCE_TEXT_ONLY = "text-only"  # lambda := 0 (zero-shot)


def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int):
    """Weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero."""
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = np.zeros(fan_out)
    return w, b


def init_body_params(rng, image_dim: int, hidden=(256, 64), prefix="body"):
    params: dict[str, np.ndarray] = {}
    dims = [image_dim, *hidden]
    for i in range(len(hidden)):
        w, b = init_dense(rng, dims[i], dims[i + 1])
        params[f"{prefix}.w{i}"] = w
        params[f"{prefix}.b{i}"] = b
    return params


def init_hyper_params(rng, text_dim: int, feature_dim: int, hidden=256, prefix="hyper"):
    params: dict[str, np.ndarray] = {}
    w0, b0 = init_dense(rng, text_dim, hidden)
    w1, b1 = init_dense(rng, hidden, feature_dim + 1)
    params[f"{prefix}.w0"] = w0
    params[f"{prefix}.b0"] = b0
    params[f"{prefix}.w1"] = w1
    params[f"{prefix}.b1"] = b1
    return params


def init_head_params(rng, ways: int, feature_dim: int, prefix="head"):
    w, _ = init_dense(rng, feature_dim, ways)
    m = np.zeros((ways, feature_dim + 1))
    m[:, :feature_dim] = w.T
    return {f"{prefix}.m": m}


def init_am3_params(rng, image_dim: int, text_dim: int, proto_dim=512, hidden=512, prefix="am3"):
    params: dict[str, np.ndarray] = {}
    pw, pb = init_dense(rng, image_dim, proto_dim)
    params[f"{prefix}.proj.w"] = pw
    params[f"{prefix}.proj.b"] = pb
    gw0, gb0 = init_dense(rng, text_dim, hidden)
    gw1, gb1 = init_dense(rng, hidden, proto_dim)
    params[f"{prefix}.g.w0"] = gw0
    params[f"{prefix}.g.b0"] = gb0
    params[f"{prefix}.g.w1"] = gw1
    params[f"{prefix}.g.b1"] = gb1
    hw0, hb0 = init_dense(rng, proto_dim, hidden)
    hw1, hb1 = init_dense(rng, hidden, 1)
    params[f"{prefix}.h.w0"] = hw0
    params[f"{prefix}.h.b0"] = hb0
    params[f"{prefix}.h.w1"] = hw1
    params[f"{prefix}.h.b1"] = hb1
    return params


def bind_params(graph: Graph, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Bind a parameter dict to a graph as leaf tensors."""
    return {k: graph.leaf(v) for k, v in params.items()}


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def body_forward(
    params: Mapping[str, Tensor],
    x: Tensor,
    mode: Mode = Mode.EVAL,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    prefix: str = "body",
) -> Tensor:
    """Feature extractor: ReLU after each hidden layer, dropout after
    each activation in Train mode."""
    if x.value.ndim != 2:
        raise ShapeMismatch("body input must be 2-D (batch x image_dim)")
    h = x
    i = 0
    while f"{prefix}.w{i}" in params:
        w = params[f"{prefix}.w{i}"]
        if i == 0 and h.value.shape[1] != w.value.shape[0]:
            raise ShapeMismatch(
                f"input dim {h.value.shape[1]} != configured {w.value.shape[0]}"
            )
        h = relu(_affine(h, w, params[f"{prefix}.b{i}"]))
        h = dropout(h, dropout_p, mode, rng)
        i += 1
    return h


def hyper_forward(
    params: Mapping[str, Tensor],
    t: Tensor,
    mode: Mode = Mode.EVAL,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    prefix: str = "hyper",
) -> Tensor:
    """Map one auxiliary embedding to one head partition (weights + bias).

    In Eval mode (the default) this is a pure function of the parameters
    and t; training passes Train mode to enable hidden-layer dropout.
    """
    w0 = params[f"{prefix}.w0"]
    if t.value.ndim != 1:
        raise ShapeMismatch("auxiliary embedding must be 1-D")
    if t.value.shape[0] != w0.value.shape[0]:
        raise ShapeMismatch(
            f"text dim {t.value.shape[0]} != configured {w0.value.shape[0]}"
        )
    h = reshape(t, (1, t.value.shape[0]))
    h = relu(_affine(h, w0, params[f"{prefix}.b0"]))
    h = dropout(h, dropout_p, mode, rng)
    out = _affine(h, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    return reshape(out, (out.value.shape[1],))


def head_forward(head: Tensor, features: Tensor) -> Tensor:
    """logit[b][i] = dot(head[i, :d], features[b]) + head[i, d]."""
    if head.value.ndim != 2 or features.value.ndim != 2:
        raise ShapeMismatch("head and features must be 2-D")
    d = features.value.shape[1]
    if head.value.shape[1] != d + 1:
        raise ShapeMismatch(
            f"head partitions of length {head.value.shape[1]} do not match "
            f"feature dim {d}"
        )
    w = narrow(head, 1, 0, d)
    b = narrow(head, 1, d, 1)
    return add(matmul(features, transpose(w)), transpose(b))


def project_images(params: Mapping[str, Tensor], x: Tensor, prefix="am3") -> Tensor:
    """Affine map from image embeddings to prototype space."""
    w = params[f"{prefix}.proj.w"]
    if x.value.ndim != 2 or x.value.shape[1] != w.value.shape[0]:
        raise ShapeMismatch("image batch does not match projection input dim")
    return _affine(x, w, params[f"{prefix}.proj.b"])


def am3_text_feature(
    params: Mapping[str, Tensor],
    t: Tensor,
    mode: Mode = Mode.EVAL,
    dropout_p: float = 0.0,
    rng=None,
    prefix="am3",
) -> Tensor:
    """Text prototype w = g(t), shape (proto_dim,)."""
    if t.value.ndim != 1 or t.value.shape[0] != params[f"{prefix}.g.w0"].value.shape[0]:
        raise ShapeMismatch("text embedding does not match g input dim")
    h = reshape(t, (1, t.value.shape[0]))
    h = relu(_affine(h, params[f"{prefix}.g.w0"], params[f"{prefix}.g.b0"]))
    h = dropout(h, dropout_p, mode, rng)
    out = _affine(h, params[f"{prefix}.g.w1"], params[f"{prefix}.g.b1"])
    return reshape(out, (out.value.shape[1],))


def _am3_gate(params, w: Tensor, mode, dropout_p, rng, prefix) -> Tensor:
    h = reshape(w, (1, w.value.shape[0]))
    h = relu(_affine(h, params[f"{prefix}.h.w0"], params[f"{prefix}.h.b0"]))
    h = dropout(h, dropout_p, mode, rng)
    out = _affine(h, params[f"{prefix}.h.w1"], params[f"{prefix}.h.b1"])
    return sigmoid(reshape(out, ()))


def am3_mix(
    params: Mapping[str, Tensor],
    image_proto: Tensor | None,
    t: Tensor,
    mix_mode: MixMode,
    mode: Mode = Mode.EVAL,
    dropout_p: float = 0.0,
    rng=None,
    prefix="am3",
) -> tuple[Tensor, Tensor]:
    """Convex combination lambda*image_proto + (1-lambda)*g(t).

    Forced modes bypass the arithmetic entirely so the output is the
    selected prototype bit-for-bit.
    """
    g = t.graph
    if mix_mode is MixMode.FORCE_IMAGE_ONLY:
        if image_proto is None:
            raise ShapeMismatch("image prototype required when lambda is forced to 1")
        return image_proto, g.constant(1.0)
    w = am3_text_feature(params, t, mode, dropout_p, rng, prefix)
    if mix_mode is MixMode.FORCE_TEXT_ONLY:
        return w, g.constant(0.0)
    if image_proto is None:
        raise ShapeMismatch("image prototype required in Learned mode")
    lam = _am3_gate(params, w, mode, dropout_p, rng, prefix)
    one = g.constant(1.0)
    proto = add(mul(lam, image_proto), mul(sub(one, lam), w))
    return proto, lam
