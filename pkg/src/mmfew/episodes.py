"""Episode construction: N-shot K-way task sampling with per-class
auxiliary embeddings, meta-splits over classes, and a synthetic
multimodal generator for desk-scale verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EpisodeError",
    "TooFewClasses",
    "InsufficientClasses",
    "InsufficientImages",
    "InvalidConfig",
    "ClassRecord",
    "Task",
    "MetaSplit",
    "SyntheticConfig",
    "make_meta_split",
    "sample_task",
    "generate_synthetic",
]


class EpisodeError(Exception):
    pass


class TooFewClasses(EpisodeError):
    pass


class InsufficientClasses(EpisodeError):
    pass


class InsufficientImages(EpisodeError):
    pass


class InvalidConfig(EpisodeError):
    pass


@dataclass(frozen=True)
class ClassRecord:
    """One class: its auxiliary (text) embedding and image embeddings."""

    class_id: int
    name: str
    text_embedding: np.ndarray  # (text_dim,)
    image_embeddings: np.ndarray  # (n_images, image_dim)


@dataclass(frozen=True)
class Task:
    """One episode. Entry i of every array belongs to label i; support
    and query rows for an entry come from the same source class and
    never share an image."""

    support_images: np.ndarray  # (K, N, image_dim)
    support_texts: np.ndarray  # (K, text_dim)
    query_images: np.ndarray  # (K, M, image_dim)
    class_ids: tuple[int, ...]

    @property
    def ways(self) -> int:
        return self.support_images.shape[0]

    @property
    def shots(self) -> int:
        return self.support_images.shape[1]

    @property
    def queries_per_class(self) -> int:
        return self.query_images.shape[1]

    @property
    def support_x(self) -> np.ndarray:
        k, n, d = self.support_images.shape
        return self.support_images.reshape(k * n, d)

    @property
    def support_y(self) -> np.ndarray:
        return np.repeat(np.arange(self.ways), self.shots)

    @property
    def query_x(self) -> np.ndarray:
        k, m, d = self.query_images.shape
        return self.query_images.reshape(k * m, d)

    @property
    def query_y(self) -> np.ndarray:
        return np.repeat(np.arange(self.ways), self.queries_per_class)

    def permuted(self, order) -> "Task":
        """Relabel classes: entry j of the result is entry order[j]."""
        order = np.asarray(order)
        return Task(
            support_images=self.support_images[order],
            support_texts=self.support_texts[order],
            query_images=self.query_images[order],
            class_ids=tuple(self.class_ids[i] for i in order),
        )


@dataclass(frozen=True)
class MetaSplit:
    """Disjoint class-id sets for meta-train / validation / test."""

    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


def make_meta_split(class_ids, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> MetaSplit:
    """Shuffle class ids with `seed`; first floor(r0*C) go to train,
    next floor(r1*C) to val, remainder to test (so rounding never
    enlarges the training set)."""
    ids = list(class_ids)
    if len(ids) < 3:
        raise TooFewClasses(f"need at least 3 classes, got {len(ids)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    c = len(ids)
    n_train = math.floor(ratios[0] * c)
    n_val = math.floor(ratios[1] * c)
    return MetaSplit(
        train=tuple(shuffled[:n_train]),
        val=tuple(shuffled[n_train : n_train + n_val]),
        test=tuple(shuffled[n_train + n_val :]),
    )


def sample_task(classes, k: int, n: int, m: int, rng: np.random.Generator) -> Task:
    """K distinct classes uniformly without replacement; per class, N+M
    distinct images, the first N to support and the next M to query."""
    classes = list(classes)
    if len(classes) < k:
        raise InsufficientClasses(f"need {k} classes, have {len(classes)}")
    chosen = rng.choice(len(classes), size=k, replace=False)
    sup, txt, qry, ids = [], [], [], []
    for ci in chosen:
        rec = classes[int(ci)]
        n_images = rec.image_embeddings.shape[0]
        if n_images < n + m:
            raise InsufficientImages(
                f"class {rec.class_id} has {n_images} images, need {n + m}"
            )
        idx = rng.choice(n_images, size=n + m, replace=False)
        sup.append(rec.image_embeddings[idx[:n]])
        qry.append(rec.image_embeddings[idx[n:]])
        txt.append(rec.text_embedding)
        ids.append(rec.class_id)
    return Task(
        support_images=np.stack(sup),
        support_texts=np.stack(txt),
        query_images=np.stack(qry),
        class_ids=tuple(ids),
    )


@dataclass(frozen=True)
class SyntheticConfig:
    """Latent-Gaussian stand-in for an embedded multimodal corpus.

    Each class has a latent mean; shared random linear maps produce its
    (noisy) image embeddings and one fixed text embedding.
    """

    latent_dim: int = 8
    image_dim: int = 32
    text_dim: int = 24
    image_noise_sigma: float = 0.5
    text_noise_sigma: float = 0.1
    n_classes: int = 80
    images_per_class: int = 120
    seed: int = 0

    def validate(self) -> None:
        if min(self.latent_dim, self.image_dim, self.text_dim) < 1:
            raise InvalidConfig("all dims must be >= 1")
        if self.image_noise_sigma < 0 or self.text_noise_sigma < 0:
            raise InvalidConfig("noise sigmas must be >= 0")
        if self.n_classes < 1 or self.images_per_class < 1:
            raise InvalidConfig("n_classes and images_per_class must be >= 1")


def _random_isometry(rng, rows: int, cols: int) -> np.ndarray:
    """Random map with orthonormal columns: ||W d|| == ||d||, so class
    separation in embedding space does not depend on embedding dim."""
    w, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # fix the sign convention so the map is a pure function of the draw
    return w * np.sign(np.diag(r))[None, :]


def generate_synthetic(config: SyntheticConfig) -> list[ClassRecord]:
    """Deterministic in config.seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    w_img = _random_isometry(rng, config.image_dim, config.latent_dim)
    w_txt = _random_isometry(rng, config.text_dim, config.latent_dim)
    records = []
    for c in range(config.n_classes):
        mu = rng.standard_normal(config.latent_dim)
        text = w_txt @ mu + config.text_noise_sigma * rng.standard_normal(config.text_dim)
        noise = rng.standard_normal((config.images_per_class, config.image_dim))
        images = (w_img @ mu)[None, :] + config.image_noise_sigma * noise
        records.append(
            ClassRecord(
                class_id=c,
                name=f"class_{c:03d}",
                text_embedding=text,
                image_embeddings=images,
            )
        )
    return records
