"""Dual-branch encoder: spectrogram CNN + post-correlation MLP, fused into an
embedding that is classified by distance to class prototypes (or k-NN).

Spectrogram branch: conv 3x3 -> relu -> maxpool2 -> conv 3x3 -> relu ->
maxpool2 -> dense. Post-correlation branch: dense -> relu -> dense. When the
post-correlation input is absent a learned token of the same width stands in,
so the fused embedding always has ``embed_dim`` entries.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .sigmodel import Label

FUSION_WEIGHT = "fusion.W"


@dataclass(frozen=True)
class EncoderConfig:
    spec_shape: tuple[int, int]
    post_dim: int = 0            # 0: no post-correlation branch (pre-only)
    conv1: int = 8
    conv2: int = 16
    kernel: int = 3
    spec_out: int = 32
    post_hidden: int = 32
    post_out: int = 32
    embed_dim: int = 64
    fusion_gain: float = 0.1     # scales the fusion-layer init, hence initial embedding distances

    def __post_init__(self):
        object.__setattr__(self, "spec_shape", tuple(int(s) for s in self.spec_shape))
        h, w = self.conv_out_shape()
        if h < 1 or w < 1:
            raise ValidationError(f"spectrogram shape {self.spec_shape} too small for the encoder")

    def conv_out_shape(self) -> tuple[int, int]:
        h, w = self.spec_shape
        k = self.kernel
        h, w = (h - k + 1) // 2, (w - k + 1) // 2
        return (h - k + 1) // 2, (w - k + 1) // 2

    @property
    def flat_dim(self) -> int:
        h, w = self.conv_out_shape()
        return self.conv2 * h * w


def init_params(cfg: EncoderConfig, rng: np.random.Generator | int = 0) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    k = cfg.kernel

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

    p = {
        "spec.conv1.k": he((cfg.conv1, 1, k, k), k * k),
        "spec.conv1.b": np.zeros(cfg.conv1),
        "spec.conv2.k": he((cfg.conv2, cfg.conv1, k, k), cfg.conv1 * k * k),
        "spec.conv2.b": np.zeros(cfg.conv2),
        "spec.dense.W": he((cfg.flat_dim, cfg.spec_out), cfg.flat_dim),
        "spec.dense.b": np.zeros(cfg.spec_out),
    }
    if cfg.post_dim > 0:
        p["post.dense1.W"] = he((cfg.post_dim, cfg.post_hidden), cfg.post_dim)
        p["post.dense1.b"] = np.zeros(cfg.post_hidden)
        p["post.dense2.W"] = he((cfg.post_hidden, cfg.post_out), cfg.post_hidden)
        p["post.dense2.b"] = np.zeros(cfg.post_out)
    p["post.token"] = rng.normal(0.0, 1.0, cfg.post_out)
    fused = cfg.spec_out + cfg.post_out
    p[FUSION_WEIGHT] = cfg.fusion_gain * he((fused, cfg.embed_dim), fused)
    p["fusion.b"] = np.zeros(cfg.embed_dim)
    return p


def _wrap(params: Mapping) -> dict[str, T.Tensor]:
    return {k: v if isinstance(v, T.Tensor) else T.Tensor(v) for k, v in params.items()}


def embed_batch(params: Mapping, specs: np.ndarray, posts: np.ndarray | None,
                cfg: EncoderConfig) -> T.Tensor:
    """Embeddings for a batch: specs (n, H, W), posts (n, post_dim) or None."""
    p = _wrap(params)
    specs = np.asarray(specs, dtype=np.float64)
    if specs.ndim != 3 or specs.shape[1:] != cfg.spec_shape:
        raise ValidationError(f"spectrogram batch shape {specs.shape[1:]} != configured {cfg.spec_shape}")
    n = specs.shape[0]
    x = T.Tensor(specs[:, None, :, :])
    x = T.maxpool2(T.relu(T.conv2d(x, p["spec.conv1.k"], 1, p["spec.conv1.b"])))
    x = T.maxpool2(T.relu(T.conv2d(x, p["spec.conv2.k"], 1, p["spec.conv2.b"])))
    x = T.dense(T.reshape(x, (n, -1)), p["spec.dense.W"], p["spec.dense.b"])
    if posts is None:
        y = T.tile_rows(p["post.token"], n)
    else:
        posts = np.asarray(posts, dtype=np.float64)
        if cfg.post_dim == 0 or posts.shape != (n, cfg.post_dim):
            raise ValidationError(f"post-correlation batch shape {posts.shape} != ({n}, {cfg.post_dim})")
        y = T.relu(T.dense(T.Tensor(posts), p["post.dense1.W"], p["post.dense1.b"]))
        y = T.dense(y, p["post.dense2.W"], p["post.dense2.b"])
    return T.dense(T.concat(x, y, axis=1), p[FUSION_WEIGHT], p["fusion.b"])


def embed(params: Mapping, spec, post=None, cfg: EncoderConfig | None = None) -> np.ndarray:
    """Embedding of one example.

    ``spec`` is a :class:`~rffspoof.features.Spectrogram` or a 2-D array;
    ``post`` a post-correlation vector (see :func:`rffspoof.tracking.postcorr_vector`)
    or ``None`` for the pre-correlation-only path.
    """
    mags = getattr(spec, "magnitudes", spec)
    if cfg is None:
        raise ValidationError("embed needs an EncoderConfig")
    posts = None if post is None else np.asarray(post, dtype=np.float64)[None, :]
    return embed_batch(params, np.asarray(mags)[None], posts, cfg).data[0]


@dataclass
class PrototypeSet:
    labels: tuple[Label, ...]
    vectors: np.ndarray   # (num_classes, D)

    def __getitem__(self, label) -> np.ndarray:
        return self.vectors[self.labels.index(Label.parse(label))]


def class_groups(labels: Sequence[int], classes=(Label.CLEAN, Label.SPOOFED)) -> list[np.ndarray]:
    labels = np.asarray(labels)
    groups = []
    for c in classes:
        idx = np.flatnonzero(labels == int(c))
        if len(idx) == 0:
            raise ValidationError(f"no support examples for class {Label(c).name}")
        groups.append(idx)
    return groups


def prototypes(support_embeddings: np.ndarray, labels: Sequence[int]) -> PrototypeSet:
    """Per-class mean embedding (both classes must be present)."""
    emb = np.asarray(support_embeddings, dtype=np.float64)
    groups = class_groups(labels)
    return PrototypeSet((Label.CLEAN, Label.SPOOFED), np.stack([emb[g].mean(axis=0) for g in groups]))


def proto_loss_from_embeddings(support: T.Tensor, support_labels, evaluate: T.Tensor, eval_labels) -> T.Tensor:
    protos = T.group_mean(support, class_groups(support_labels))
    logits = T.scale(T.sq_euclidean_rows(evaluate, protos), -1.0)
    return T.softmax_cross_entropy(logits, eval_labels)


def proto_loss(params: Mapping, support, evaluate, cfg: EncoderConfig) -> T.Tensor:
    """Cross-entropy of ``-||f(x) - c_k||^2`` logits; prototypes from ``support``.

    ``support`` / ``evaluate`` are batches with ``specs``, ``posts`` and
    ``labels`` attributes. When ``evaluate is support`` the support set is
    embedded once and scored against its own prototypes.
    """
    es = embed_batch(params, support.specs, support.posts, cfg)
    ee = es if evaluate is support else embed_batch(params, evaluate.specs, evaluate.posts, cfg)
    return proto_loss_from_embeddings(es, support.labels, ee, evaluate.labels)


def classify(query: np.ndarray, reference, mode: str = "prototype", k: int = 5,
             reference_labels: Sequence[int] | None = None) -> Label:
    """Label for one query embedding.

    ``mode="prototype"``: nearest prototype in ``reference`` (a PrototypeSet);
    ties go to CLEAN. ``mode="knn"``: majority vote over the ``k`` nearest rows of
    ``reference`` (an (n, D) array with ``reference_labels``); vote ties go to
    the class with the smaller summed distance, then to CLEAN.
    """
    q = np.asarray(query, dtype=np.float64)
    if mode == "prototype":
        if not isinstance(reference, PrototypeSet) or len(reference.vectors) == 0:
            raise ValidationError("nearest-prototype mode needs a non-empty PrototypeSet")
        d = ((reference.vectors - q) ** 2).sum(axis=1)
        best = d.min()
        winners = [lab for lab, di in zip(reference.labels, d) if di == best]
        return Label.CLEAN if Label.CLEAN in winners else winners[0]
    if mode != "knn":
        raise ValidationError(f"unknown classify mode {mode!r}")
    ref = np.asarray(reference, dtype=np.float64)
    labels = np.asarray(reference_labels)
    if ref.ndim != 2 or len(ref) == 0 or labels.shape != (len(ref),):
        raise ValidationError("k-NN mode needs a non-empty (n, D) reference with matching labels")
    if not 1 <= k <= len(ref):
        raise ValidationError(f"k={k} exceeds reference size {len(ref)}")
    d = ((ref - q) ** 2).sum(axis=1)
    nearest = np.argsort(d, kind="stable")[:k]
    votes = {c: int(np.sum(labels[nearest] == int(c))) for c in (Label.CLEAN, Label.SPOOFED)}
    dist = {c: float(d[nearest][labels[nearest] == int(c)].sum()) for c in (Label.CLEAN, Label.SPOOFED)}
    if votes[Label.CLEAN] != votes[Label.SPOOFED]:
        return max(votes, key=votes.get)
    if dist[Label.CLEAN] != dist[Label.SPOOFED]:
        return min(dist, key=dist.get)
    return Label.CLEAN


@dataclass
class ProtoLearner:
    """Binds the encoder to the meta-learning loop's learner interface."""

    cfg: EncoderConfig
    regularize_all: bool = False

    @property
    def regularized(self) -> tuple[str, ...] | None:
        return None if self.regularize_all else (FUSION_WEIGHT,)

    def init_params(self, rng) -> dict[str, np.ndarray]:
        return init_params(self.cfg, rng)

    def loss(self, params, support, evaluate) -> T.Tensor:
        return proto_loss(params, support, evaluate, self.cfg)

    def embed(self, params, batch) -> np.ndarray:
        return embed_batch(params, batch.specs, batch.posts, self.cfg).data
