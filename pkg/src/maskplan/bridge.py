"""Frozen feature encoders, the condition-injection interface, and the
learnable cross-modality adapters.

Encoders are seeded random projections over handcrafted features (bag of
bigrams for text, position-weighted token embeddings for images). They
never live in the parameter store, so they stay byte-identical across
runs. The adapters and the condition projection are the only learnable
pieces here; both are trained jointly with the token denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import tensor as T
from .seeding import derive_rng


class Modality(IntEnum):
    TEXT = 0
    IMAGE = 1


@dataclass(frozen=True)
class SemanticVector:
    """Unit-norm condition vector tagged with the modality it encodes."""

    values: np.ndarray
    modality: Modality

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def unit_normalize(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / norm


def normalize_rows(x: T.Tensor) -> T.Tensor:
    """Graph-side row normalization to unit Euclidean norm."""
    sq = T.tsum(T.mul(x, x), axis=-1, keepdims=True)
    norm = T.sqrt(sq)
    return T.div(x, T.repeat_axis(norm, -1, x.shape[-1]))


class FrozenEncoder:
    """Deterministic map from a token sequence to a unit-norm vector.

    Text sequences are featurized as bag-of-bigram counts (order
    sensitive); image sequences as the positional average of per-position
    token embeddings. A fixed seeded Gaussian projection takes either
    feature to ``dim`` dimensions, followed by normalization.
    """

    def __init__(self, modality: Modality, vocab_size: int, length: int,
                 dim: int, seed: int):
        self.modality = modality
        self.vocab_size = vocab_size
        self.length = length
        self.dim = dim
        self.seed = seed
        rng = derive_rng(seed, f"encoder/{modality.name.lower()}")
        if modality == Modality.TEXT:
            # one projection row per ordered bigram (w_i, w_{i+1})
            self._projection = rng.standard_normal((vocab_size * vocab_size, dim))
        else:
            self._projection = rng.standard_normal((length, vocab_size, dim))

    def encode(self, seq) -> SemanticVector:
        """Encode a clean token sequence; raises on all-PAD or masked input."""
        if seq.modality != self.modality:
            raise ValueError(f"encoder for {self.modality.name} got {seq.modality.name} sequence")
        tokens = seq.tokens
        n = seq.content_length()
        if n == 0:
            raise ValueError("cannot encode an all-PAD sequence")
        prefix = tokens[:n]
        if (prefix < 0).any():
            raise ValueError("cannot encode a sequence with masked positions")
        if self.modality == Modality.TEXT:
            if n == 1:
                row = int(prefix[0]) * self.vocab_size + int(prefix[0])
                feats = self._projection[row].copy()
            else:
                rows = prefix[:-1].astype(np.int64) * self.vocab_size + prefix[1:]
                feats = self._projection[rows].sum(axis=0)
        else:
            feats = self._projection[np.arange(n), prefix].mean(axis=0)
        return SemanticVector(unit_normalize(feats), self.modality)


def make_encoders(world_or_cfg, dim: int, seed: int) -> dict[Modality, FrozenEncoder]:
    """Build the pair of frozen encoders from vocab/length settings."""
    return {
        Modality.TEXT: FrozenEncoder(Modality.TEXT, world_or_cfg.text_vocab,
                                     world_or_cfg.text_len, dim, seed),
        Modality.IMAGE: FrozenEncoder(Modality.IMAGE, world_or_cfg.image_vocab,
                                      world_or_cfg.image_len, dim, seed),
    }


# ---------------------------------------------------------------------------
# Learnable pieces: condition projection and modality adapters.

PROJ_WEIGHT = "bridge.proj.weight"
PROJ_BIAS = "bridge.proj.bias"


def init_bridge_params(store: T.ParamStore, dim: int, embed_width: int,
                       rng: np.random.Generator) -> None:
    """Register Proj (dim -> embed width) and both adapters.

    Adapters start at the identity so an untrained round trip is a
    no-op up to re-normalization.
    """
    scale = np.sqrt(2.0 / (dim + embed_width))
    store.add(PROJ_WEIGHT, rng.normal(0.0, scale, size=(dim, embed_width)))
    store.add(PROJ_BIAS, np.zeros(embed_width))
    for direction in ("text_to_image", "image_to_text"):
        store.add(f"bridge.adapter.{direction}.weight", np.eye(dim))
        store.add(f"bridge.adapter.{direction}.bias", np.zeros(dim))


def project_condition(r: T.Tensor, store: T.ParamStore) -> T.Tensor:
    """Map (B, dim) conditions into the token embedding space, (B, width)."""
    return T.add(T.matmul(r, store[PROJ_WEIGHT]), store[PROJ_BIAS])


def inject(r_projected: T.Tensor, embedded: T.Tensor) -> T.Tensor:
    """Prepend the projected condition as a global context position.

    ``r_projected`` is (B, E); ``embedded`` is (B, L, E). Output is
    (B, L+1, E) with the condition at position 0 and the token
    embeddings untouched at positions 1..L. Downstream logits and
    losses index positions 1..L only.
    """
    front = T.reshape(r_projected, (r_projected.shape[0], 1, r_projected.shape[1]))
    return T.concat([front, embedded], axis=1)


def _direction_names(direction: str) -> tuple[Modality, Modality]:
    if direction == "text_to_image":
        return Modality.TEXT, Modality.IMAGE
    if direction == "image_to_text":
        return Modality.IMAGE, Modality.TEXT
    raise ValueError(f"unknown adapter direction {direction!r}")


def adapt_tensor(r: T.Tensor, direction: str, store: T.ParamStore) -> T.Tensor:
    """Graph-side adapter: affine map then re-normalization, (B, d)."""
    w = store[f"bridge.adapter.{direction}.weight"]
    b = store[f"bridge.adapter.{direction}.bias"]
    return normalize_rows(T.add(T.matmul(r, w), b))


def adapt(r: SemanticVector, direction: str, store: T.ParamStore) -> SemanticVector:
    """Project a condition toward the other modality's region.

    Raises if the vector's modality does not match the direction's
    source. The result is unit-norm and tagged with the target modality.
    """
    source, target = _direction_names(direction)
    if r.modality != source:
        raise ValueError(f"adapter {direction} expects a {source.name} vector, "
                         f"got {r.modality.name}")
    out = adapt_tensor(T.Tensor(r.values.reshape(1, -1)), direction, store)
    return SemanticVector(out.numpy()[0].copy(), target)


def swap_direction(target: Modality) -> str:
    """Adapter direction whose output conditions a ``target`` sequence."""
    return "text_to_image" if target == Modality.IMAGE else "image_to_text"
