"""The two learnable networks.

``TokenDenoiser`` is a small bidirectional Transformer over an injected
sequence (condition at position 0, tokens at 1..L) producing per-position
vocabulary logits; ``LatentDenoiser`` is an MLP with sinusoidal time
features and a learned modality embedding producing noise predictions.
Both read their parameters from a ``ParamStore`` and are pure functions
of (inputs, parameters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bridge import Modality, inject, project_condition
from .discrete import MASK_TOKEN, PAD_TOKEN


def sinusoidal_embedding(times: np.ndarray, width: int) -> np.ndarray:
    """(B,) times in [0,1] -> (B, width) sin/cos features, freqs 1..1e4."""
    if width % 2 != 0:
        raise ValueError("sinusoidal width must be even")
    half = width // 2
    freqs = np.exp(np.linspace(0.0, np.log(10000.0), half))
    args = np.asarray(times, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def layer_norm(x: T.Tensor, gain: T.Tensor, bias: T.Tensor,
               eps: float = 1e-6) -> T.Tensor:
    width = x.shape[-1]
    m = T.repeat_axis(T.tmean(x, axis=-1, keepdims=True), -1, width)
    centered = T.sub(x, m)
    var = T.repeat_axis(T.tmean(T.mul(centered, centered), axis=-1, keepdims=True),
                        -1, width)
    normed = T.div(centered, T.sqrt(T.add(var, eps)))
    return T.add(T.mul(normed, gain), bias)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


def _linear(x: T.Tensor, store: T.ParamStore, name: str) -> T.Tensor:
    return T.add(T.matmul(x, store[f"{name}.weight"]), store[f"{name}.bias"])


@dataclass(frozen=True)
class TokenDenoiserConfig:
    layers: int = 2
    heads: int = 2
    embed_width: int = 64
    ff_width: int = 128
    text_vocab: int = 64
    image_vocab: int = 32
    max_length: int = 16
    time_embed: str = "sinusoidal"

    def __post_init__(self):
        if self.embed_width % self.heads != 0:
            raise ValueError("embed_width must be divisible by heads")
        if self.time_embed != "sinusoidal":
            raise ValueError(f"unknown time embedding {self.time_embed!r}")


class TokenDenoiser:
    """Bidirectional Transformer scoring every position of an injected
    sequence; per-modality embedding tables and output heads share the
    trunk. Time enters as a sinusoidal embedding added to all positions."""

    def __init__(self, config: TokenDenoiserConfig):
        self.config = config

    def vocab_size(self, modality: Modality) -> int:
        return self.config.text_vocab if modality == Modality.TEXT else self.config.image_vocab

    def init_params(self, store: T.ParamStore, rng: np.random.Generator) -> None:
        cfg = self.config
        e, f = cfg.embed_width, cfg.ff_width
        store.add("discrete.embed.text",
                  rng.uniform(-0.02, 0.02, size=(cfg.text_vocab + 2, e)))
        store.add("discrete.embed.image",
                  rng.uniform(-0.02, 0.02, size=(cfg.image_vocab + 2, e)))
        store.add("discrete.pos", rng.uniform(-0.02, 0.02, size=(cfg.max_length + 1, e)))
        for i in range(cfg.layers):
            p = f"discrete.layer{i}"
            store.add(f"{p}.ln1.gain", np.ones(e))
            store.add(f"{p}.ln1.bias", np.zeros(e))
            for piece in ("wq", "wk", "wv", "wo"):
                store.add(f"{p}.attn.{piece}.weight", _glorot(rng, e, e))
                store.add(f"{p}.attn.{piece}.bias", np.zeros(e))
            store.add(f"{p}.ln2.gain", np.ones(e))
            store.add(f"{p}.ln2.bias", np.zeros(e))
            store.add(f"{p}.ff.w1.weight", _glorot(rng, e, f))
            store.add(f"{p}.ff.w1.bias", np.zeros(f))
            store.add(f"{p}.ff.w2.weight", _glorot(rng, f, e))
            store.add(f"{p}.ff.w2.bias", np.zeros(e))
        store.add("discrete.final_ln.gain", np.ones(e))
        store.add("discrete.final_ln.bias", np.zeros(e))
        store.add("discrete.head.text.weight", _glorot(rng, e, cfg.text_vocab))
        store.add("discrete.head.text.bias", np.zeros(cfg.text_vocab))
        store.add("discrete.head.image.weight", _glorot(rng, e, cfg.image_vocab))
        store.add("discrete.head.image.bias", np.zeros(cfg.image_vocab))

    def _key_mask(self, tokens: np.ndarray, block_injection: bool) -> np.ndarray:
        """Additive attention mask, (B, 1, 1, S): PAD keys (and, for the
        blocked-injection arm, the condition key) are unreachable."""
        batch, length = tokens.shape
        masked = np.zeros((batch, length + 1), dtype=bool)
        masked[:, 1:] = tokens == PAD_TOKEN
        if block_injection:
            masked[:, 0] = True
        add = np.where(masked, -1e9, 0.0)
        return add[:, None, None, :]

    def logits(self, tokens: np.ndarray, condition, times: np.ndarray,
               store: T.ParamStore, modality: Modality,
               block_injection: bool = False,
               attn_capture: list | None = None) -> T.Tensor:
        """Per-position logits, (B, L, V) for positions 1..L.

        ``tokens`` is (B, L) with sentinels; ``condition`` a (B, d)
        tensor or array; ``times`` a (B,) float array.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        batch, length = tokens.shape
        if length > cfg.max_length:
            raise ValueError(f"sequence length {length} exceeds max {cfg.max_length}")
        heads, e = cfg.heads, cfg.embed_width
        head_dim = e // heads
        seq = length + 1

        mod = "text" if modality == Modality.TEXT else "image"
        vocab = self.vocab_size(modality)
        mapped = np.where(tokens >= 0, tokens, vocab + (-tokens) - 1)
        tok_emb = T.gather_rows(store[f"discrete.embed.{mod}"], mapped)

        condition = T.as_tensor(condition)
        h = inject(project_condition(condition, store), tok_emb)
        h = T.add(h, T.slice_axis(store["discrete.pos"], 0, 0, seq))
        t_feats = sinusoidal_embedding(times, e)
        t_emb = T.reshape(T.Tensor(t_feats), (batch, 1, e))
        h = T.add(h, T.repeat_axis(t_emb, 1, seq))

        key_add = self._key_mask(tokens, block_injection)
        mask_full = T.Tensor(np.broadcast_to(key_add, (batch, heads, seq, seq)).copy())

        for i in range(cfg.layers):
            p = f"discrete.layer{i}"
            normed = layer_norm(h, store[f"{p}.ln1.gain"], store[f"{p}.ln1.bias"])

            def split_heads(x):
                x = T.reshape(x, (batch, seq, heads, head_dim))
                return T.transpose(x, (0, 2, 1, 3))

            q = split_heads(_linear(normed, store, f"{p}.attn.wq"))
            k = split_heads(_linear(normed, store, f"{p}.attn.wk"))
            v = split_heads(_linear(normed, store, f"{p}.attn.wv"))
            scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                           1.0 / np.sqrt(head_dim))
            attn = T.softmax(T.add(scores, mask_full))
            if attn_capture is not None:
                attn_capture.append(attn.numpy().copy())
            ctx = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
            ctx = T.reshape(ctx, (batch, seq, e))
            h = T.add(h, _linear(ctx, store, f"{p}.attn.wo"))

            normed = layer_norm(h, store[f"{p}.ln2.gain"], store[f"{p}.ln2.bias"])
            ff = _linear(T.gelu(_linear(normed, store, f"{p}.ff.w1")),
                         store, f"{p}.ff.w2")
            h = T.add(h, ff)

        h = layer_norm(h, store["discrete.final_ln.gain"], store["discrete.final_ln.bias"])
        all_logits = _linear(h, store, f"discrete.head.{mod}")
        return T.slice_axis(all_logits, 1, 1, seq)

    def attention_maps(self, tokens, condition, times, store, modality,
                       block_injection: bool = False) -> list[np.ndarray]:
        """Per-layer attention weights, each (B, H, S, S); for tests."""
        captured: list[np.ndarray] = []
        self.logits(tokens, condition, times, store, modality,
                    block_injection=block_injection, attn_capture=captured)
        return captured


@dataclass(frozen=True)
class LatentDenoiserConfig:
    hidden: tuple = (64, 64)
    dim: int = 16
    time_embed_width: int = 16
    modality_embed_width: int = 16
    time_embed: str = "sinusoidal"

    def __post_init__(self):
        if self.time_embed != "sinusoidal":
            raise ValueError(f"unknown time embedding {self.time_embed!r}")


class LatentDenoiser:
    """MLP noise predictor over (perturbed vector, time, modality)."""

    def __init__(self, config: LatentDenoiserConfig):
        self.config = config

    def init_params(self, store: T.ParamStore, rng: np.random.Generator) -> None:
        cfg = self.config
        store.add("latent.modality_embed",
                  rng.uniform(-0.02, 0.02, size=(2, cfg.modality_embed_width)))
        widths = [cfg.dim + cfg.time_embed_width + cfg.modality_embed_width,
                  *cfg.hidden, cfg.dim]
        for i in range(len(widths) - 1):
            store.add(f"latent.fc{i}.weight", _glorot(rng, widths[i], widths[i + 1]))
            store.add(f"latent.fc{i}.bias", np.zeros(widths[i + 1]))
        self._num_layers = len(widths) - 1

    def eps_predict(self, r_t, times: np.ndarray, modality_ids: np.ndarray,
                    store: T.ParamStore) -> T.Tensor:
        """Noise prediction, (B, dim); deterministic in inputs and params."""
        cfg = self.config
        r_t = T.as_tensor(r_t)
        t_feats = sinusoidal_embedding(times, cfg.time_embed_width)
        mod_emb = T.gather_rows(store["latent.modality_embed"],
                                np.asarray(modality_ids, dtype=np.int64))
        h = T.concat([r_t, T.Tensor(t_feats), mod_emb], axis=-1)
        num_layers = len(cfg.hidden) + 1
        for i in range(num_layers):
            h = _linear(h, store, f"latent.fc{i}")
            if i < num_layers - 1:
                h = T.gelu(h)
        return h
