"""A small deterministic decoder-only transformer.

Pre-norm blocks (RMSNorm), full multi-head causal attention with rotary
position embeddings on queries and keys, a SiLU feed-forward layer, float32
throughout.  Weights are drawn from PCG64 seeded with ``weight_seed``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from . import kernels
from .config import ModelConfig
from .errors import PositionOverflow
from .store import KvCache, concat_caches
from .tokenizer import Tokenizer, default_tokenizer

F32 = np.float32
NORM_EPS = F32(1e-5)


@dataclass(frozen=True, eq=False)
class LayerWeights:
    attn_norm: np.ndarray   # (d_model,)
    wqkv: np.ndarray        # (d_model, 3 * d_model)
    wo: np.ndarray          # (d_model, d_model)
    ffn_norm: np.ndarray
    w_in: np.ndarray        # (d_model, d_ff)
    w_out: np.ndarray       # (d_ff, d_model)


@dataclass(frozen=True, eq=False)
class ModelWeights:
    embedding: np.ndarray   # (vocab, d_model)
    layers: tuple[LayerWeights, ...]
    final_norm: np.ndarray
    lm_head: np.ndarray     # (d_model, vocab)

    @classmethod
    def from_seed(cls, cfg: ModelConfig) -> "ModelWeights":
        rng = np.random.Generator(np.random.PCG64(cfg.weight_seed))
        scale = 1.0 / np.sqrt(cfg.d_model)
        d, dff = cfg.d_model, cfg.d_ff

        def draw(*shape):
            a = (rng.standard_normal(shape) * scale).astype(F32)
            a.flags.writeable = False
            return a

        def ones(n):
            a = np.ones(n, dtype=F32)
            a.flags.writeable = False
            return a

        embedding = draw(cfg.vocab_size, d)
        layers = tuple(
            LayerWeights(ones(d), draw(d, 3 * d), draw(d, d), ones(d), draw(d, dff), draw(dff, d))
            for _ in range(cfg.n_layers)
        )
        return cls(embedding, layers, ones(d), draw(d, cfg.vocab_size))

    def arrays(self):
        yield self.embedding
        for lw in self.layers:
            yield from (lw.attn_norm, lw.wqkv, lw.wo, lw.ffn_norm, lw.w_in, lw.w_out)
        yield self.final_norm
        yield self.lm_head


def rope_tables(cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    half = cfg.d_head // 2
    inv_freq = cfg.rope_theta ** (-np.arange(half, dtype=np.float64) * 2.0 / cfg.d_head)
    angles = np.arange(cfg.max_position, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(F32)
    sin = np.sin(angles).astype(F32)
    cos.flags.writeable = False
    sin.flags.writeable = False
    return cos, sin


class Model:
    """Immutable after construction; safe for concurrent read-only use."""

    def __init__(self, config: ModelConfig | None = None, tokenizer: Tokenizer | None = None,
                 backend: str | None = None):
        self.config = config or ModelConfig()
        self.tokenizer = tokenizer or default_tokenizer()
        if self.config.vocab_size < 256 + self.tokenizer.n_specials:
            raise ValueError(f"vocab_size {self.config.vocab_size} cannot hold 256 bytes + "
                             f"{self.tokenizer.n_specials} special tokens")
        self.kernels = kernels.get_backend(backend)
        self.weights = ModelWeights.from_seed(self.config)
        self.cos, self.sin = rope_tables(self.config)
        self._scale = F32(1.0 / np.sqrt(self.config.d_head))

    @cached_property
    def fingerprint(self) -> str:
        return self.config.fingerprint

    @property
    def backend(self) -> str:
        return self.kernels.name

    def rope_rotate(self, vector, position: int) -> np.ndarray:
        """Rotate one ``d_head`` vector to ``position``."""
        v = np.asarray(vector, dtype=F32)
        if v.shape != (self.config.d_head,):
            raise ValueError(f"expected a vector of length {self.config.d_head}, got shape {v.shape}")
        if not 0 <= position < self.config.max_position:
            raise PositionOverflow(position + 1, self.config.max_position)
        x = v.reshape(1, 1, -1)
        out = self.kernels.rope(x, self.cos[position:position + 1], self.sin[position:position + 1])
        return out.reshape(-1)

    def forward_pass(self, tokens: Sequence[int], past: KvCache | None = None,
                     position_offset: int = 0) -> tuple[np.ndarray, KvCache]:
        """Run ``tokens`` after ``past``; returns per-token logits and the extended cache.

        Without ``past`` the first token sits at rotary position
        ``position_offset``; with ``past`` positions continue from
        ``past.end_position``.
        """
        cfg = self.config
        k = self.kernels
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError("token id outside the vocabulary")
        if past is not None:
            past.check_fingerprint(self.fingerprint)
            start = past.end_position
            past_k, past_v = past.keys, past.values
            n_past = past.length
        else:
            start = position_offset
            n_past = 0
        t_new = ids.size
        if start + t_new > cfg.max_position:
            raise PositionOverflow(start + t_new, cfg.max_position)

        h_, dh = cfg.n_heads, cfg.d_head
        new_k = np.empty((cfg.n_layers, t_new, h_, dh), dtype=F32)
        new_v = np.empty_like(new_k)
        cos = self.cos[start:start + t_new]
        sin = self.sin[start:start + t_new]
        x = np.ascontiguousarray(self.weights.embedding[ids])
        for li, lw in enumerate(self.weights.layers):
            h = k.rmsnorm(x, lw.attn_norm, NORM_EPS)
            qkv = k.matmul(h, lw.wqkv)
            q = np.ascontiguousarray(qkv[:, :cfg.d_model].reshape(t_new, h_, dh))
            kk = np.ascontiguousarray(qkv[:, cfg.d_model:2 * cfg.d_model].reshape(t_new, h_, dh))
            vv = np.ascontiguousarray(qkv[:, 2 * cfg.d_model:].reshape(t_new, h_, dh))
            q = k.rope(q, cos, sin)
            kk = k.rope(kk, cos, sin)
            new_k[li] = kk
            new_v[li] = vv
            if n_past:
                keys = np.concatenate([past_k[li], kk], axis=0)
                vals = np.concatenate([past_v[li], vv], axis=0)
            else:
                keys, vals = kk, vv
            att = k.attention(q, keys, vals, n_past, self._scale)
            x = x + k.matmul(np.ascontiguousarray(att.reshape(t_new, cfg.d_model)), lw.wo)
            h = k.rmsnorm(x, lw.ffn_norm, NORM_EPS)
            x = x + k.matmul(k.silu(k.matmul(h, lw.w_in)), lw.w_out)
        x = k.rmsnorm(x, self.weights.final_norm, NORM_EPS)
        logits = k.matmul(x, self.weights.lm_head)

        fresh = KvCache(new_k, new_v, start, self.fingerprint)
        cache = fresh if past is None else concat_caches(past, fresh)
        return logits, cache

    def generate_greedy(self, prompt: Sequence[int], past: KvCache | None = None,
                        max_new: int = 32, stop_at_eos: bool = True) -> list[int]:
        """Argmax decoding; ties go to the lowest id.  The stop token is not returned."""
        if max_new <= 0:
            return []
        if len(prompt) == 0:
            raise ValueError("generation needs at least one prompt token")
        eos = self.tokenizer.eos_id if stop_at_eos else None
        logits, cache = self.forward_pass(prompt, past)
        out: list[int] = []
        limit = self.config.max_position
        while True:
            nxt = int(np.argmax(logits[-1]))
            if nxt == eos:
                break
            out.append(nxt)
            if len(out) >= max_new or cache.end_position >= limit:
                break
            logits, cache = self.forward_pass([nxt], cache)
        return out

    def encode(self, text: str | bytes, template_specials: bool = True) -> list[int]:
        return self.tokenizer.tokenize(text, template_specials)
