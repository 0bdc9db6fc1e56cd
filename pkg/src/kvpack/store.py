"""KV cache values, prefix slicing, comparison and the knowledge pack record."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .config import ModelConfig
from .errors import FingerprintMismatch

F32 = np.float32


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=F32)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SteeringTerm:
    """One recorded steering contribution waiting to be folded into a cache.

    ``coeffs`` holds one float64 coefficient per model layer; a layer with
    coefficient 0 is untouched.  Terms sharing ``(target, digest, length)``
    merge by adding coefficients, so repeated or composed applications of the
    same delta land on the same materialized tensor.
    """
    target: str               # "k" or "v"
    digest: str
    layers: tuple[int, ...]   # layers the tensor covers, in tensor order
    tensor: np.ndarray        # (len(layers), T_d, H, D)
    coeffs: tuple[float, ...]
    length: int

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.target, self.digest, self.length)

    def merged(self, other: "SteeringTerm") -> "SteeringTerm":
        coeffs = tuple(a + b for a, b in zip(self.coeffs, other.coeffs))
        return SteeringTerm(self.target, self.digest, self.layers, self.tensor, coeffs, self.length)

    @property
    def is_zero(self) -> bool:
        return not any(self.coeffs)


@dataclass(frozen=True, eq=False)
class KvCache:
    """Per-layer keys and values, shape ``(n_layers, T, n_heads, d_head)``.

    Keys are stored already rotated; values never are.  ``position_offset``
    is the rotary position of row 0.
    """
    raw_keys: np.ndarray
    raw_values: np.ndarray
    position_offset: int
    fingerprint: str
    steering: tuple[SteeringTerm, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "raw_keys", _frozen(self.raw_keys))
        object.__setattr__(self, "raw_values", _frozen(self.raw_values))
        if self.raw_keys.shape != self.raw_values.shape or self.raw_keys.ndim != 4:
            raise ValueError(f"key/value shapes disagree: {self.raw_keys.shape} vs {self.raw_values.shape}")
        if self.position_offset < 0:
            raise ValueError("position_offset must be non-negative")
        ordered = tuple(sorted((t for t in self.steering if not t.is_zero), key=lambda t: t.key))
        object.__setattr__(self, "steering", ordered)

    @property
    def n_layers(self) -> int:
        return self.raw_keys.shape[0]

    @property
    def length(self) -> int:
        return self.raw_keys.shape[1]

    def __len__(self) -> int:
        return self.length

    @property
    def end_position(self) -> int:
        return self.position_offset + self.length

    def _materialize(self, target: str, base: np.ndarray) -> np.ndarray:
        terms = [t for t in self.steering if t.target == target]
        if not terms:
            return base
        out = base.copy()
        for t in terms:
            n = min(t.length, self.length)
            for i, layer in enumerate(t.layers):
                c = t.coeffs[layer]
                if c != 0.0:
                    out[layer, :n] += F32(c) * t.tensor[i, :n]
        out.flags.writeable = False
        return out

    @cached_property
    def keys(self) -> np.ndarray:
        return self._materialize("k", self.raw_keys)

    @cached_property
    def values(self) -> np.ndarray:
        return self._materialize("v", self.raw_values)

    def with_steering(self, term: SteeringTerm) -> "KvCache":
        terms = {t.key: t for t in self.steering}
        if term.key in terms:
            terms[term.key] = terms[term.key].merged(term)
        else:
            terms[term.key] = term
        return KvCache(self.raw_keys, self.raw_values, self.position_offset,
                       self.fingerprint, tuple(terms.values()))

    def materialized(self) -> "KvCache":
        """Fold steering terms into plain tensors."""
        if not self.steering:
            return self
        return KvCache(self.keys, self.values, self.position_offset, self.fingerprint)

    def check_fingerprint(self, expected: str) -> None:
        if self.fingerprint != expected:
            raise FingerprintMismatch(expected, self.fingerprint)


def empty_cache(cfg: ModelConfig, position_offset: int = 0) -> KvCache:
    shape = (cfg.n_layers, 0, cfg.n_heads, cfg.d_head)
    z = np.zeros(shape, dtype=F32)
    return KvCache(z, z, position_offset, cfg.fingerprint)


def slice_prefix(cache: KvCache, t: int) -> KvCache:
    """First ``t`` rows of every layer; the offset is kept."""
    if not 0 <= t <= cache.length:
        raise IndexError(f"slice length {t} outside 0..{cache.length}")
    if t == cache.length and not cache.steering:
        return cache
    return KvCache(cache.keys[:, :t], cache.values[:, :t], cache.position_offset, cache.fingerprint)


def concat_caches(a: KvCache, b: KvCache) -> KvCache:
    """Raw row concatenation with no position correction."""
    a.check_fingerprint(b.fingerprint)
    if a.keys.shape[::2] != b.keys.shape[::2] or a.keys.shape[3] != b.keys.shape[3]:
        raise ValueError("cache geometry differs")
    if b.length == 0:
        return a
    if a.length == 0 and b.position_offset == a.position_offset:
        return b
    keys = np.concatenate([a.keys, b.keys], axis=1)
    values = np.concatenate([a.values, b.values], axis=1)
    return KvCache(keys, values, a.position_offset, a.fingerprint)


@dataclass
class LayerDiff:
    layer: int
    max_key_diff: float
    max_value_diff: float


@dataclass
class EqualityReport:
    equal: bool
    tolerance: float
    layers: list[LayerDiff] = field(default_factory=list)
    shape_mismatch: str | None = None
    offset_mismatch: tuple[int, int] | None = None
    fingerprint_mismatch: tuple[str, str] | None = None

    def __bool__(self) -> bool:
        return self.equal

    @property
    def max_diff(self) -> float:
        if not self.layers:
            return 0.0 if self.shape_mismatch is None else float("inf")
        return max(max(d.max_key_diff, d.max_value_diff) for d in self.layers)

    def worst_layer(self) -> int | None:
        if not self.layers:
            return None
        return max(self.layers, key=lambda d: max(d.max_key_diff, d.max_value_diff)).layer

    def describe(self) -> str:
        if self.shape_mismatch:
            return f"shape mismatch: {self.shape_mismatch}"
        head = "equal" if self.equal else "unequal"
        lines = [f"{head} (tolerance {self.tolerance:g}, max diff {self.max_diff:g})"]
        if self.offset_mismatch:
            lines.append(f"offset mismatch: {self.offset_mismatch[0]} vs {self.offset_mismatch[1]}")
        if self.fingerprint_mismatch:
            lines.append("fingerprint mismatch: %s vs %s" % self.fingerprint_mismatch)
        for d in self.layers:
            lines.append(f"  layer {d.layer}: max |dK| {d.max_key_diff:g}  max |dV| {d.max_value_diff:g}")
        return "\n".join(lines)


def caches_equal(a: KvCache, b: KvCache, tolerance: float = 0.0) -> EqualityReport:
    """Compare two caches layer by layer.  Mismatches are reported, never raised."""
    rep = EqualityReport(equal=True, tolerance=tolerance)
    if a.keys.shape != b.keys.shape:
        rep.equal = False
        rep.shape_mismatch = f"{a.keys.shape} vs {b.keys.shape}"
        return rep
    if a.position_offset != b.position_offset:
        rep.equal = False
        rep.offset_mismatch = (a.position_offset, b.position_offset)
    if a.fingerprint != b.fingerprint:
        rep.equal = False
        rep.fingerprint_mismatch = (a.fingerprint, b.fingerprint)
    ak, bk, av, bv = a.keys, b.keys, a.values, b.values
    for layer in range(a.n_layers):
        if a.length:
            dk = float(np.max(np.abs(ak[layer].astype(np.float64) - bk[layer])))
            dv = float(np.max(np.abs(av[layer].astype(np.float64) - bv[layer])))
        else:
            dk = dv = 0.0
        if np.isnan(dk) or np.isnan(dv):
            dk = dv = float("inf")
        rep.layers.append(LayerDiff(layer, dk, dv))
        if dk > tolerance or dv > tolerance:
            rep.equal = False
    return rep


@dataclass(frozen=True, eq=False)
class KnowledgePack:
    """A cache plus the facts that produced it.

    ``segments`` counts the facts rendered into each system turn, in order;
    a pack built in one call has one segment, sequential composition appends
    more.  ``embeddings`` has one row per fact.
    """
    cache: KvCache
    config: ModelConfig
    facts: tuple[str, ...] = ()
    segments: tuple[int, ...] = ()
    embeddings: np.ndarray = field(default_factory=lambda: np.zeros((0, 64), dtype=F32))
    dialect: str = "chatml"
    use_template: bool = True
    known_broken: bool = False
    separator: str = " "

    def __post_init__(self):
        emb = np.ascontiguousarray(self.embeddings, dtype=F32)
        if emb.ndim != 2:
            raise ValueError("embeddings must be a 2-D array")
        emb.flags.writeable = False
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "facts", tuple(self.facts))
        object.__setattr__(self, "segments", tuple(int(s) for s in self.segments))
        if emb.shape[0] != len(self.facts):
            raise ValueError(f"{emb.shape[0]} embeddings for {len(self.facts)} facts")
        if sum(self.segments) != len(self.facts):
            raise ValueError("segment sizes do not add up to the fact count")
        if self.cache.fingerprint != self.config.fingerprint:
            raise FingerprintMismatch(self.config.fingerprint, self.cache.fingerprint)

    @property
    def fingerprint(self) -> str:
        return self.cache.fingerprint

    def fact_groups(self) -> list[list[str]]:
        groups, i = [], 0
        for n in self.segments:
            groups.append(list(self.facts[i:i + n]))
            i += n
        return groups

    def replace_cache(self, cache: KvCache) -> "KnowledgePack":
        return KnowledgePack(cache, self.config, self.facts, self.segments, self.embeddings,
                             self.dialect, self.use_template, self.known_broken, self.separator)
