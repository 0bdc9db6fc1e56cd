"""Contrastive value-space steering on cached values.

A delta is the per-layer difference ``V(good) - V(bad)`` averaged over
example pairs.  Applying it never touches keys unless explicitly asked to
(the ``target="k"`` debug path that reproduces key-arithmetic collapse).

Applications are recorded on the cache as per-layer coefficients of atomic
deltas and folded into the value tensor in one canonical order.  That keeps
``apply(apply(c, d, a), d, b) == apply(c, d, a + b)`` and
``apply(c, compose(...)) == apply(apply(c, A), B)`` exact in float32, which
eager in-place addition cannot guarantee.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .config import ModelConfig
from .errors import FingerprintMismatch, SteeringError
from .model import Model
from .pipeline import pack_tokens, query_with_pack, QueryResult
from .store import KnowledgePack, KvCache, SteeringTerm

log = logging.getLogger(__name__)
F32 = np.float32

RANGE_NAMES = ("all", "early", "mid", "late")


@dataclass(frozen=True)
class LayerRange:
    name: str
    indices: tuple[int, ...]

    def __iter__(self):
        return iter(self.indices)

    def __str__(self):
        if self.name == "explicit":
            return ",".join(map(str, self.indices))
        lo, hi = (self.indices[0], self.indices[-1]) if self.indices else (0, -1)
        return f"{self.name} ({lo}-{hi})"


def resolve_layers(layers: str | Sequence[int] | LayerRange, n_layers: int) -> LayerRange:
    """Terciles: early ``[0, L//3)``, mid ``[L//3, 2L//3)``, late ``[2L//3, L)``.

    Also accepts an explicit list such as ``"0,2"`` or ``"1-3"``.
    """
    if isinstance(layers, LayerRange):
        return layers
    if not isinstance(layers, str):
        idx = tuple(sorted(set(int(i) for i in layers)))
        name = "explicit"
    else:
        s = layers.strip().lower()
        a, b = n_layers // 3, (2 * n_layers) // 3
        bounds = {"all": (0, n_layers), "early": (0, a), "mid": (a, b), "late": (b, n_layers)}
        if s in bounds:
            lo, hi = bounds[s]
            return LayerRange(s, tuple(range(lo, hi)))
        out = set()
        for part in s.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                out.update(range(int(lo), int(hi) + 1))
            else:
                out.add(int(part))
        idx = tuple(sorted(out))
        name = "explicit"
    bad = [i for i in idx if not 0 <= i < n_layers]
    if bad:
        raise SteeringError(f"layer indices {bad} outside 0..{n_layers - 1}")
    return LayerRange(name, idx)


@dataclass(frozen=True, eq=False)
class SteeringDelta:
    """Value-difference tensors for the covered layers.

    ``tensors`` has shape ``(len(layers), T_d, n_heads, d_head)``.  A delta
    produced by :func:`compose_deltas` also carries its weighted atomic
    components, which is what :func:`apply_delta` records on a cache.
    """
    tensors: np.ndarray
    layers: tuple[int, ...]
    config: ModelConfig
    labels: tuple[str, ...] = ()
    truncated_pairs: int = 0
    components: tuple[tuple["SteeringDelta", float], ...] | None = None

    def __post_init__(self):
        t = np.ascontiguousarray(self.tensors, dtype=F32)
        t.flags.writeable = False
        object.__setattr__(self, "tensors", t)
        object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        cfg = self.config
        if t.ndim != 4 or t.shape[0] != len(self.layers) or t.shape[2:] != (cfg.n_heads, cfg.d_head):
            raise SteeringError(f"delta tensor shape {t.shape} does not match "
                                f"{len(self.layers)} layers x (T, {cfg.n_heads}, {cfg.d_head})")
        if list(self.layers) != sorted(set(self.layers)):
            raise SteeringError("covered layers must be strictly increasing")
        if any(not 0 <= i < cfg.n_layers for i in self.layers):
            raise SteeringError("covered layer outside the model")

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint

    @property
    def length(self) -> int:
        return self.tensors.shape[1]

    @property
    def is_atomic(self) -> bool:
        return self.components is None

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.layers, self.tensors.shape)).encode())
        h.update(self.tensors.tobytes())
        return h.hexdigest()

    def layer_tensor(self, layer: int) -> np.ndarray | None:
        try:
            return self.tensors[self.layers.index(layer)]
        except ValueError:
            return None

    def expanded(self) -> tuple[tuple["SteeringDelta", float], ...]:
        return ((self, 1.0),) if self.components is None else self.components

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.tensors.astype(np.float64) ** 2)))


def _tokens_for(text: str, dialect: str, model: Model) -> list[int]:
    return pack_tokens([[text]], dialect, True, " ", model)


def build_delta(good: Sequence[str], bad: Sequence[str], dialect: str, model: Model,
                layers: Sequence[int] | None = None, labels: Sequence[str] | None = None
                ) -> SteeringDelta:
    """Average ``V(good) - V(bad)`` over pairs, rendering each text as a system turn.

    Pairs of unequal token length are truncated to the shorter one; the whole
    delta is cut to the shortest pair.  Keys are never kept.
    """
    if not good or not bad:
        raise SteeringError("build_delta needs at least one good/bad pair")
    if len(good) != len(bad):
        raise SteeringError(f"{len(good)} good examples but {len(bad)} bad ones")
    cfg = model.config
    cover = tuple(range(cfg.n_layers)) if layers is None else tuple(sorted(set(layers)))
    diffs = []
    truncated = 0
    for g, b in zip(good, bad):
        vg = model.forward_pass(_tokens_for(g, dialect, model))[1].values
        vb = model.forward_pass(_tokens_for(b, dialect, model))[1].values
        n = min(vg.shape[1], vb.shape[1])
        if vg.shape[1] != vb.shape[1]:
            truncated += 1
        diffs.append(vg[list(cover), :n].astype(np.float64) - vb[list(cover), :n])
    if truncated:
        log.info("build_delta: %d of %d pairs truncated to the shorter length", truncated, len(diffs))
    t_d = min(d.shape[1] for d in diffs)
    acc = np.zeros_like(diffs[0][:, :t_d])
    for d in diffs:
        acc += d[:, :t_d]
    mean = (acc / len(diffs)).astype(F32)
    if labels is None:
        labels = [f"pair{i}" for i in range(len(diffs))]
    return SteeringDelta(mean, cover, cfg, tuple(labels), truncated)


def _check_fp(expected: str, got: str) -> None:
    if expected != got:
        raise FingerprintMismatch(expected, got)


def apply_delta(cache: KvCache, delta: SteeringDelta, alpha: float, layers="all",
                target: str = "v") -> KvCache:
    """Add ``alpha * delta`` to the values of the chosen layers.

    Only the first ``min(T_cache, T_delta)`` rows move; keys, and every layer
    outside the range, are untouched.  ``target="k"`` steers keys instead and
    exists only to demonstrate why that breaks the model.
    """
    if target not in ("v", "k"):
        raise SteeringError("target must be 'v' or 'k'")
    _check_fp(cache.fingerprint, delta.fingerprint)
    rng = resolve_layers(layers, cache.n_layers)
    union = set(delta.layers)
    missing = [i for i in rng if i not in union]
    if missing:
        raise SteeringError(f"delta does not cover layers {missing}")
    alpha = float(alpha)
    if alpha == 0.0:
        return cache
    out = cache
    for atom, weight in delta.expanded():
        coeffs = [0.0] * cache.n_layers
        for i in rng:
            if i in atom.layers:
                coeffs[i] = alpha * weight
        term = SteeringTerm(target, atom.digest, atom.layers, atom.tensors, tuple(coeffs), delta.length)
        out = out.with_steering(term)
    return out


def compose_deltas(terms: Sequence[tuple[SteeringDelta, float]]) -> SteeringDelta:
    """Weighted sum over the union of covered layers, cut to the shortest term.

    Summation runs in ascending term order; uncovered layers contribute zero.
    """
    if not terms:
        raise SteeringError("compose_deltas needs at least one term")
    first = terms[0][0]
    for d, _ in terms[1:]:
        _check_fp(first.fingerprint, d.fingerprint)
    cfg = first.config
    layers = tuple(sorted(set().union(*(d.layers for d, _ in terms))))
    t_d = min(d.length for d, _ in terms)
    weights: dict[str, float] = {}
    atoms: dict[str, SteeringDelta] = {}
    for d, alpha in terms:
        for atom, w in d.expanded():
            atoms.setdefault(atom.digest, atom)
            weights[atom.digest] = weights.get(atom.digest, 0.0) + float(alpha) * w
    comps = tuple((atoms[k], w) for k, w in weights.items() if w != 0.0)
    out = np.zeros((len(layers), t_d, cfg.n_heads, cfg.d_head), dtype=F32)
    for li, layer in enumerate(layers):
        for d, alpha in terms:
            t = d.layer_tensor(layer)
            if t is not None:
                out[li] += F32(alpha) * t[:t_d]
    labels = tuple(lab for d, _ in terms for lab in d.labels)
    return SteeringDelta(out, layers, cfg, labels, sum(d.truncated_pairs for d, _ in terms), comps)


def delta_cosine(a: SteeringDelta, b: SteeringDelta) -> float:
    """Cosine of the flattened tensors over shared layers and the shorter length."""
    _check_fp(a.fingerprint, b.fingerprint)
    shared = [i for i in a.layers if i in b.layers]
    if not shared:
        raise SteeringError("deltas share no layers")
    n = min(a.length, b.length)
    va = np.concatenate([a.layer_tensor(i)[:n].ravel() for i in shared]).astype(np.float64)
    vb = np.concatenate([b.layer_tensor(i)[:n].ravel() for i in shared]).astype(np.float64)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(va, vb) / (na * nb))


def first_divergence(a: Sequence[int], b: Sequence[int]) -> int | None:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    if len(a) != len(b):
        return min(len(a), len(b))
    return None


@dataclass
class DualChannelResult:
    result: QueryResult
    alpha: float
    layers: LayerRange
    target: str
    baseline: QueryResult | None = None
    degeneracy: float = 1.0

    @property
    def answer(self) -> str:
        return self.result.answer

    @property
    def first_divergence(self) -> int | None:
        if self.baseline is None:
            return None
        return first_divergence(self.result.tokens, self.baseline.tokens)


def dual_channel_query(pack: KnowledgePack, delta: SteeringDelta, alpha: float, layers,
                       question: str, model: Model, max_new: int = 32, target: str = "v",
                       compare: bool = False) -> DualChannelResult:
    """Knowledge through the full cache, steering through a value delta, one read."""
    from .verify import degeneracy_score

    rng = resolve_layers(layers, model.config.n_layers)
    steered = apply_delta(pack.cache, delta, alpha, rng, target)
    res = query_with_pack(pack, question, max_new, model, cache=steered)
    base = None
    if compare:
        base = res if alpha == 0 else query_with_pack(pack, question, max_new, model)
    out = DualChannelResult(res, float(alpha), rng, target, base, degeneracy_score(res.tokens))
    if compare and out.first_divergence is not None:
        log.info("steered answer diverges from knowledge-only at token %d", out.first_divergence)
    return out
