"""Binary pack, delta and index files, plus their text dumps.

Everything is little-endian.  Each file opens with a 4-byte magic and a u16
version; tensors follow as row-major float32.  Streams are parsed strictly
front to back, so a short read and leftover bytes are told apart.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import BadMagic, FingerprintMismatch, SizeMismatch, TruncatedStream, UnsupportedVersion
from .routing import BankIndex
from .steering import SteeringDelta
from .store import KnowledgePack, KvCache

VERSION = 1
PACK_MAGIC = b"KVPK"
DELTA_MAGIC = b"KVSD"
INDEX_MAGIC = b"KVBI"

F32LE = np.dtype("<f4")
U32LE = np.dtype("<u4")

# n_layers n_heads d_model d_head vocab max_position | rope_theta | weight_seed
_CONFIG = struct.Struct("<6IdQ")
_FLAG_TEMPLATE = 1
_FLAG_BROKEN = 2


class _Reader:
    def __init__(self, data: bytes):
        self.buf = memoryview(bytes(data))
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedStream(f"stream ends inside {what} "
                                  f"(needed {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n].tobytes()
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))

    def u32(self, what: str) -> int:
        return self.unpack(_U32, what)[0]

    def array(self, dtype: np.dtype, shape: tuple[int, ...], what: str) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if n > len(self.buf) - self.pos:
            raise TruncatedStream(f"stream ends inside {what}: {shape} needs {n} bytes, "
                                  f"{len(self.buf) - self.pos} left")
        raw = self.take(n, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))

    def text(self, what: str) -> str:
        n = self.u32(what + " length")
        return self.take(n, what).decode("utf-8")

    def finish(self):
        extra = len(self.buf) - self.pos
        if extra:
            raise SizeMismatch(f"{extra} trailing bytes after the declared payload")


_U32 = struct.Struct("<I")
_MAGIC_VER = struct.Struct("<4sH")
_U16 = struct.Struct("<H")


def _header(r: _Reader, magic: bytes) -> int:
    head = r.buf[:4].tobytes()
    if head != magic[:len(head)]:
        raise BadMagic(f"expected magic {magic!r}, found {head!r}")
    r.take(4, "magic")
    (version,) = r.unpack(_U16, "version")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} (this build reads {VERSION})")
    return version


def _text_bytes(s: str) -> bytes:
    b = s.encode("utf-8")
    return _U32.pack(len(b)) + b


def _fixed(s: str, n: int, what: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > n:
        raise ValueError(f"{what} {s!r} longer than {n} bytes")
    return b.ljust(n, b"\0")


def _unfixed(b: bytes) -> str:
    return b.rstrip(b"\0").decode("utf-8")


def _config_bytes(cfg: ModelConfig) -> bytes:
    return _CONFIG.pack(cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head, cfg.vocab_size,
                        cfg.max_position, cfg.rope_theta, cfg.weight_seed)


def _read_config(r: _Reader) -> ModelConfig:
    nl, nh, dm, dh, vocab, maxpos, theta, wseed = r.unpack(_CONFIG, "model config")
    try:
        return ModelConfig(nl, nh, dm, dh, vocab, theta, maxpos, wseed)
    except ValueError as e:
        raise SizeMismatch(f"declared model config is invalid: {e}") from None


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype=F32LE).tobytes()


# --------------------------------------------------------------------------
# packs

_PACK_DIMS = struct.Struct("<16s8sIIIIII")   # dialect, separator, layers, T, offset, segs, facts, emb dim


def serialize_pack(pack: KnowledgePack) -> bytes:
    """Steering terms are folded in first; the file holds plain tensors."""
    cache = pack.cache.materialized()
    cfg = pack.config
    flags = (_FLAG_TEMPLATE if pack.use_template else 0) | (_FLAG_BROKEN if pack.known_broken else 0)
    parts = [
        _MAGIC_VER.pack(PACK_MAGIC, VERSION),
        struct.pack("<H", flags),
        cfg.fingerprint.encode("ascii"),
        _config_bytes(cfg),
        _PACK_DIMS.pack(_fixed(pack.dialect, 16, "dialect"), _fixed(pack.separator, 8, "separator"),
                        cache.n_layers, cache.length, cache.position_offset, len(pack.segments),
                        len(pack.facts), pack.embeddings.shape[1]),
    ]
    for layer in range(cache.n_layers):
        parts.append(_f32(cache.keys[layer]))
        parts.append(_f32(cache.values[layer]))
    parts.append(np.asarray(pack.segments, dtype=U32LE).tobytes())
    parts.extend(_text_bytes(f) for f in pack.facts)
    parts.append(_f32(pack.embeddings))
    return b"".join(parts)


def deserialize_pack(data: bytes) -> KnowledgePack:
    r = _Reader(data)
    _header(r, PACK_MAGIC)
    (flags,) = r.unpack(_U16, "flags")
    fp_raw = r.take(16, "fingerprint")
    cfg = _read_config(r)
    fp = fp_raw.decode("ascii", errors="replace")
    if fp != cfg.fingerprint:
        raise FingerprintMismatch(cfg.fingerprint, fp)
    dialect, sep, n_layers, t, offset, n_segs, n_facts, emb_dim = r.unpack(_PACK_DIMS, "pack dimensions")
    if n_layers != cfg.n_layers:
        raise SizeMismatch(f"pack declares {n_layers} layers but the config has {cfg.n_layers}")
    shape = (t, cfg.n_heads, cfg.d_head)
    keys = np.empty((n_layers,) + shape, dtype=np.float32)
    values = np.empty_like(keys)
    for layer in range(n_layers):
        keys[layer] = r.array(F32LE, shape, f"layer {layer} keys")
        values[layer] = r.array(F32LE, shape, f"layer {layer} values")
    segments = r.array(U32LE, (n_segs,), "segments")
    facts = [r.text(f"fact {i}") for i in range(n_facts)]
    emb = r.array(F32LE, (n_facts, emb_dim), "embeddings")
    r.finish()
    if int(segments.sum()) != n_facts:
        raise SizeMismatch(f"segments cover {int(segments.sum())} facts, header says {n_facts}")
    cache = KvCache(keys, values, offset, fp)
    return KnowledgePack(cache, cfg, tuple(facts), tuple(int(s) for s in segments), emb,
                         _unfixed(dialect), bool(flags & _FLAG_TEMPLATE), bool(flags & _FLAG_BROKEN),
                         _unfixed(sep))


# --------------------------------------------------------------------------
# deltas

_DELTA_DIMS = struct.Struct("<IIII")   # covered layers, T_d, labels, truncated pairs


def serialize_delta(delta: SteeringDelta) -> bytes:
    """A composed delta is stored as its summed tensor and reloads as atomic."""
    cfg = delta.config
    parts = [
        _MAGIC_VER.pack(DELTA_MAGIC, VERSION),
        cfg.fingerprint.encode("ascii"),
        _config_bytes(cfg),
        _DELTA_DIMS.pack(len(delta.layers), delta.length, len(delta.labels), delta.truncated_pairs),
        np.asarray(delta.layers, dtype=U32LE).tobytes(),
        _f32(delta.tensors),
    ]
    parts.extend(_text_bytes(s) for s in delta.labels)
    return b"".join(parts)


def deserialize_delta(data: bytes) -> SteeringDelta:
    r = _Reader(data)
    _header(r, DELTA_MAGIC)
    fp_raw = r.take(16, "fingerprint")
    cfg = _read_config(r)
    if fp_raw.decode("ascii", errors="replace") != cfg.fingerprint:
        raise FingerprintMismatch(cfg.fingerprint, fp_raw.decode("ascii", errors="replace"))
    n_cov, t_d, n_labels, truncated = r.unpack(_DELTA_DIMS, "delta dimensions")
    if n_cov > cfg.n_layers:
        raise SizeMismatch(f"delta covers {n_cov} layers of a {cfg.n_layers}-layer model")
    layers = tuple(int(i) for i in r.array(U32LE, (n_cov,), "covered layers"))
    tensors = r.array(F32LE, (n_cov, t_d, cfg.n_heads, cfg.d_head), "delta tensors")
    labels = tuple(r.text(f"label {i}") for i in range(n_labels))
    r.finish()
    try:
        return SteeringDelta(tensors, layers, cfg, labels, truncated)
    except ValueError as e:
        raise SizeMismatch(str(e)) from None


# --------------------------------------------------------------------------
# bank indexes

_INDEX_DIMS = struct.Struct("<IIIQ")   # dim, k, N, seed


def serialize_index(index: BankIndex) -> bytes:
    parts = [
        _MAGIC_VER.pack(INDEX_MAGIC, VERSION),
        _INDEX_DIMS.pack(index.dim, index.k, len(index.facts), index.seed),
        _f32(index.centroids),
        np.asarray(index.assignments, dtype=U32LE).tobytes(),
    ]
    parts.extend(_text_bytes(f) for f in index.facts)
    parts.append(_f32(index.embeddings))
    return b"".join(parts)


def deserialize_index(data: bytes) -> BankIndex:
    r = _Reader(data)
    _header(r, INDEX_MAGIC)
    dim, k, n, seed = r.unpack(_INDEX_DIMS, "index dimensions")
    centroids = r.array(F32LE, (k, dim), "centroids")
    assign = r.array(U32LE, (n,), "assignments").astype(np.int64)
    facts = tuple(r.text(f"fact {i}") for i in range(n))
    emb = r.array(F32LE, (n, dim), "embeddings")
    r.finish()
    if n and int(assign.max()) >= k:
        raise SizeMismatch(f"assignment to bank {int(assign.max())} but only {k} banks")
    return BankIndex(centroids, assign, facts, emb, seed)


# --------------------------------------------------------------------------
# files and dumps

_LOADERS = {PACK_MAGIC: deserialize_pack, DELTA_MAGIC: deserialize_delta, INDEX_MAGIC: deserialize_index}


def save(obj, path: str | Path) -> int:
    if isinstance(obj, KnowledgePack):
        data = serialize_pack(obj)
    elif isinstance(obj, SteeringDelta):
        data = serialize_delta(obj)
    elif isinstance(obj, BankIndex):
        data = serialize_index(obj)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    Path(path).write_bytes(data)
    return len(data)


def load(path: str | Path, expect: bytes | None = None):
    """Load any kvpack file by its magic; ``expect`` pins the kind."""
    data = Path(path).read_bytes()
    magic = data[:4]
    if expect is not None and magic != expect:
        raise BadMagic(f"{path}: expected magic {expect!r}, found {magic!r}")
    try:
        loader = _LOADERS[magic]
    except KeyError:
        if len(magic) < 4:
            raise TruncatedStream(f"{path}: file shorter than its magic") from None
        raise BadMagic(f"{path}: unknown magic {magic!r}") from None
    return loader(data)


def inspect(obj) -> list[str]:
    """Header fields, per-layer shapes and the fact list as text lines."""
    if isinstance(obj, KnowledgePack):
        c = obj.cache
        lines = [
            "kind: pack",
            f"version: {VERSION}",
            f"fingerprint: {obj.fingerprint}",
            f"config: {_config_line(obj.config)}",
            f"dialect: {obj.dialect}",
            f"template: {'yes' if obj.use_template else 'raw'}",
            f"known_broken: {'yes' if obj.known_broken else 'no'}",
            f"tokens: {c.length}",
            f"offset: {c.position_offset}",
            f"segments: {list(obj.segments)}",
        ]
        lines += [f"layer {i}: K {c.keys[i].shape} V {c.values[i].shape}" for i in range(c.n_layers)]
        lines.append(f"facts: {len(obj.facts)}")
        lines += [f"  [{i}] {f}" for i, f in enumerate(obj.facts)]
        return lines
    if isinstance(obj, SteeringDelta):
        lines = [
            "kind: delta",
            f"version: {VERSION}",
            f"fingerprint: {obj.fingerprint}",
            f"config: {_config_line(obj.config)}",
            f"layers: {list(obj.layers)}",
            f"length: {obj.length}",
            f"norm: {obj.norm():.6g}",
            f"truncated_pairs: {obj.truncated_pairs}",
        ]
        lines += [f"layer {l}: {obj.layer_tensor(l).shape}" for l in obj.layers]
        lines += [f"  label {s}" for s in obj.labels]
        return lines
    if isinstance(obj, BankIndex):
        sizes = [len(b) for b in obj.banks]
        lines = [
            "kind: index",
            f"version: {VERSION}",
            f"dim: {obj.dim}",
            f"banks: {obj.k}",
            f"facts: {len(obj.facts)}",
            f"seed: {obj.seed}",
            f"bank sizes: {sizes}",
            f"storage per fact: {obj.storage_per_fact():.1f} bytes",
        ]
        lines += [f"  [{i}] bank {int(b)}: {f}" for i, (b, f) in enumerate(zip(obj.assignments, obj.facts))]
        return lines
    raise TypeError(f"cannot inspect {type(obj).__name__}")


def _config_line(cfg: ModelConfig) -> str:
    return (f"layers={cfg.n_layers} heads={cfg.n_heads} d_model={cfg.d_model} d_head={cfg.d_head} "
            f"vocab={cfg.vocab_size} max_position={cfg.max_position} rope_theta={cfg.rope_theta:g} "
            f"weight_seed={cfg.weight_seed}")
