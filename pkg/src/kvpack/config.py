"""Model configuration, fingerprints and the flat ``key = value`` config file."""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_VOCAB = 256 + 7


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_head: int = 16
    vocab_size: int = DEFAULT_VOCAB
    rope_theta: float = 10000.0
    max_position: int = 2048
    weight_seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_head", "vocab_size", "max_position"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_head % 2:
            raise ValueError("d_head must be even for rotary pairs")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(f"d_model ({self.d_model}) must equal n_heads * d_head "
                             f"({self.n_heads} * {self.d_head})")
        if self.vocab_size < 256:
            raise ValueError("vocab_size must cover the 256 byte ids")
        if not self.rope_theta > 0:
            raise ValueError("rope_theta must be positive")
        if not 0 <= self.weight_seed < 2**64:
            raise ValueError("weight_seed must fit in 64 bits")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self)


def config_fingerprint(cfg: ModelConfig) -> str:
    """16 hex chars of SHA-256 over the canonical field listing."""
    parts = [f"{f.name}={getattr(cfg, f.name)!r}" for f in dataclasses.fields(cfg)]
    digest = hashlib.sha256(("kvpack-model-v1|" + "|".join(parts)).encode("ascii"))
    return digest.hexdigest()[:16]


_INT_FIELDS = {f.name for f in dataclasses.fields(ModelConfig) if f.type in ("int", int)}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    template: str = "chatml"
    seed: int = 0
    verbosity: int = 0
    paths: dict = field(default_factory=dict)


def parse_flat(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ValueError(f"line {lineno}: expected 'key = value', got {s!r}")
        key, _, value = s.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_run_config(path: str | Path | None = None, overrides: dict | None = None,
                    env: dict | None = None) -> RunConfig:
    """Resolve model, template and seed from a config file, overrides and env.

    Precedence, lowest first: defaults, config file, explicit overrides,
    ``KVPACK_SEED``.
    """
    env = os.environ if env is None else env
    values: dict[str, str] = {}
    if path is not None:
        values.update(parse_flat(Path(path).read_text("utf-8")))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = str(v)
    model_kw = {}
    rest = {}
    for k, v in values.items():
        if k in _INT_FIELDS:
            model_kw[k] = int(v, 0)
        elif k == "rope_theta":
            model_kw[k] = float(v)
        else:
            rest[k] = v
    seed = int(rest.pop("seed", "0"), 0)
    if env.get("KVPACK_SEED"):
        seed = int(env["KVPACK_SEED"], 0)
    if "weight_seed" not in model_kw:
        model_kw["weight_seed"] = seed
    template = rest.pop("template", "chatml")
    verbosity = int(rest.pop("verbosity", "0"))
    return RunConfig(model=ModelConfig(**model_kw), template=template, seed=seed,
                     verbosity=verbosity, paths=rest)
