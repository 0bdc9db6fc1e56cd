"""Write phase, read phase and the two ways to compose packs."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FingerprintMismatch, PositionOverflow
from .model import Model
from .routing import embed_many
from .store import KnowledgePack, KvCache, concat_caches, empty_cache
from .tokenizer import ChatTemplate, get_template

DEFAULT_SEPARATOR = " "


def _text(s: str | bytes) -> str:
    return s.decode("utf-8") if isinstance(s, (bytes, bytearray)) else s


@dataclass
class BuildRequest:
    facts: Sequence[str | bytes]
    dialect: str = "chatml"
    use_template: bool = True
    separator: str = DEFAULT_SEPARATOR

    def __post_init__(self):
        self.facts = [_text(f) for f in self.facts]

    def joined(self) -> str:
        return self.separator.join(self.facts)


def system_messages(groups: Sequence[Sequence[str]], separator: str = DEFAULT_SEPARATOR):
    return [("system", separator.join(g)) for g in groups]


def render_conversation(groups: Sequence[Sequence[str]], question: str | None,
                        template: ChatTemplate, separator: str = DEFAULT_SEPARATOR
                        ) -> tuple[str, str]:
    """Render system turns + user turn in one call, split at the user turn.

    Returns ``(system_part, user_part)``; the user part carries the
    generation prompt.  Their concatenation is the single-pass rendering.
    """
    msgs = system_messages(groups, separator)
    n_sys = len(msgs)
    if question is not None:
        msgs.append(("user", question))
    segs = template.segments(msgs)
    system_part = "".join(segs[:1 + n_sys])
    user_part = "".join(segs[1 + n_sys:]) + template.generation_prompt()
    return system_part, user_part


def raw_text(groups: Sequence[Sequence[str]], separator: str = DEFAULT_SEPARATOR) -> str:
    return separator.join(separator.join(g) for g in groups if g)


def pack_tokens(pack_groups: Sequence[Sequence[str]], dialect: str, use_template: bool,
                separator: str, model: Model) -> list[int]:
    """Token stream the pack cache covers."""
    if use_template:
        sys_part, _ = render_conversation(pack_groups, None, get_template(dialect), separator)
        return model.encode(sys_part, template_specials=True)
    return model.encode(raw_text(pack_groups, separator), template_specials=False)


def build_pack(req: BuildRequest, model: Model) -> KnowledgePack:
    """Write phase: one forward pass over the rendered system segment.

    With ``use_template`` the facts are joined into a single system message
    and the cache covers everything the joint prompt places before the user
    turn.  Without it the joined text is tokenized bare (the no-template
    ablation).
    """
    get_template(req.dialect)           # unknown dialect fails early, either path
    groups = [list(req.facts)]
    if not req.use_template and not req.facts:
        groups = []
    tokens = pack_tokens(groups, req.dialect, req.use_template, req.separator, model)
    if len(tokens) > model.config.max_position:
        raise PositionOverflow(len(tokens), model.config.max_position)
    if tokens:
        _, cache = model.forward_pass(tokens)
    else:
        cache = empty_cache(model.config)
    return KnowledgePack(
        cache=cache,
        config=model.config,
        facts=tuple(req.facts),
        segments=tuple(len(g) for g in groups),
        embeddings=embed_many(req.facts),
        dialect=req.dialect,
        use_template=req.use_template,
        separator=req.separator,
    )


def build_pack_groups(groups: Sequence[Sequence[str]], model: Model, dialect: str = "chatml",
                      use_template: bool = True, separator: str = DEFAULT_SEPARATOR) -> KnowledgePack:
    """Single-pass pack over several system turns (the reference for composition)."""
    groups = [[_text(f) for f in g] for g in groups]
    tokens = pack_tokens(groups, dialect, use_template, separator, model)
    if len(tokens) > model.config.max_position:
        raise PositionOverflow(len(tokens), model.config.max_position)
    cache = model.forward_pass(tokens)[1] if tokens else empty_cache(model.config)
    facts = [f for g in groups for f in g]
    segs = [len(g) for g in groups if use_template or g]
    return KnowledgePack(cache, model.config, tuple(facts), tuple(segs), embed_many(facts),
                         dialect, use_template, separator=separator)


@dataclass
class QueryResult:
    answer: str
    tokens: list[int]
    prompt_tokens: int           # tokens actually fed (the user turn)
    rag_tokens: int              # what the single-pass prompt would cost
    pack_tokens: int
    question_tokens: int         # the question text alone
    user_tokens: list[int] = field(default_factory=list, repr=False)

    @property
    def rag_tokens_without_question(self) -> int:
        return self.rag_tokens - self.question_tokens

    @property
    def saved_tokens(self) -> int:
        return self.rag_tokens - self.prompt_tokens


def query_tokens(pack: KnowledgePack, question: str, model: Model) -> tuple[list[int], int]:
    """User-turn tokens for ``question`` and the token count of the joint RAG prompt."""
    template = get_template(pack.dialect)
    groups = pack.fact_groups() or [[]]
    sys_part, user_part = render_conversation(groups, question, template, pack.separator)
    user = model.encode(user_part)
    return user, len(model.encode(sys_part)) + len(user)


def query_with_pack(pack: KnowledgePack, question: str | bytes, max_new: int, model: Model,
                    cache: KvCache | None = None) -> QueryResult:
    """Read phase: feed only the user turn, with the pack cache as prefix."""
    if pack.fingerprint != model.fingerprint:
        raise FingerprintMismatch(model.fingerprint, pack.fingerprint)
    question = _text(question)
    cache = pack.cache if cache is None else cache
    user, rag_len = query_tokens(pack, question, model)
    out = model.generate_greedy(user, past=cache, max_new=max_new)
    return QueryResult(
        answer=model.tokenizer.decode(out),
        tokens=out,
        prompt_tokens=len(user),
        rag_tokens=rag_len,
        pack_tokens=cache.length,
        question_tokens=len(model.encode(question, template_specials=False)),
        user_tokens=user,
    )


def rag_generate(groups: Sequence[Sequence[str]], question: str, max_new: int, model: Model,
                 dialect: str = "chatml", separator: str = DEFAULT_SEPARATOR) -> tuple[list[int], list[int]]:
    """Single-pass reference: the whole conversation as one prompt, no cache."""
    template = get_template(dialect)
    sys_part, user_part = render_conversation(groups, question, template, separator)
    prompt = model.encode(sys_part + user_part)
    return model.generate_greedy(prompt, max_new=max_new), prompt


def _continuation_tokens(pack: KnowledgePack, reqs: Sequence[BuildRequest], model: Model) -> list[int]:
    """Tokens that extend ``pack``'s rendered segment by the requests' facts."""
    groups = pack.fact_groups()
    before = pack_tokens(groups, pack.dialect, pack.use_template, pack.separator, model)
    after_groups = groups + [list(r.facts) for r in reqs if pack.use_template or r.facts]
    after = pack_tokens(after_groups, pack.dialect, pack.use_template, pack.separator, model)
    if after[:len(before)] != before:
        raise ValueError("pack segment is not a prefix of the composed rendering")
    return after[len(before):]


def compose_sequential(pack_a: KnowledgePack, facts_b: BuildRequest | Sequence[BuildRequest],
                       model: Model) -> KnowledgePack:
    """Run B's segment with A's cache as prefix so B's positions continue after A.

    A list of requests is processed as one continuation in a single forward
    pass.
    """
    reqs = [facts_b] if isinstance(facts_b, BuildRequest) else list(facts_b)
    reqs = [r for r in reqs if r.facts]
    if not reqs:
        return pack_a
    if pack_a.fingerprint != model.fingerprint:
        raise FingerprintMismatch(model.fingerprint, pack_a.fingerprint)
    for r in reqs:
        if r.dialect != pack_a.dialect or r.use_template != pack_a.use_template:
            raise ValueError("composed requests must share the pack's dialect and template mode")
    tokens = _continuation_tokens(pack_a, reqs, model)
    past = pack_a.cache
    if past.end_position + len(tokens) > model.config.max_position:
        raise PositionOverflow(past.end_position + len(tokens), model.config.max_position)
    if past.length:
        _, cache = model.forward_pass(tokens, past=past)
    else:
        _, cache = model.forward_pass(tokens, position_offset=past.position_offset)
    new_facts = [f for r in reqs for f in r.facts]
    segs = list(pack_a.segments) + [len(r.facts) for r in reqs]
    emb = np.concatenate([pack_a.embeddings, embed_many(new_facts)], axis=0)
    return KnowledgePack(cache, pack_a.config, pack_a.facts + tuple(new_facts), tuple(segs), emb,
                         pack_a.dialect, pack_a.use_template, pack_a.known_broken, pack_a.separator)


def compose_naive(pack_a: KnowledgePack, pack_b: KnowledgePack) -> KnowledgePack:
    """Known-broken: concatenate raw tensors without shifting B's rotary positions.

    Kept only as the contrast arm for sequential composition.
    """
    if pack_a.fingerprint != pack_b.fingerprint:
        raise FingerprintMismatch(pack_a.fingerprint, pack_b.fingerprint)
    if not pack_b.facts:
        return pack_a
    warnings.warn("compose_naive ignores rotary positions; its cache is intentionally wrong",
                  stacklevel=2)
    cache = concat_caches(pack_a.cache, pack_b.cache)
    emb = np.concatenate([pack_a.embeddings, pack_b.embeddings], axis=0)
    return KnowledgePack(cache, pack_a.config, pack_a.facts + pack_b.facts,
                         pack_a.segments + pack_b.segments, emb, pack_a.dialect,
                         pack_a.use_template, True, pack_a.separator)
