"""Byte-level tokenizer and chat-template rendering."""
from __future__ import annotations

import configparser
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import UnknownDialect, UnknownRole

ROLES = ("system", "user", "assistant")

Message = tuple[str, str]


def _as_bytes(text: str | bytes) -> bytes:
    return text.encode("utf-8") if isinstance(text, str) else bytes(text)


class Tokenizer:
    """Bytes map to ids 0..255; special markers get ids from 256 upward."""

    def __init__(self, specials: Sequence[str] = (), end_of_text: str | None = None):
        self.specials = tuple(specials)
        if len(set(self.specials)) != len(self.specials):
            raise ValueError("duplicate special token")
        self.special_ids = {s.encode("utf-8"): 256 + i for i, s in enumerate(self.specials)}
        self._by_id = {i: s for s, i in self.special_ids.items()}
        if self.specials:
            # longest marker first so overlapping spellings resolve greedily
            alts = sorted(self.special_ids, key=len, reverse=True)
            self._pattern = re.compile(b"|".join(re.escape(a) for a in alts))
        else:
            self._pattern = None
        self.eos_id = self.special_ids[end_of_text.encode("utf-8")] if end_of_text else None

    @property
    def n_specials(self) -> int:
        return len(self.specials)

    def tokenize(self, text: str | bytes, template_specials: bool = True) -> list[int]:
        data = _as_bytes(text)
        if not template_specials or self._pattern is None:
            return list(data)
        out: list[int] = []
        pos = 0
        for m in self._pattern.finditer(data):
            out.extend(data[pos:m.start()])
            out.append(self.special_ids[m.group()])
            pos = m.end()
        out.extend(data[pos:])
        return out

    def detokenize(self, ids: Iterable[int]) -> bytes:
        buf = bytearray()
        for i in ids:
            if i < 256:
                buf.append(i)
            elif i in self._by_id:
                buf += self._by_id[i]
            else:
                raise ValueError(f"token id {i} is not in the vocabulary")
        return bytes(buf)

    def decode(self, ids: Iterable[int]) -> str:
        return self.detokenize(ids).decode("utf-8", errors="replace")

    def is_special(self, token_id: int) -> bool:
        return token_id >= 256

    def token_name(self, token_id: int) -> str:
        if token_id in self._by_id:
            return self._by_id[token_id].decode("utf-8")
        return repr(bytes([token_id]))[1:]


@dataclass(frozen=True)
class ChatTemplate:
    dialect: str
    headers: dict = field(hash=False)
    footers: dict = field(hash=False)
    bos: str = ""
    preamble: str = ""

    def segments(self, messages: Sequence[Message]) -> list[str]:
        """Render one piece per message, preceded by the frame prefix.

        The result has ``len(messages) + 1`` entries and concatenates to the
        single-pass rendering (without a generation prompt).  Entry 0 holds
        begin-of-text and, if the dialect injects a preamble and the
        conversation does not open with a system turn, the injected system
        turn.
        """
        for role, _ in messages:
            if role not in ROLES:
                raise UnknownRole(role)
        prefix = self.bos
        pieces = []
        msgs = list(messages)
        if self.preamble:
            if msgs and msgs[0][0] == "system":
                msgs[0] = ("system", self.preamble + msgs[0][1])
            else:
                prefix += self.headers["system"] + self.preamble + self.footers["system"]
        for role, text in msgs:
            pieces.append(self.headers[role] + text + self.footers[role])
        return [prefix] + pieces

    def generation_prompt(self) -> str:
        return self.headers["assistant"]


def apply_template(messages: Sequence[Message], template: ChatTemplate,
                   single_pass: bool = True, add_generation_prompt: bool = False) -> str:
    """Render role-tagged messages to template-framed text.

    With ``single_pass=False`` every message is rendered by its own call and
    the pieces are concatenated, which is how duplicate begin-of-text and
    injected system turns sneak into a prompt.
    """
    if single_pass or not messages:
        text = "".join(template.segments(messages))
        if add_generation_prompt:
            text += template.generation_prompt()
        return text
    parts = [apply_template([m], template) for m in messages]
    if add_generation_prompt:
        parts[-1] += template.generation_prompt()
    return "".join(parts)


def _parse_value(raw: str):
    return json.loads(raw)


def load_dialects(path: str | Path | None = None) -> tuple[Tokenizer, dict[str, ChatTemplate]]:
    """Read a dialect definition file; returns the tokenizer and templates."""
    if path is None:
        text = resources.files("kvpack").joinpath("dialects.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string(text)
    reg = cp["registry"]
    specials = _parse_value(reg["specials"])
    eot = _parse_value(reg.get("end_of_text", "null"))
    tok = Tokenizer(specials, eot)
    templates = {}
    for name in cp.sections():
        if name == "registry":
            continue
        sec = cp[name]
        headers = {r: _parse_value(sec[f"{r}.header"]) for r in ROLES}
        footers = {r: _parse_value(sec[f"{r}.footer"]) for r in ROLES}
        templates[name] = ChatTemplate(
            dialect=name,
            headers=headers,
            footers=footers,
            bos=_parse_value(sec.get("bos", '""')),
            preamble=_parse_value(sec.get("preamble", '""')),
        )
    return tok, templates


@lru_cache(maxsize=None)
def default_dialects() -> tuple[Tokenizer, dict[str, ChatTemplate]]:
    return load_dialects()


def default_tokenizer() -> Tokenizer:
    return default_dialects()[0]


def get_template(dialect: str) -> ChatTemplate:
    templates = default_dialects()[1]
    if dialect not in templates:
        raise UnknownDialect(dialect, templates)
    return templates[dialect]
