"""Executable checks: prefix equivalence, template-split lint, token cost, answer metrics."""
from __future__ import annotations

import difflib
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .model import Model
from .pipeline import (DEFAULT_SEPARATOR, BuildRequest, build_pack, pack_tokens, query_tokens,
                       query_with_pack, render_conversation)
from .store import caches_equal, slice_prefix
from .tokenizer import ChatTemplate, Tokenizer, apply_template, default_tokenizer, get_template

# --------------------------------------------------------------------------
# answer metrics

_PUNCT = string.punctuation + "“”‘’"
_WS = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """Lowercase, collapse whitespace, strip surrounding punctuation."""
    return _WS.sub(" ", text.lower()).strip().strip(_PUNCT).strip()


def exact_match(prediction: str, gold: str) -> bool:
    """Normalized gold is a substring of the normalized prediction."""
    return normalize_answer(gold) in normalize_answer(prediction)


def _f1_tokens(text: str) -> list[str]:
    return [t.strip(_PUNCT) for t in normalize_answer(text).split() if t.strip(_PUNCT)]


def token_f1(prediction: str, gold: str) -> float:
    pred, ref = _f1_tokens(prediction), _f1_tokens(gold)
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    p = common / len(pred)
    r = common / len(ref)
    return 2 * p * r / (p + r)


def degeneracy_score(tokens: Sequence[int]) -> float:
    """Distinct 4-grams over total 4-grams; 1.0 for sequences shorter than 4."""
    if len(tokens) < 4:
        return 1.0
    grams = [tuple(tokens[i:i + 4]) for i in range(len(tokens) - 3)]
    return len(set(grams)) / len(grams)


# --------------------------------------------------------------------------
# equivalence


@dataclass
class Case:
    facts: list[str]
    question: str
    gold: str | None = None


@dataclass
class CaseOutcome:
    index: int
    cache_max_diff: float
    cache_equal: bool
    output_equal: bool
    first_divergence: int | None
    bytes_equal: bool
    pack_tokens: list[int]
    rag_tokens: list[int]
    pack_correct: bool | None = None
    rag_correct: bool | None = None


@dataclass
class EquivalenceReport:
    n_cases: int = 0
    cache_divergences: int = 0
    output_divergences: int = 0
    rendering_mismatches: list[int] = field(default_factory=list)
    outcomes: list[CaseOutcome] = field(default_factory=list)
    both_correct: int = 0
    both_wrong: int = 0
    disagree: int = 0

    @property
    def compared(self) -> int:
        return self.n_cases - len(self.rendering_mismatches)

    @property
    def clean(self) -> bool:
        return not (self.cache_divergences or self.output_divergences or self.rendering_mismatches)

    def summary(self) -> str:
        lines = [
            f"cases: {self.n_cases}",
            f"cache divergences: {self.cache_divergences}/{self.compared}",
            f"divergences: {self.output_divergences}/{self.compared}",
        ]
        if self.rendering_mismatches:
            lines.append(f"harness rendering mismatches (excluded): {self.rendering_mismatches}")
        if any(o.pack_correct is not None for o in self.outcomes):
            lines.append(f"both correct: {self.both_correct}  both wrong: {self.both_wrong}  "
                         f"disagree: {self.disagree}")
        return "\n".join(lines)


def check_equivalence(cases: Sequence[Case], model: Model, dialect: str = "chatml",
                      max_new: int = 32, separator: str = DEFAULT_SEPARATOR,
                      rag_separator: str | None = None) -> EquivalenceReport:
    """Run every case through the pack arm and the single-pass arm and compare.

    Cases whose two arms do not render to the same token stream are a harness
    bug, listed separately and kept out of the divergence tallies.
    """
    if not cases:
        raise ValueError("check_equivalence needs at least one case")
    rag_sep = separator if rag_separator is None else rag_separator
    template = get_template(dialect)
    rep = EquivalenceReport(n_cases=len(cases))
    for i, case in enumerate(cases):
        pack = build_pack(BuildRequest(case.facts, dialect, True, separator), model)
        user, _ = query_tokens(pack, case.question, model)
        sys_part, user_part = render_conversation([case.facts], case.question, template, rag_sep)
        joint_prompt = model.encode(sys_part + user_part)
        pack_len = pack.cache.length
        stream = pack_tokens(pack.fact_groups(), dialect, True, separator, model)
        if joint_prompt != stream + user:
            rep.rendering_mismatches.append(i)
            continue

        _, joint_cache = model.forward_pass(joint_prompt)
        eq = caches_equal(pack.cache, slice_prefix(joint_cache, pack_len), 0.0)
        res = query_with_pack(pack, case.question, max_new, model)
        rag_out = model.generate_greedy(joint_prompt, max_new=max_new)
        div = _first_div(res.tokens, rag_out)
        bytes_eq = model.tokenizer.detokenize(res.tokens) == model.tokenizer.detokenize(rag_out)
        out = CaseOutcome(i, eq.max_diff, eq.equal, div is None and bytes_eq, div, bytes_eq,
                          res.tokens, rag_out)
        if not eq.equal:
            rep.cache_divergences += 1
        if not out.output_equal:
            rep.output_divergences += 1
        if case.gold is not None:
            out.pack_correct = exact_match(res.answer, case.gold)
            out.rag_correct = exact_match(model.tokenizer.decode(rag_out), case.gold)
            if out.pack_correct and out.rag_correct:
                rep.both_correct += 1
            elif not out.pack_correct and not out.rag_correct:
                rep.both_wrong += 1
            else:
                rep.disagree += 1
        rep.outcomes.append(out)
    return rep


def _first_div(a: Sequence[int], b: Sequence[int]) -> int | None:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return None if len(a) == len(b) else min(len(a), len(b))


# --------------------------------------------------------------------------
# template split lint


@dataclass(frozen=True)
class Finding:
    kind: str          # duplicate-special | spurious-special | missing-special | extra-text | missing-text
    token: str
    position: int      # index in the split-path token stream (single path for missing-*)

    def __str__(self):
        return f"{self.kind} {self.token} at position {self.position}"


def lint_template_split(system_text: str, user_text: str, template: ChatTemplate | str,
                        tokenizer: Tokenizer | None = None) -> list[Finding]:
    """Diff the two-call rendering against the single-call rendering.

    Returns no findings iff the two token streams are identical.
    """
    if isinstance(template, str):
        template = get_template(template)
    tok = tokenizer or default_tokenizer()
    msgs = [("system", system_text), ("user", user_text)]
    single = tok.tokenize(apply_template(msgs, template, single_pass=True, add_generation_prompt=True))
    split = tok.tokenize(apply_template(msgs, template, single_pass=False, add_generation_prompt=True))
    if single == split:
        return []
    findings: list[Finding] = []
    single_set = set(single)
    sm = difflib.SequenceMatcher(a=single, b=split, autojunk=False)
    for op, a0, a1, b0, b1 in sm.get_opcodes():
        if op == "equal":
            continue
        if op in ("insert", "replace"):
            text_run: list[int] = []
            for pos in range(b0, b1):
                t = split[pos]
                if tok.is_special(t):
                    kind = "duplicate-special" if t in single_set else "spurious-special"
                    findings.append(Finding(kind, tok.token_name(t), pos))
                else:
                    text_run.append(pos)
            if text_run:
                frag = tok.decode(split[p] for p in text_run)
                findings.append(Finding("extra-text", repr(frag), text_run[0]))
        if op in ("delete", "replace"):
            text_run = []
            for pos in range(a0, a1):
                t = single[pos]
                if tok.is_special(t):
                    findings.append(Finding("missing-special", tok.token_name(t), pos))
                else:
                    text_run.append(pos)
            if text_run:
                frag = tok.decode(single[p] for p in text_run)
                findings.append(Finding("missing-text", repr(frag), text_run[0]))
    return findings


# --------------------------------------------------------------------------
# token cost


@dataclass
class StepCost:
    step: int
    kv_tokens: int
    rag_tokens: int
    rag_tokens_without_question: int

    @property
    def savings(self) -> int:
        return self.rag_tokens - self.kv_tokens

    @property
    def percent(self) -> int:
        """Savings over RAG cost, rounded half-up to a whole percent."""
        if self.rag_tokens <= 0:
            return 0
        return (200 * self.savings + self.rag_tokens) // (2 * self.rag_tokens)


@dataclass
class TokenCostReport:
    steps: list[StepCost]

    def final(self) -> StepCost:
        return self.steps[-1]

    def table(self) -> str:
        head = f"{'step':>4}  {'KV tok':>7}  {'RAG tok':>7}  {'RAG-q':>7}  {'savings':>13}"
        rows = [head]
        for s in self.steps:
            rows.append(f"{s.step:>4}  {s.kv_tokens:>7}  {s.rag_tokens:>7}  "
                        f"{s.rag_tokens_without_question:>7}  {s.savings:>6} ({s.percent}%)")
        return "\n".join(rows)

    def records(self) -> list[str]:
        return [f"step={s.step} kv_tokens={s.kv_tokens} rag_tokens={s.rag_tokens} "
                f"rag_tokens_without_question={s.rag_tokens_without_question} "
                f"savings={s.savings} savings_pct={s.percent}" for s in self.steps]


def token_cost_report(steps: int, question_tokens: int, per_step_fact_tokens: Sequence[int],
                      fixed_frame_tokens: int = 0) -> TokenCostReport:
    """KV cost stays at the question; RAG cost adds frame plus every fact so far."""
    if len(per_step_fact_tokens) != steps:
        raise ValueError(f"{len(per_step_fact_tokens)} fact counts for {steps} steps")
    rows = []
    total = 0
    for s, n in enumerate(per_step_fact_tokens, 1):
        total += n
        rag = question_tokens + fixed_frame_tokens + total
        rows.append(StepCost(s, question_tokens, rag, rag - question_tokens))
    return TokenCostReport(rows)


def split_evenly(total: int, steps: int) -> list[int]:
    """``total`` spread over ``steps`` with the remainder on the earliest steps."""
    base, rem = divmod(total, steps)
    return [base + (1 if i < rem else 0) for i in range(steps)]


def accumulation_report(step_facts: Sequence[Sequence[str]], question: str, model: Model,
                        dialect: str = "chatml", separator: str = DEFAULT_SEPARATOR) -> TokenCostReport:
    """Measured costs when step ``s`` has retrieved ``step_facts[:s]``.

    KV cost is the user turn fed after the pack; RAG cost is the whole
    single-pass prompt.
    """
    template = get_template(dialect)
    q_only = len(model.encode(question, template_specials=False))
    rows = []
    for s in range(1, len(step_facts) + 1):
        groups = [list(g) for g in step_facts[:s]]
        sys_part, user_part = render_conversation(groups, question, template, separator)
        kv = len(model.encode(user_part))
        rag = len(model.encode(sys_part)) + kv
        rows.append(StepCost(s, kv, rag, rag - q_only))
    return TokenCostReport(rows)


# --------------------------------------------------------------------------
# cases files


class CasesFileError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def parse_cases(text: str) -> list[Case]:
    """One case per line: ``fact | fact | ...<TAB>question[<TAB>gold]``.

    Blank lines and ``#`` comments are skipped.
    """
    cases = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise CasesFileError(lineno, f"expected 2 or 3 tab-separated columns, got {len(cols)}")
        facts = [f.strip() for f in cols[0].split("|") if f.strip()]
        question = cols[1].strip()
        if not question:
            raise CasesFileError(lineno, "empty question")
        gold = cols[2].strip() if len(cols) == 3 else None
        cases.append(Case(facts, question, gold or None))
    return cases
