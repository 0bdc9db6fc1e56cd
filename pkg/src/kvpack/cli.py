"""``kvpack`` command line: build, query, compose, steer, route, verify, report-tokens, inspect."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

from . import formats
from .config import RunConfig, load_run_config
from .errors import FingerprintMismatch, FormatError, KvPackError, PositionOverflow, UnknownDialect
from .model import Model
from .pipeline import BuildRequest, build_pack, compose_naive, compose_sequential, query_with_pack
from .routing import answer_via_banks, build_bank_index, route_query
from .steering import apply_delta, build_delta, delta_cosine, dual_channel_query, resolve_layers
from .store import KnowledgePack
from .verify import (CasesFileError, accumulation_report, check_equivalence, degeneracy_score,
                     lint_template_split, parse_cases, split_evenly, token_cost_report)

log = logging.getLogger("kvpack")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _printable(s: str) -> str:
    """Escape control characters so one field stays on one line."""
    if s.isprintable():
        return s
    return "".join(c if c.isprintable() else c.encode("unicode_escape").decode("ascii") for c in s)


class Out:
    """Prints ``key: value`` lines, or ``key=value`` records with ``--format records``."""

    def __init__(self, fmt: str, timing: bool, stream=None):
        self.fmt = fmt
        self.timing = timing
        self.stream = stream or sys.stdout

    def _value(self, v) -> str:
        if isinstance(v, float):
            v = f"{v:.6g}"
        v = str(v) if not isinstance(v, (list, tuple)) else ",".join(map(str, v))
        v = _printable(v)
        if self.fmt == "records" and (not v or any(c.isspace() or c in '="' for c in v)):
            return json.dumps(v, ensure_ascii=False)
        return v

    def fields(self, **kv):
        items = [(k, v) for k, v in kv.items() if v is not None]
        if self.fmt == "records":
            print(" ".join(f"{k}={self._value(v)}" for k, v in items), file=self.stream)
        else:
            for k, v in items:
                print(f"{k.replace('_', ' ')}: {self._value(v)}", file=self.stream)

    def ms(self, name: str, value: float):
        if self.timing:
            self.fields(**{name: round(value, 3)})

    def text(self, line: str):
        if self.fmt == "records":
            print("# " + line, file=self.stream)
        else:
            print(line, file=self.stream)


# --------------------------------------------------------------------------
# helpers


def _read_lines(path: str) -> list[str]:
    text = Path(path).read_text("utf-8")
    return [ln for ln in (raw.rstrip("\r") for raw in text.split("\n")) if ln.strip()]


def _run_config(args) -> RunConfig:
    overrides = {"template": args.template, "seed": args.seed}
    try:
        return load_run_config(args.config, overrides)
    except ValueError as e:
        raise UsageError(f"bad configuration: {e}") from None


def _model(rc: RunConfig) -> Model:
    return Model(rc.model)


def _load(path: str, magic: bytes):
    return formats.load(path, expect=magic)


def _load_pack_checked(path: str, model: Model) -> KnowledgePack:
    pack = _load(path, formats.PACK_MAGIC)
    if pack.fingerprint != model.fingerprint:
        raise FingerprintMismatch(model.fingerprint, pack.fingerprint)
    return pack


def _pack_or_facts(path: str, model: Model, rc: RunConfig, raw: bool) -> KnowledgePack:
    if Path(path).read_bytes()[:4] == formats.PACK_MAGIC:
        return _load_pack_checked(path, model)
    return build_pack(BuildRequest(_read_lines(path), rc.template, not raw), model)


# --------------------------------------------------------------------------
# subcommands


def cmd_build(args, rc: RunConfig, out: Out) -> int:
    model = _model(rc)
    facts = _read_lines(args.facts)
    if not facts:
        log.warning("%s holds no facts; writing a frame-only pack", args.facts)
    t0 = time.perf_counter()
    pack = build_pack(BuildRequest(facts, rc.template, not args.raw), model)
    elapsed = (time.perf_counter() - t0) * 1e3
    size = formats.save(pack, args.out)
    out.fields(fingerprint=pack.fingerprint, facts=len(pack.facts), tokens=pack.cache.length,
               template=rc.template if pack.use_template else "raw", bytes=size, out=args.out)
    out.ms("build_ms", elapsed)
    return EXIT_OK


def cmd_query(args, rc: RunConfig, out: Out) -> int:
    model = _model(rc)
    pack = _load_pack_checked(args.pack, model)
    target = "k" if args.steer_keys else "v"
    t0 = time.perf_counter()
    if args.delta:
        delta = _load(args.delta, formats.DELTA_MAGIC)
        res = dual_channel_query(pack, delta, args.alpha, args.layers, args.question, model,
                                 args.max_new, target).result
    else:
        if args.steer_keys:
            raise UsageError("--steer-keys needs --delta")
        res = query_with_pack(pack, args.question, args.max_new, model)
    elapsed = (time.perf_counter() - t0) * 1e3
    out.fields(answer=res.answer, kv_tokens=res.prompt_tokens, rag_tokens=res.rag_tokens,
               rag_tokens_without_question=res.rag_tokens_without_question,
               degeneracy=round(degeneracy_score(res.tokens), 4))
    if args.delta:
        rng = resolve_layers(args.layers, model.config.n_layers)
        out.fields(alpha=args.alpha, layers=str(rng), target="keys" if args.steer_keys else "values")
        if args.steer_keys:
            log.warning("--steer-keys is a debug path; steering keys breaks attention")
    out.ms("query_ms", elapsed)
    return EXIT_OK


def cmd_compose(args, rc: RunConfig, out: Out) -> int:
    model = _model(rc)
    a = _load_pack_checked(args.pack_a, model)
    if args.naive:
        b = _pack_or_facts(args.b, model, rc, not a.use_template)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pack = compose_naive(a, b)
        log.warning("naive composition keeps B's rotary positions; the result is marked known-broken")
    else:
        if Path(args.b).read_bytes()[:4] == formats.PACK_MAGIC:
            facts = list(_load_pack_checked(args.b, model).facts)
        else:
            facts = _read_lines(args.b)
        pack = compose_sequential(a, BuildRequest(facts, a.dialect, a.use_template, a.separator), model)
    formats.save(pack, args.out)
    out.fields(mode="naive" if args.naive else "sequential", facts=len(pack.facts),
               tokens=pack.cache.length, segments=list(pack.segments),
               known_broken="yes" if pack.known_broken else "no", out=args.out)
    return EXIT_OK


def cmd_steer(args, rc: RunConfig, out: Out) -> int:
    model = _model(rc)
    if args.steer_cmd == "build-delta":
        good, bad = _read_lines(args.good), _read_lines(args.bad)
        layers = None
        if args.layers:
            layers = resolve_layers(args.layers, model.config.n_layers).indices
        delta = build_delta(good, bad, rc.template, model, layers)
        formats.save(delta, args.out)
        out.fields(pairs=len(good), layers=list(delta.layers), length=delta.length,
                   truncated_pairs=delta.truncated_pairs, norm=delta.norm(), out=args.out)
    elif args.steer_cmd == "apply":
        pack = _load_pack_checked(args.pack, model)
        delta = _load(args.delta, formats.DELTA_MAGIC)
        target = "k" if args.steer_keys else "v"
        steered = pack.replace_cache(apply_delta(pack.cache, delta, args.alpha, args.layers, target))
        formats.save(steered, args.out)
        out.fields(alpha=args.alpha, layers=str(resolve_layers(args.layers, model.config.n_layers)),
                   target="keys" if args.steer_keys else "values", out=args.out)
    else:
        a = _load(args.delta_a, formats.DELTA_MAGIC)
        b = _load(args.delta_b, formats.DELTA_MAGIC)
        out.fields(cosine=round(delta_cosine(a, b), 6))
    return EXIT_OK


def cmd_route(args, rc: RunConfig, out: Out) -> int:
    model = _model(rc)
    if args.build:
        facts = _read_lines(args.build)
        t0 = time.perf_counter()
        index = build_bank_index(facts, args.k, rc.seed)
        elapsed = (time.perf_counter() - t0) * 1e3
        out.fields(banks=index.k, facts=len(index.facts))
        out.ms("index_ms", elapsed)
        if args.out:
            formats.save(index, args.out)
    elif args.index:
        index = _load(args.index, formats.INDEX_MAGIC)
    else:
        raise UsageError("route needs an index file or --build FACTS")
    out.fields(storage_per_fact=round(index.storage_per_fact(), 1))
    if args.question is None:
        return EXIT_OK
    if args.no_answer:
        r = route_query(index, args.question, args.top)
        out.fields(bank=r.bank, fact_ids=r.fact_ids, scores=[f"{s:.4f}" for s in r.scores])
        return EXIT_OK
    ans = answer_via_banks(index, args.question, model, rc.template, args.max_new, args.top)
    r = ans.route
    out.fields(bank=r.bank, fact_ids=r.fact_ids, scores=[f"{s:.4f}" for s in r.scores],
               top_fact=index.facts[r.fact_ids[0]] if r.fact_ids else "", answer=ans.answer,
               kv_tokens=ans.prompt_tokens, rag_tokens=ans.rag_tokens)
    out.ms("route_ms", ans.route_ms)
    out.ms("recompute_ms", ans.recompute_ms)
    out.ms("generate_ms", ans.generate_ms)
    return EXIT_OK


def _verify_tokens(path: str, out: Out) -> int:
    """Lines: ``steps question_tokens rag_tokens [expected_percent]``."""
    ok = True
    for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        cols = s.split()
        try:
            nums = [int(c.rstrip("%")) for c in cols]
        except ValueError:
            raise CasesFileError(lineno, f"expected integers, got {s!r}") from None
        if len(nums) not in (3, 4):
            raise CasesFileError(lineno, "expected 'steps question_tokens rag_tokens [percent]'")
        steps, q, rag = nums[:3]
        if steps < 1 or rag < q:
            raise CasesFileError(lineno, "steps must be positive and rag_tokens >= question_tokens")
        row = token_cost_report(steps, q, split_evenly(rag - q, steps)).final()
        match = None
        if len(nums) == 4:
            match = "yes" if row.percent == nums[3] else "no"
            ok &= row.percent == nums[3]
        out.fields(line=lineno, steps=steps, kv_tokens=row.kv_tokens, rag_tokens=row.rag_tokens,
                   savings=f"{row.savings} ({row.percent}%)", matches=match)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(args, rc: RunConfig, out: Out) -> int:
    if args.mode == "tokens":
        return _verify_tokens(args.cases, out)
    text = Path(args.cases).read_text("utf-8")
    if args.mode == "lint":
        findings_total = 0
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise CasesFileError(lineno, "lint lines are 'system<TAB>user'")
            findings = lint_template_split(cols[0], cols[1], rc.template)
            findings_total += len(findings)
            out.fields(line=lineno, dialect=rc.template, findings=len(findings))
            for f in findings:
                out.fields(line=lineno, kind=f.kind, token=f.token, position=f.position)
        out.fields(total_findings=findings_total)
        return EXIT_FAIL if findings_total else EXIT_OK
    cases = parse_cases(text)
    if not cases:
        raise CasesFileError(0, "no cases")
    model = _model(rc)
    rep = check_equivalence(cases, model, rc.template, args.max_new)
    for o in rep.outcomes:
        if not (o.cache_equal and o.output_equal):
            out.fields(case=o.index, cache_max_diff=o.cache_max_diff, first_divergence=o.first_divergence)
    for line in rep.summary().splitlines():
        out.text(line)
    return EXIT_OK if rep.clean else EXIT_FAIL


def cmd_report_tokens(args, rc: RunConfig, out: Out) -> int:
    if args.facts:
        if not args.question:
            raise UsageError("report-tokens --facts needs --question")
        facts = _read_lines(args.facts)
        steps = args.steps or len(facts)
        if not 1 <= steps <= max(1, len(facts)):
            raise UsageError(f"--steps must be between 1 and {len(facts)}")
        per = split_evenly(len(facts), steps)
        groups, i = [], 0
        for n in per:
            groups.append(facts[i:i + n])
            i += n
        rep = accumulation_report(groups, args.question, _model(rc), rc.template)
    else:
        if args.question_tokens is None or args.rag_tokens is None or not args.steps:
            raise UsageError("give --facts and --question, or --steps, --question-tokens and --rag-tokens")
        q, rag = args.question_tokens, args.rag_tokens
        if rag < q:
            raise UsageError("--rag-tokens must be at least --question-tokens")
        rep = token_cost_report(args.steps, q, split_evenly(rag - q, args.steps))
    if out.fmt == "records":
        for line in rep.records():
            print(line, file=out.stream)
    else:
        print(rep.table(), file=out.stream)
    return EXIT_OK


def cmd_inspect(args, rc: RunConfig, out: Out) -> int:
    obj = formats.load(args.file)
    for line in formats.inspect(obj):
        out.text(line) if out.fmt == "text" else out.fields(line=line)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


_COMMON_DEFAULTS = {"config": None, "template": None, "seed": None, "format": "text",
                    "no_timing": False, "verbose": 0}


def build_parser() -> argparse.ArgumentParser:
    # defaults are suppressed so a subparser never clobbers a global flag given earlier
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--template", help="template dialect (chatml, header)")
    common.add_argument("--seed", type=int)
    common.add_argument("--format", choices=("text", "records"))
    common.add_argument("--no-timing", action="store_true", help="omit timing lines")
    common.add_argument("-v", "--verbose", action="count")

    p = argparse.ArgumentParser(prog="kvpack", parents=[common],
                                description="Build, compose, steer and route precomputed KV caches.")
    sub = p.add_subparsers(dest="cmd", required=True)

    b = sub.add_parser("build", parents=[common], help="facts file -> pack")
    b.add_argument("facts")
    b.add_argument("--raw", action="store_true", help="skip the chat template")
    b.add_argument("--out", "-o", required=True)
    b.set_defaults(func=cmd_build)

    q = sub.add_parser("query", parents=[common], help="answer a question against a pack")
    q.add_argument("pack")
    q.add_argument("--question", "-q", required=True)
    q.add_argument("--max-new", type=int, default=32)
    q.add_argument("--delta")
    q.add_argument("--alpha", type=float, default=1.0)
    q.add_argument("--layers", default="all")
    q.add_argument("--steer-keys", action="store_true", help="debug: apply the delta to keys")
    q.set_defaults(func=cmd_query)

    c = sub.add_parser("compose", parents=[common], help="extend a pack with more facts")
    c.add_argument("pack_a")
    c.add_argument("b", help="facts file or pack")
    mode = c.add_mutually_exclusive_group()
    mode.add_argument("--sequential", action="store_true", default=True)
    mode.add_argument("--naive", action="store_true")
    c.add_argument("--out", "-o", required=True)
    c.set_defaults(func=cmd_compose)

    s = sub.add_parser("steer", parents=[common], help="value-space steering deltas")
    ss = s.add_subparsers(dest="steer_cmd", required=True)
    sb = ss.add_parser("build-delta", parents=[common])
    sb.add_argument("--good", required=True)
    sb.add_argument("--bad", required=True)
    sb.add_argument("--layers", default=None)
    sb.add_argument("--out", "-o", required=True)
    sa = ss.add_parser("apply", parents=[common])
    sa.add_argument("pack")
    sa.add_argument("delta")
    sa.add_argument("--alpha", type=float, required=True)
    sa.add_argument("--layers", default="all")
    sa.add_argument("--steer-keys", action="store_true")
    sa.add_argument("--out", "-o", required=True)
    sc = ss.add_parser("cosine", parents=[common])
    sc.add_argument("delta_a")
    sc.add_argument("delta_b")
    s.set_defaults(func=cmd_steer)

    r = sub.add_parser("route", parents=[common], help="banked routing over many facts")
    r.add_argument("index", nargs="?")
    r.add_argument("--build", metavar="FACTS")
    r.add_argument("--k", type=int, default=None)
    r.add_argument("--out", "-o")
    r.add_argument("--question", "-q")
    r.add_argument("--top", type=int, default=1)
    r.add_argument("--max-new", type=int, default=32)
    r.add_argument("--no-answer", action="store_true", help="route only, skip generation")
    r.set_defaults(func=cmd_route)

    v = sub.add_parser("verify", parents=[common], help="equivalence, lint or token checks")
    v.add_argument("cases")
    v.add_argument("--mode", choices=("equivalence", "lint", "tokens"), default="equivalence")
    v.add_argument("--max-new", type=int, default=32)
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("report-tokens", parents=[common], help="KV vs RAG prompt cost per step")
    t.add_argument("--facts")
    t.add_argument("--question")
    t.add_argument("--steps", type=int)
    t.add_argument("--question-tokens", type=int)
    t.add_argument("--rag-tokens", type=int)
    t.set_defaults(func=cmd_report_tokens)

    i = sub.add_parser("inspect", parents=[common], help="dump a pack, delta or index file")
    i.add_argument("file")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, value in _COMMON_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, value)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    out = Out(args.format, not args.no_timing)
    try:
        rc = _run_config(args)
        return args.func(args, rc, out)
    except (UsageError, UnknownDialect, CasesFileError) as e:
        print(f"kvpack: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, FingerprintMismatch) as e:
        print(f"kvpack: error: {e}", file=sys.stderr)
        return EXIT_IO
    except (PositionOverflow, KvPackError, ValueError) as e:
        print(f"kvpack: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
