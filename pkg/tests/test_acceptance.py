"""End-to-end acceptance checks on the default 4-layer model."""
import numpy as np
import pytest

from conftest import record
from golden import METRIC_TABLE
from kvpack import formats
from kvpack.errors import TruncatedStream
from kvpack.pipeline import (BuildRequest, build_pack, build_pack_groups, compose_naive, compose_sequential,
                             query_with_pack)
from kvpack.routing import BankIndex, build_bank_index, route_query, answer_via_banks, synthetic_corpus
from kvpack.steering import SteeringDelta, apply_delta, build_delta, compose_deltas, dual_channel_query
from kvpack.store import KnowledgePack, KvCache, caches_equal
from kvpack.verify import (Case, accumulation_report, check_equivalence, exact_match, lint_template_split,
                           split_evenly, token_cost_report, token_f1)

MAX_NEW = 32


def _cases(n, seed):
    rng = np.random.default_rng(seed)
    corpus = synthetic_corpus(4 * n, seed=seed)
    cases = []
    for _ in range(n):
        k = int(rng.integers(1, 5))
        ids = rng.choice(len(corpus.facts), size=k, replace=False)
        gold = int(ids[0])
        q = corpus.open_questions[gold] if rng.random() < 0.5 else corpus.queries[gold]
        cases.append(Case([corpus.facts[i] for i in ids], q, corpus.answers[gold]))
    return cases


@pytest.fixture(scope="module")
def equivalence(model):
    cases = _cases(200, seed=11)
    a = check_equivalence(cases[:100], model, "chatml", MAX_NEW)
    b = check_equivalence(cases[100:], model, "header", MAX_NEW)
    return a, b


def test_c01_prefix_equivalence_cache(equivalence):
    a, b = equivalence
    compared = a.compared + b.compared
    div = a.cache_divergences + b.cache_divergences
    ok = compared == 200 and div == 0
    record(1, ok, f"cache divergences: {div}/{compared} at tolerance 0")
    assert ok


def test_c02_prefix_equivalence_output(equivalence):
    a, b = equivalence
    compared = a.compared + b.compared
    div = a.output_divergences + b.output_divergences
    ok = compared == 200 and div == 0
    both = a.both_correct + b.both_correct
    wrong = a.both_wrong + b.both_wrong
    dis = a.disagree + b.disagree
    record(2, ok, f"divergences: {div}/{compared} over {MAX_NEW}-token greedy decodes "
                  f"({both} both correct, {wrong} both wrong, {dis} disagree)")
    assert ok


def test_c03_composition(model):
    rng = np.random.default_rng(3)
    corpus = synthetic_corpus(400, seed=3)
    exact = naive_div = 0
    for i in range(100):
        ids = rng.choice(len(corpus.facts), size=int(rng.integers(2, 6)), replace=False)
        cut = int(rng.integers(1, len(ids)))
        fa, fb = [corpus.facts[j] for j in ids[:cut]], [corpus.facts[j] for j in ids[cut:]]
        dialect = "chatml" if i % 2 == 0 else "header"
        a = build_pack(BuildRequest(fa, dialect), model)
        seq = compose_sequential(a, BuildRequest(fb, dialect), model)
        ref = build_pack_groups([fa, fb], model, dialect)
        exact += caches_equal(seq.cache, ref.cache).equal
        with pytest.warns(UserWarning):
            naive = compose_naive(a, build_pack(BuildRequest(fb, dialect), model))
        q = corpus.open_questions[int(ids[-1])]
        t_seq = query_with_pack(seq, q, MAX_NEW, model).tokens
        t_naive = query_with_pack(naive, q, MAX_NEW, model).tokens
        naive_div += t_seq != t_naive
    ok = exact == 100 and naive_div >= 50
    record(3, ok, f"sequential exact {exact}/100, naive diverges at output {naive_div}/100")
    assert ok


def test_c04_token_accounting(model):
    table = [(1, 35, 176, 80), (1, 31, 188, 84), (2, 35, 299, 88), (2, 31, 305, 90),
             (3, 35, 438, 92), (3, 31, 437, 93), (5, 35, 739, 95), (5, 31, 724, 96)]
    got = [token_cost_report(s, q, split_evenly(r - q, s)).final().percent for s, q, r, _ in table]
    want = [p for *_, p in table]
    corpus = synthetic_corpus(10, seed=4)
    rep = accumulation_report([corpus.facts[i:i + 2] for i in range(0, 10, 2)], corpus.queries[0], model)
    kv = [s.kv_tokens for s in rep.steps]
    rag = [s.rag_tokens for s in rep.steps]
    ok = got == want and len(set(kv)) == 1 and all(y > x for x, y in zip(rag, rag[1:]))
    record(4, ok, f"percentages {got}; desk scale KV {kv} vs RAG {rag}")
    assert ok


def test_c05_template_lint(model):
    a = lint_template_split("Facts: the gate is red.", "What colour is the gate?", "chatml")
    b = lint_template_split("Facts: the gate is red.", "What colour is the gate?", "header")
    dup_bos = any(f.kind == "duplicate-special" and f.token == "<|begin_of_text|>" for f in b)
    ok = a == [] and len(b) >= 2 and dup_bos
    record(5, ok, f"dialect A findings {len(a)}, dialect B findings {len(b)} "
                  f"(duplicated begin-of-text: {dup_bos})")
    assert ok


def test_c06_raw_vs_templated(model):
    rng = np.random.default_rng(6)
    corpus = synthetic_corpus(200, seed=6)
    differ = 0
    for i in range(50):
        facts = [corpus.facts[j] for j in rng.choice(200, size=int(rng.integers(1, 6)), replace=False)]
        dialect = "chatml" if i % 2 == 0 else "header"
        t = build_pack(BuildRequest(facts, dialect), model).cache.length
        r = build_pack(BuildRequest(facts, dialect, use_template=False), model).cache.length
        differ += t != r
    record(6, differ == 50, f"cache lengths differ in {differ}/50 fact sets")
    assert differ == 50


def test_c07_steering_algebra(model):
    cfg = model.config
    rng = np.random.default_rng(7)
    fails = {"identity": 0, "keys": 0, "linearity": 0, "compose": 0, "partition": 0}
    for _ in range(100):
        t = int(rng.integers(1, 40))
        shape = (cfg.n_layers, t, cfg.n_heads, cfg.d_head)
        cache = KvCache(rng.standard_normal(shape), rng.standard_normal(shape), int(rng.integers(0, 50)),
                        cfg.fingerprint)
        td = int(rng.integers(1, 45))

        def rand_delta():
            return SteeringDelta(rng.standard_normal((cfg.n_layers, td, cfg.n_heads, cfg.d_head)),
                                 range(cfg.n_layers), cfg)

        da, db = rand_delta(), rand_delta()
        a1, a2 = rng.uniform(-3, 3, size=2)
        r = ["all", "early", "mid", "late"][int(rng.integers(4))]
        fails["identity"] += not (np.array_equal(apply_delta(cache, da, 0.0, r).values, cache.values)
                                  and np.array_equal(apply_delta(cache, da, 0.0, r).keys, cache.keys))
        once = apply_delta(cache, da, a1, r)
        fails["keys"] += not np.array_equal(once.keys, cache.keys)
        fails["linearity"] += not np.array_equal(
            apply_delta(cache, da, a1 + a2, r).values, apply_delta(once, da, a2, r).values)
        comp = apply_delta(cache, compose_deltas([(da, a1), (db, a2)]), 1.0, r)
        seq = apply_delta(apply_delta(cache, da, a1, r), db, a2, r)
        fails["compose"] += not np.array_equal(comp.values, seq.values)
        part = cache
        for name in ("early", "mid", "late"):
            part = apply_delta(part, da, a1, name)
        fails["partition"] += not np.array_equal(part.values, apply_delta(cache, da, a1, "all").values)
    ok = not any(fails.values())
    record(7, ok, "failures per property over 100 instances: " +
           ", ".join(f"{k} {v}" for k, v in fails.items()))
    assert ok


def test_c08_rope_asymmetry(model):
    rng = np.random.default_rng(8)
    v_same = k_diff = 0
    for _ in range(50):
        tok = int(rng.integers(0, 256))
        i, j = rng.choice(model.config.max_position, size=2, replace=False)
        _, ci = model.forward_pass([tok], position_offset=int(i))
        _, cj = model.forward_pass([tok], position_offset=int(j))
        v_same += np.array_equal(ci.values, cj.values)
        dist = np.linalg.norm(ci.keys.astype(np.float64) - cj.keys)
        k_diff += dist > 1e-6
    ok = v_same == 50 and k_diff == 50
    record(8, ok, f"V rows identical {v_same}/50, K rows differ {k_diff}/50")
    assert ok


STEER_GOOD = ["Always check inputs and raise clear errors before use.",
              "Validate every value and log each failure with care."]
STEER_BAD = ["Just run it and hope that nothing goes wrong at all.",
             "Skip the checks and return whatever the call gives."]


def test_c09_key_steering_collapse(model):
    delta = build_delta(STEER_GOOD, STEER_BAD, "chatml", model)
    pack = build_pack(BuildRequest(["The river stone is amber.", "Seven clouds drift north."]), model)
    rng = np.random.default_rng(9)
    words = "alpha beta gamma delta river stone light cloud quiet north seven amber".split()
    prompts = [" ".join(rng.choice(words, 6)) + "?" for _ in range(20)]
    alpha = 1.0
    v = np.mean([dual_channel_query(pack, delta, alpha, "all", p, model, MAX_NEW, "v").degeneracy
                 for p in prompts])
    k = np.mean([dual_channel_query(pack, delta, alpha, "all", p, model, MAX_NEW, "k").degeneracy
                 for p in prompts])
    ok = k <= v - 0.2
    record(9, ok, f"mean distinct-4-gram score at alpha {alpha}: values {v:.3f}, keys {k:.3f} "
                  f"(needs keys <= values - 0.2)")
    assert ok, ("key steering does not lower the distinct-4-gram score on this random-weight model; "
                "see the project notes for the sweep")


def test_c10_routing(model):
    lines = []
    ok = True
    for n in (100, 1000, 5000):
        corpus = synthetic_corpus(n, seed=10)
        index = build_bank_index(corpus.facts)
        routed = top1 = 0
        for i, q in enumerate(corpus.queries):
            r = route_query(index, q)
            routed += index.assignments[i] == r.bank
            top1 += bool(r.fact_ids) and r.fact_ids[0] == i
        per_fact = index.storage_per_fact()
        ok &= routed == n and top1 == n and per_fact < 1024 and index.k == -(-n // 20)
        lines.append(f"N={n} k={index.k} routing {routed}/{n} top-1 {top1}/{n} {per_fact:.0f} B/fact")
    ans = answer_via_banks(index, corpus.queries[0], model, max_new=8)
    lines.append(f"recompute {ans.recompute_ms:.1f} ms")
    record(10, bool(ok), "; ".join(lines))
    assert ok


def _random_pack(model, rng, corpus):
    facts = [corpus.facts[j] for j in rng.choice(len(corpus.facts), size=int(rng.integers(0, 4)),
                                                 replace=False)]
    cfg = model.config
    t = int(rng.integers(0, 30))
    shape = (cfg.n_layers, t, cfg.n_heads, cfg.d_head)
    cache = KvCache(rng.standard_normal(shape), rng.standard_normal(shape), int(rng.integers(0, 100)),
                    cfg.fingerprint)
    emb = rng.standard_normal((len(facts), 64))
    return KnowledgePack(cache, cfg, tuple(facts), (len(facts),) if facts else (), emb,
                         ["chatml", "header"][int(rng.integers(2))], bool(rng.integers(2)),
                         bool(rng.integers(2)))


def test_c11_serialization(model):
    rng = np.random.default_rng(11)
    corpus = synthetic_corpus(60, seed=11)
    cfg = model.config
    kinds = {"pack": [0, 0], "delta": [0, 0], "index": [0, 0]}
    for _ in range(50):
        pack = _random_pack(model, rng, corpus)
        layers = sorted(rng.choice(cfg.n_layers, size=int(rng.integers(1, cfg.n_layers + 1)), replace=False))
        delta = SteeringDelta(rng.standard_normal((len(layers), int(rng.integers(1, 20)), cfg.n_heads,
                                                   cfg.d_head)), layers, cfg, ("a", "b"), int(rng.integers(3)))
        n = int(rng.integers(1, 30))
        k = int(rng.integers(1, n + 1))
        index = BankIndex(rng.standard_normal((k, 64)).astype(np.float32), rng.integers(0, k, size=n),
                          tuple(corpus.facts[:n]), rng.standard_normal((n, 64)).astype(np.float32),
                          int(rng.integers(0, 1000)))
        for name, obj, ser, de in (("pack", pack, formats.serialize_pack, formats.deserialize_pack),
                                   ("delta", delta, formats.serialize_delta, formats.deserialize_delta),
                                   ("index", index, formats.serialize_index, formats.deserialize_index)):
            data = ser(obj)
            kinds[name][0] += ser(de(data)) == data
            try:
                de(data[:-1])
            except TruncatedStream:
                kinds[name][1] += 1
    ok = all(v == [50, 50] for v in kinds.values())
    record(11, ok, ", ".join(f"{k} round-trip {v[0]}/50 truncation rejected {v[1]}/50"
                             for k, v in kinds.items()))
    assert ok


def test_c12_metrics():
    good = sum(exact_match(p, g) is em and token_f1(p, g) == pytest.approx(f1)
               for p, g, em, f1 in METRIC_TABLE)
    ok = good == len(METRIC_TABLE) == 12
    record(12, ok, f"golden metric table {good}/{len(METRIC_TABLE)}")
    assert ok
