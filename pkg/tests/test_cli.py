import subprocess
import sys

import pytest

from kvpack.cli import main
from kvpack.routing import synthetic_corpus


@pytest.fixture
def files(tmp_path):
    (tmp_path / "facts.txt").write_text("Ada keeps owls.\nThe gate is red.\nBo sings bass.\n")
    (tmp_path / "more.txt").write_text("Cy rows boats.\n")
    (tmp_path / "empty.txt").write_text("")
    (tmp_path / "good.txt").write_text("Check every input.\n")
    (tmp_path / "bad.txt").write_text("Trust every input.\n")
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def fields(text):
    return dict(line.split(": ", 1) for line in text.splitlines() if ": " in line)


def test_build_and_raw(capsys, files):
    code, out, _ = run(capsys, "build", files / "facts.txt", "-o", files / "a.kvpk", "--no-timing")
    assert code == 0 and fields(out)["facts"] == "3"
    code, raw, _ = run(capsys, "build", files / "facts.txt", "--raw", "-o", files / "r.kvpk", "--no-timing")
    assert fields(raw)["tokens"] != fields(out)["tokens"]
    assert "build ms" not in out


def test_global_flags_before_subcommand(capsys, files):
    code, out, _ = run(capsys, "--no-timing", "--template", "header", "build", files / "facts.txt",
                       "-o", files / "h.kvpk")
    assert code == 0 and "build ms" not in out and fields(out)["template"] == "header"
    code, out, _ = run(capsys, "--format", "records", "inspect", files / "h.kvpk")
    assert code == 0 and 'line="kind: pack"' in out


def test_empty_facts_warns(capsys, files):
    code, out, err = run(capsys, "build", files / "empty.txt", "-o", files / "e.kvpk")
    assert code == 0 and fields(out)["facts"] == "0" and "no facts" in err


def test_query_alpha_zero_matches_plain(capsys, files):
    run(capsys, "build", files / "facts.txt", "-o", files / "a.kvpk")
    run(capsys, "steer", "build-delta", "--good", files / "good.txt", "--bad", files / "bad.txt",
        "-o", files / "d.kvsd")
    _, plain, _ = run(capsys, "query", files / "a.kvpk", "-q", "Who keeps owls?", "--no-timing")
    code, steered, _ = run(capsys, "query", files / "a.kvpk", "-q", "Who keeps owls?", "--delta",
                           files / "d.kvsd", "--alpha", "0", "--layers", "mid", "--no-timing")
    assert code == 0
    assert fields(plain)["answer"] == fields(steered)["answer"]
    assert fields(steered)["layers"] == "mid (1-1)"


def test_kv_tokens_constant_across_pack_sizes(capsys, files):
    (files / "fifty.txt").write_text("".join(f"Item {i} is {i * 7}.\n" for i in range(50)))
    (files / "one.txt").write_text("Item 0 is 0.\n")
    kv = []
    for name in ("one", "fifty"):
        run(capsys, "build", files / f"{name}.txt", "-o", files / f"{name}.kvpk")
        _, out, _ = run(capsys, "query", files / f"{name}.kvpk", "-q", "What?", "--max-new", "2")
        kv.append(fields(out)["kv tokens"])
    assert kv[0] == kv[1]


def test_compose_modes(capsys, files):
    run(capsys, "build", files / "facts.txt", "-o", files / "a.kvpk")
    code, out, _ = run(capsys, "compose", files / "a.kvpk", files / "more.txt", "-o", files / "s.kvpk")
    assert code == 0 and fields(out)["segments"] == "3,1" and fields(out)["known broken"] == "no"
    code, out, err = run(capsys, "compose", files / "a.kvpk", files / "more.txt", "--naive",
                         "-o", files / "n.kvpk")
    assert code == 0 and fields(out)["known broken"] == "yes" and "known-broken" in err


def test_steer_apply_and_cosine(capsys, files):
    run(capsys, "build", files / "facts.txt", "-o", files / "a.kvpk")
    run(capsys, "steer", "build-delta", "--good", files / "good.txt", "--bad", files / "bad.txt",
        "-o", files / "d.kvsd")
    code, out, _ = run(capsys, "steer", "apply", files / "a.kvpk", files / "d.kvsd", "--alpha", "2",
                       "-o", files / "st.kvpk")
    assert code == 0
    code, out, _ = run(capsys, "steer", "cosine", files / "d.kvsd", files / "d.kvsd")
    assert fields(out)["cosine"] == "1"


def test_route_build(capsys, files):
    c = synthetic_corpus(100)
    (files / "corpus.txt").write_text("\n".join(c.facts) + "\n")
    code, out, _ = run(capsys, "route", "--build", files / "corpus.txt", "-o", files / "i.kvbi",
                       "-q", c.queries[3], "--no-timing", "--max-new", "4")
    f = fields(out)
    assert code == 0 and f["banks"] == "5" and f["top fact"] == c.facts[3]
    assert float(f["storage per fact"]) < 1024
    code, out, _ = run(capsys, "route", files / "i.kvbi", "-q", c.queries[3], "--no-answer")
    assert fields(out)["fact ids"] == "3"


def test_verify_modes(capsys, files):
    (files / "t.txt").write_text("5 35 739 95\n3 35 438 92\n")
    code, out, _ = run(capsys, "verify", files / "t.txt", "--mode", "tokens")
    assert code == 0 and "704 (95%)" in out
    (files / "t_bad.txt").write_text("5 35 739 90\n")
    assert run(capsys, "verify", files / "t_bad.txt", "--mode", "tokens")[0] == 1
    (files / "l.txt").write_text("You help.\tHi?\n")
    assert run(capsys, "verify", files / "l.txt", "--mode", "lint")[0] == 0
    code, out, _ = run(capsys, "verify", files / "l.txt", "--mode", "lint", "--template", "header")
    assert code == 1 and "duplicate-special" in out and "<|begin_of_text|>" in out
    (files / "c.txt").write_text("Ada keeps owls. | The gate is red.\tWho keeps owls?\tAda\n")
    code, out, _ = run(capsys, "verify", files / "c.txt", "--max-new", "6")
    assert code == 0 and "divergences: 0/1" in out
    (files / "broken.txt").write_text("only one column\n")
    code, _, err = run(capsys, "verify", files / "broken.txt")
    assert code == 2 and "line 1" in err


def test_report_tokens(capsys, files):
    code, out, _ = run(capsys, "report-tokens", "--steps", "5", "--question-tokens", "35",
                       "--rag-tokens", "739", "--format", "records")
    assert code == 0 and out.splitlines()[-1].endswith("savings=704 savings_pct=95")
    code, out, _ = run(capsys, "report-tokens", "--facts", files / "facts.txt", "--question",
                       "Who?", "--steps", "3")
    assert code == 0 and len(out.splitlines()) == 4


def test_inspect_and_exit_codes(capsys, files):
    run(capsys, "build", files / "facts.txt", "-o", files / "a.kvpk")
    code, out, _ = run(capsys, "inspect", files / "a.kvpk")
    assert code == 0 and "kind: pack" in out and "Ada keeps owls." in out
    assert run(capsys, "inspect", files / "missing")[0] == 3
    (files / "junk").write_bytes(b"NOPE1234")
    assert run(capsys, "inspect", files / "junk")[0] == 3
    (files / "trunc.kvpk").write_bytes((files / "a.kvpk").read_bytes()[:-1])
    assert run(capsys, "inspect", files / "trunc.kvpk")[0] == 3
    assert run(capsys, "build", files / "facts.txt", "-o", files / "x", "--template", "zzz")[0] == 2
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_seed_changes_fingerprint_and_mismatch(capsys, files, monkeypatch):
    _, a, _ = run(capsys, "build", files / "facts.txt", "-o", files / "a.kvpk")
    monkeypatch.setenv("KVPACK_SEED", "5")
    _, b, _ = run(capsys, "build", files / "facts.txt", "-o", files / "b.kvpk")
    assert fields(a)["fingerprint"] != fields(b)["fingerprint"]
    code, _, err = run(capsys, "query", files / "a.kvpk", "-q", "x")
    assert code == 3 and "fingerprint" in err


def test_config_file(capsys, files):
    cfg = files / "run.cfg"
    cfg.write_text("n_layers = 3\ntemplate = header\n")
    code, out, _ = run(capsys, "build", files / "facts.txt", "-o", files / "a.kvpk", "--config", cfg)
    assert code == 0 and fields(out)["template"] == "header"
    code, out, _ = run(capsys, "inspect", files / "a.kvpk")
    assert "layers=3" in out
    cfg.write_text("d_model = 65\n")
    assert run(capsys, "build", files / "facts.txt", "-o", files / "x", "--config", cfg)[0] == 2


def test_deterministic_output(files):
    cmd = [sys.executable, "-m", "kvpack", "build", str(files / "facts.txt"), "-o", str(files / "a.kvpk"),
           "--no-timing"]
    outs = [subprocess.run(cmd, capture_output=True, text=True, check=True).stdout for _ in range(2)]
    q = [sys.executable, "-m", "kvpack", "query", str(files / "a.kvpk"), "-q", "Who?", "--no-timing",
         "--format", "records"]
    qs = [subprocess.run(q, capture_output=True, text=True, check=True).stdout for _ in range(2)]
    assert outs[0] == outs[1] and qs[0] == qs[1]
