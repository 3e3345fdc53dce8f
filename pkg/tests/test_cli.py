import json

import pytest

from c2srt.cli import main, tiny_gradcheck

SYNTH = ["--dim", "8", "--patches", "6", "--seen", "8", "--unseen", "2", "--train", "40", "--test", "12",
         "--labels", "2", "--n-adj", "2"]


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(d, seed=5):
    d.mkdir(exist_ok=True)
    assert run("synth", "--seed", seed, *SYNTH, "--out", d / "ds.bin", "--truth-graph", d / "truth.json",
               "--transcripts", d / "tx") == 0
    assert run("mine", "--data", d / "ds.bin", "--baseline", "random", "--seed", seed, "--n-adj", 2,
               "--out", d / "g.json") == 0
    assert run("--quiet", "train", "--data", d / "ds.bin", "--graph", d / "g.json", "--epochs", 2, "--batch", 16,
               "--seed", seed, "--out", d / "m.ckpt", "--log", d / "loss.csv") == 0
    assert run("eval", "--data", d / "ds.bin", "--model", d / "m.ckpt", "--graph", d / "g.json",
               "--task", "zsl", "--k", "1,2", "--out", d / "report.json") == 0
    return {n: (d / n).read_bytes() for n in ("ds.bin", "g.json", "m.ckpt", "report.json")}


def test_pipeline_byte_identical(tmp_path):
    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    assert a == b
    rep = json.loads(a["report.json"])
    assert rep["task"] == "zsl" and set(rep["perK"]) == {"1", "2"}
    man = json.loads((tmp_path / "a" / "m.ckpt.manifest.json").read_text())
    assert man["subcommand"] == "train" and set(man["inputs"]) == {"data", "graph"}
    assert (tmp_path / "a" / "ds.bin.manifest.json").exists()


def test_mine_from_transcripts(tmp_path):
    pipeline(tmp_path)
    assert run("mine", "--data", tmp_path / "ds.bin", "--transcripts", tmp_path / "tx", "--n-adj", 2,
               "--out", tmp_path / "mined.json") == 0
    mined = json.loads((tmp_path / "mined.json").read_text())
    truth = json.loads((tmp_path / "truth.json").read_text())
    hits = sum(len(set(mined["edges"][c]) & set(truth["edges"][c])) for c in truth["edges"])
    assert hits >= 0.7 * sum(len(v) for v in truth["edges"].values())


def test_usage_errors(tmp_path, capsys):
    assert run("synth", *SYNTH, "--out", tmp_path / "x.bin") == 2
    assert "--seed" in capsys.readouterr().err
    assert run("train", "--data", tmp_path / "x.bin") == 2
    assert run("frobnicate") == 2


def test_data_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    assert run("mine", "--data", bad, "--baseline", "random", "--out", tmp_path / "g.json") == 3
    assert run("mine", "--data", tmp_path / "missing.bin", "--baseline", "random", "--out", tmp_path / "g.json") == 3


def test_zsl_without_unseen_fails_clearly(tmp_path, capsys):
    args = ["--dim", "8", "--patches", "6", "--seen", "6", "--unseen", "0", "--train", "20", "--test", "6",
            "--labels", "2", "--n-adj", "2"]
    assert run("synth", "--seed", 1, *args, "--out", tmp_path / "ds.bin") == 0
    assert run("--quiet", "train", "--data", tmp_path / "ds.bin", "--ablate", "ist", "--epochs", 1,
               "--out", tmp_path / "m.ckpt") == 0
    assert run("eval", "--data", tmp_path / "ds.bin", "--model", tmp_path / "m.ckpt", "--task", "zsl") == 2
    assert "unseen" in capsys.readouterr().err
    assert run("eval", "--data", tmp_path / "ds.bin", "--model", tmp_path / "m.ckpt", "--task", "gzsl") == 0


def test_bad_ablate_flag(tmp_path):
    pipeline(tmp_path)
    assert run("train", "--data", tmp_path / "ds.bin", "--ablate", "foo", "--out", tmp_path / "m2.ckpt") == 2


def test_gradcheck_subset_passes():
    results = tiny_gradcheck(combos=[(True, False, True)])
    assert results[0][1].passed


def test_gradcheck_corrupt_hook_fails_with_name(capsys):
    assert run("gradcheck", "--corrupt", "ffn_in.b") == 4
    out = capsys.readouterr().out
    assert "FAIL" in out and "ffn_in.b" in out
