import csv
import json

import numpy as np
import pytest

from scoreflow import checkpoint
from scoreflow.cli import main
from scoreflow.dsp import read_wav
from scoreflow.pipeline import PipelineConfig, UsageError, stage_seed
from scoreflow.score import load_score

TINY = """\
# desk-test settings
n_utts = 10
n_singers = 2
n_stages = 2
n_codes = 8
codec_iters = 3
lm_dim = 16
lm_heads = 2
lm_layers = 1
lm_steps = 12
lm_warmup = 2
prompt_frames = 20
flow_epochs = 2
flow_hidden = 16
flow_window = 1
flow_warmup = 2
ode_steps = 2
gl_iters = 2
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def full_chain(capsys, cfg_path, work, seed=0):
    base = ["--config", cfg_path, "--out", work, "--seed", seed]
    steps = [["build-corpus"], ["train-codec"], ["train-lm"], ["train-flow", "--mode", "flow1"],
             ["train-flow", "--mode", "flow2"], ["synthesize", "--split", "test", "--mode", "flow1"],
             ["synthesize", "--split", "test", "--mode", "flow2"], ["synthesize", "--split", "test", "--resynthesis"],
             ["evaluate", "--system", "flow1"], ["evaluate", "--system", "flow2"],
             ["evaluate", "--system", "resynthesis"], ["report"]]
    for s in steps:
        code, out, err = run(capsys, *s, *base)
        assert code == 0, (s, err)


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def built(tmp_path_factory, cfg_file):
    work = tmp_path_factory.mktemp("work")
    capsys = _NullCap()
    full_chain(capsys, cfg_file, work)
    return work


class _NullCap:
    def readouterr(self):
        class R:
            out = err = ""
        return R()


def test_config_parsing_and_flag_precedence(cfg_file):
    cfg = PipelineConfig.from_text(cfg_file.read_text(), {"seed": 5, "n_codes": "16"})
    assert cfg.n_utts == 10 and cfg.seed == 5 and cfg.n_codes == 16
    assert PipelineConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(UsageError):
        PipelineConfig.from_text("bogus = 1")
    with pytest.raises(UsageError):
        PipelineConfig.from_text("no equals sign")


def test_stage_seeds_are_stable_and_distinct():
    assert stage_seed(0, "lm") == stage_seed(0, "lm")
    assert len({stage_seed(0, "lm"), stage_seed(0, "codec"), stage_seed(1, "lm")}) == 3


def test_usage_errors_exit_1(capsys):
    assert run(capsys, "no-such-command")[0] == 1
    assert run(capsys, "train-flow", "--mode", "flow9")[0] == 1


def test_build_corpus_refuses_overwrite(capsys, cfg_file, tmp_path):
    code, _, _ = run(capsys, "build-corpus", "--config", cfg_file, "--out", tmp_path, "--n-utts", 4)
    assert code == 0
    assert len((tmp_path / "corpus" / "manifest.jsonl").read_text().splitlines()) == 4
    code, _, err = run(capsys, "build-corpus", "--config", cfg_file, "--out", tmp_path)
    assert code == 1 and "--force" in err
    code, _, _ = run(capsys, "build-corpus", "--config", cfg_file, "--out", tmp_path, "--force")
    assert code == 0
    assert len((tmp_path / "corpus" / "manifest.jsonl").read_text().splitlines()) == 10
    assert (tmp_path / "corpus" / "build-corpus.config").exists()


def test_default_corpus_size():
    assert PipelineConfig().n_utts == 200


def test_stage_order_enforced(capsys, cfg_file, tmp_path):
    assert run(capsys, "build-corpus", "--config", cfg_file, "--out", tmp_path)[0] == 0
    code, _, err = run(capsys, "train-flow", "--config", cfg_file, "--out", tmp_path)
    assert code == 2 and "codec checkpoint missing" in err
    code, _, err = run(capsys, "train-lm", "--config", cfg_file, "--out", tmp_path)
    assert code == 2 and "codec checkpoint missing" in err


def test_missing_corpus(capsys, tmp_path):
    code, _, err = run(capsys, "train-codec", "--out", tmp_path)
    assert code == 2 and "corpus" in err


def test_corrupt_checkpoint_rejected(capsys, built, tmp_path, cfg_file):
    import shutil
    work = tmp_path / "w"
    shutil.copytree(built, work)
    (work / "checkpoints" / "codec.ckpt").write_bytes(b"JUNK" + b"\0" * 16)
    code, _, err = run(capsys, "train-lm", "--config", cfg_file, "--out", work)
    assert code == 2 and "verification" in err
    # a checkpoint carrying another stage's tag is also refused
    shutil.copy(built / "checkpoints" / "lm.ckpt", work / "checkpoints" / "codec.ckpt")
    code, _, err = run(capsys, "train-lm", "--config", cfg_file, "--out", work)
    assert code == 2


def test_outputs_and_curves(built):
    ck = built / "checkpoints"
    for name in ("codec.ckpt", "lm.ckpt", "flow1.ckpt", "flow2.ckpt", "vocab.tsv", "train-lm.config"):
        assert (ck / name).exists()
    lm = checkpoint.load(ck / "lm.ckpt", stage="lm")
    assert "config" in lm
    rows = list(csv.reader(open(ck / "lm_curve.csv")))
    assert rows[0] == ["step", "loss"]
    # log_every=10 over 12 steps -> steps 0, 10, 11
    assert [int(r[0]) for r in rows[1:]] == [0, 10, 11]
    flow_rows = list(csv.reader(open(ck / "flow1_curve.csv")))[1:]
    assert len(flow_rows) == 2 * 2  # 2 epochs x ceil(8 / 4) batches
    assert len(list(csv.reader(open(ck / "codec_curve.csv")))) == 1 + 2


def test_evaluation_reports(built):
    rd = built / "reports"
    manifest = [json.loads(l) for l in (built / "corpus" / "manifest.jsonl").read_text().splitlines()]
    n_test = sum(r["split"] == "test" for r in manifest)
    for system in ("flow1", "flow2", "resynthesis"):
        rows = list(csv.DictReader(open(rd / f"{system}_test.csv")))
        assert len(rows) == n_test
        assert list(rows[0]) == ["utterance_id", "f0_rmse", "f0_corr", "mcd", "voiced_overlap"]
        assert (rd / f"{system}_test.json").exists() and (rd / f"{system}_test_long.csv").exists()
    summary = list(csv.DictReader(open(rd / "summary.csv")))
    assert {r["system"] for r in summary} == {"flow1", "flow2", "resynthesis"}
    assert (rd / "all_long.csv").exists()


def test_reference_against_itself(capsys, built, cfg_file):
    code, out, _ = run(capsys, "evaluate", "--config", cfg_file, "--out", built, "--system", "reference",
                       "--split", "dev")
    assert code == 0
    rows = list(csv.DictReader(open(built / "reports" / "reference_dev.csv")))
    assert all(float(r["mcd"]) == 0.0 and float(r["f0_corr"]) == pytest.approx(1.0) for r in rows)


def test_missing_system_is_prerequisite_error(capsys, built, cfg_file):
    code, _, err = run(capsys, "evaluate", "--config", cfg_file, "--out", built, "--system", "nothing")
    assert code == 2


def test_synthesize_single_score(capsys, built, cfg_file):
    score_path = built / "corpus" / "scores" / "utt_0009.json"
    score = load_score(score_path.read_text())
    outs = {}
    for mode in ("flow1", "flow2"):
        code, _, err = run(capsys, "synthesize", score_path, "--config", cfg_file, "--out", built, "--mode", mode)
        assert code == 0, err
        wav = read_wav(built / "synth" / f"utt_0009_{mode}.wav")
        assert abs(wav.duration - score.duration) <= 2 * 320 / 16000
        mel = checkpoint.load(built / "synth" / f"utt_0009_{mode}.mel")["mel"]
        tokens = checkpoint.load_stream_matrix((built / "synth" / f"utt_0009_{mode}.tokens").read_bytes())
        assert len(mel) == len(tokens)
        outs[mode] = (built / "synth" / f"utt_0009_{mode}.wav").read_bytes()
    assert outs["flow1"] != outs["flow2"]


def test_unknown_singer(capsys, built, cfg_file):
    score_path = built / "corpus" / "scores" / "utt_0009.json"
    code, _, err = run(capsys, "synthesize", score_path, "--config", cfg_file, "--out", built, "--singer-id", 7)
    assert code == 1 and "singer" in err


def test_runs_are_bit_identical(capsys, built, cfg_file, tmp_path):
    full_chain(capsys, cfg_file, tmp_path)
    for sub in ("checkpoints", "systems/flow1", "systems/flow2", "systems/resynthesis", "reports"):
        files = sorted(p.relative_to(built) for p in (built / sub).rglob("*") if p.is_file()
                       and not p.name.endswith(".config"))
        assert files
        for rel in files:
            if rel.parts[0] == "reports" and rel.name.startswith("reference"):
                continue
            assert (built / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel


def test_rerun_from_snapshot(capsys, built, tmp_path):
    snap = built / "checkpoints" / "train-codec.config"
    work = tmp_path / "again"
    import shutil
    shutil.copytree(built / "corpus", work / "corpus")
    code, _, err = run(capsys, "train-codec", "--config", snap, "--out", work)
    assert code == 0, err
    assert (work / "checkpoints" / "codec.ckpt").read_bytes() == (built / "checkpoints" / "codec.ckpt").read_bytes()
