import csv

import pytest

from tonalasr import cli
from tonalasr import training as tr
from tonalasr.config import DEFAULTS, RunConfig
from tonalasr.model import ConfigError, load_checkpoint

TINY = """
[corpus]
train_size = 8
dev_size = 3
test_size = 3
source_train_size = 8
[tokenizer]
vocab_size = 300
[model]
d_model = 8
hidden_dim = 8
embed_dim = 4
[train]
epochs_pretrain = 1
epochs_stage1 = 1
epochs_stage2 = 1
epochs_direct = 1
"""


@pytest.fixture
def ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def test_config_defaults_and_overrides(ini):
    cfg = RunConfig.load(ini, {"train.base_lr": "0.01", "run.seed": "4"})
    assert cfg.get("train.base_lr") == 0.01 and cfg.seed == 4
    assert cfg.get("corpus.train_size") == 8
    assert cfg.run_dir == (ini.parent / "run").resolve()
    assert cfg.train_config().seed == 4
    assert cfg.corpus_spec().seed == 4
    assert cfg.sizes(source=True)["train"] == 8


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[nope]\nx = 1\n")
    with pytest.raises(ConfigError, match="section"):
        RunConfig.load(bad)
    bad.write_text("[train]\nx = 1\n")
    with pytest.raises(ConfigError, match="key"):
        RunConfig.load(bad)
    with pytest.raises(ConfigError, match="parse"):
        RunConfig.load(None, {"train.epochs_direct": "many"})
    with pytest.raises(ConfigError):
        RunConfig.load(None, {"train.freeze": "decoder"}).train_config()


def test_config_digest_is_stable(ini):
    a, b = RunConfig.load(ini), RunConfig.load(ini)
    assert a.digest() == b.digest()
    b.set("run.seed", "1")
    assert a.digest() != b.digest()


def test_every_config_key_has_a_flag():
    text = cli.build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for section, keys in DEFAULTS.items():
        for key in keys:
            assert f"--{section}.{key}" in text or (section, key) == ("run", "seed")
    assert "--seed" in text


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    assert "experiment" in capsys.readouterr().out


def test_pipeline_commands(tmp_path, ini, capsys):
    s = tmp_path / "s"
    c = ["--config", str(ini)]
    assert cli.main(["synth", *c, "--out", str(s)]) == 0
    assert cli.main(["bpe-train", *c, "--manifest", str(s / "corpus/train.jsonl"),
                     str(s / "source/source-train.jsonl"), "--out", str(s / "bpe.model")]) == 0
    common = [*c, "--train", str(s / "corpus/train.jsonl"), "--tokenizer", str(s / "bpe.model")]
    assert cli.main(["train", *common, "--stage", "stage1", "--freeze", "encoder", "--out", str(s / "1.ckpt")]) == 0
    assert load_checkpoint(s / "1.ckpt").stage == "stage1"
    assert cli.main(["train", *common, "--stage", "stage2", "--out", str(s / "2.ckpt")]) == 1
    assert "stage-1 checkpoint" in capsys.readouterr().err
    assert cli.main(["train", *common, "--stage", "stage2", "--init", str(s / "1.ckpt"),
                     "--out", str(s / "2.ckpt"), "--log", str(s / "log.jsonl")]) == 0
    assert (s / "log.jsonl").read_text().count("\n") == 1
    assert cli.main(["decode", *c, "--ckpt", str(s / "2.ckpt"), "--manifest", str(s / "corpus/test.jsonl"),
                     "--tokenizer", str(s / "bpe.model"), "--out", str(s / "h.jsonl"), "--beam", "2"]) == 0
    capsys.readouterr()
    assert cli.main(["score", "--ref", str(s / "corpus/test.jsonl"), "--hyp", str(s / "h.jsonl"),
                     "--alignment", str(s / "al.csv")]) == 0
    assert capsys.readouterr().out.startswith("CER ")
    rows = list(csv.DictReader(open(s / "al.csv", encoding="utf-8")))
    assert len(rows) == 3
    assert cli.main(["confusion", "--ref", str(s / "corpus/test.jsonl"), "--hyp", str(s / "h.jsonl"),
                     "--lexicon", str(s / "corpus/lexicon.tsv"), "--out", str(s / "conf")]) == 0
    assert (s / "conf/tone_confusion.csv").exists()
    assert cli.main(["confusion", "--ref", str(s / "corpus/test.jsonl"), "--hyp", str(s / "h.jsonl"),
                     "--out", str(s / "conf")]) == 1


def test_normalize_command(tmp_path, capsys):
    mapping = tmp_path / "m.tsv"
    mapping.write_text("jit8\t日\n", encoding="utf-8")
    src = tmp_path / "in.txt"
    src.write_text("jit8 3 台\n", encoding="utf-8")
    assert cli.main(["normalize", "--mapping", str(mapping), "--input", str(src)]) == 0
    assert capsys.readouterr().out == "日 三 臺\n"


def test_experiment_and_report(tmp_path, ini, capsys):
    run = tmp_path / "run"
    assert cli.main(["experiment", "--config", str(ini), "--run-dir", str(run)]) == 0
    out = capsys.readouterr().out
    assert "two_stage " in out and "direct " in out
    first = (run / "report/results.csv").read_text()
    assert cli.main(["report", "--config", str(ini), "--run-dir", str(run)]) == 0
    assert (run / "report/results.csv").read_text() == first
    assert (run / "report/two_stage_tone_confusion.csv").exists()


def test_exit_codes(tmp_path, ini, monkeypatch, capsys):
    assert cli.main(["score", "--ref", str(tmp_path / "missing.jsonl"), "--hyp", "x"]) == 1
    assert cli.main(["synth", "--config", str(ini), "--corpus.train_size", "0", "--out", str(tmp_path / "z")]) == 1

    def boom(*a, **k):
        raise tr.TrainingError("diverged")
    monkeypatch.setattr(cli.ex, "synthesize_corpora", boom)
    assert cli.main(["synth", "--config", str(ini), "--out", str(tmp_path / "y")]) == 2
    assert "diverged" in capsys.readouterr().err
