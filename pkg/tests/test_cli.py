import pytest

from rtdlab import cli
from rtdlab.pipeline import RunConfig, format_config, read_config_file

TINY = """# tiny smoke configuration
align_steps=20
phi_steps=20
steps=4
batch_size=16   # trailing comment
n_triplets=200
filter_threshold=0.0
n_gallery=100
n_queries=20
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY, encoding="utf-8")
    return p


def test_config_file_parsing(tiny_cfg, tmp_path):
    vals = read_config_file(tiny_cfg)
    assert vals["batch_size"] == 16 and vals["filter_threshold"] == 0.0
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key=1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="unknown config key"):
        read_config_file(bad)


def test_every_key_roundtrips_through_format(tmp_path):
    p = tmp_path / "all.cfg"
    p.write_text(format_config(RunConfig()), encoding="utf-8")
    assert RunConfig(**read_config_file(p)) == RunConfig()


def test_default_filter_threshold():
    assert RunConfig().filter_threshold == 0.75


def test_pipeline_then_stage_eval(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["pipeline", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    for rel in ("manifest", "triplets.tsv", "vocab.txt", "reports/eval.tsv", "checkpoints/frozen.ckpt",
                "checkpoints/phi.ckpt", "checkpoints/learnable.ckpt"):
        assert (out / rel).exists(), rel
    first = (out / "reports/eval.tsv").read_bytes()
    assert cli.main(["pipeline", "--config", str(tiny_cfg), "--out", str(out), "--stage", "eval"]) == 0
    assert (out / "reports/eval.tsv").read_bytes() == first
    assert cli.main(["probe", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    assert "avg_cosine" in (out / "reports/probe.tsv").read_text()


def test_stage_eval_without_checkpoint_exits_3(tiny_cfg, tmp_path):
    assert cli.main(["pipeline", "--config", str(tiny_cfg), "--out", str(tmp_path / "x"), "--stage", "eval"]) == 3
    assert cli.main(["eval", "--config", str(tiny_cfg), "--out", str(tmp_path / "x")]) == 3


def test_input_errors_exit_2(tiny_cfg, tmp_path):
    assert cli.main(["gen-triplets", "--corpus", str(tmp_path / "none.txt"), "--out", str(tmp_path / "t.tsv")]) == 2
    assert cli.main(["pipeline", "--set", "bogus=1", "--out", str(tmp_path / "r")]) == 2
    assert cli.main(["pipeline", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "r")]) == 2
    assert cli.main(["nosuchcommand"]) == 2


def test_gen_triplets_manifest_and_determinism(tiny_cfg, tmp_path):
    corpus = tmp_path / "corpus.txt"
    from rtdlab.grammar import GrammarConfig
    import numpy as np
    corpus.write_text("\n".join(GrammarConfig().sample_corpus(1000, np.random.default_rng(0))) + "\n")
    outs = []
    for name in ("a.tsv", "b.tsv"):
        out = tmp_path / name
        assert cli.main(["gen-triplets", "--config", str(tiny_cfg), "--seed", "3", "--corpus", str(corpus),
                         "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] and outs[0].count(b"\n") >= 1
    man = (tmp_path / "a.tsv.manifest").read_text()
    assert "triplets.filter_threshold=0.0" in man
    # the default config records the stated 0.75 threshold
    assert cli.main(["gen-triplets", "--set", "align_steps=20", "--set", "phi_steps=20", "--set", "n_triplets=50",
                     "--corpus", str(corpus), "--out", str(tmp_path / "c.tsv")]) == 0
    assert "triplets.filter_threshold=0.75" in (tmp_path / "c.tsv.manifest").read_text()


def test_ablate_emits_seven_rows(tmp_path, tiny_cfg):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(tiny_cfg), "--set", "steps=2", "--out", str(out)]) == 0
    lines = (out / "reports/ablation.tsv").read_text().splitlines()
    assert len(lines) == 1 + 7
    assert [l.split("\t")[0] for l in lines[1:]] == ["baseline", "tcl_pair", "tcl", "tcl_rb", "tcl_rb_noanchor",
                                                    "full", "naive"]
    assert sum(l.endswith("*") for l in lines[1:]) == 1
