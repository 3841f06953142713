import json

import pytest

from maskstream.cli import main, recipe_path

TINY = """\
[data]
n_content = 6
feat_dim = 4
len_min = 2
len_max = 4
n_train = 24
n_test = 6

[model]
d_model = 8
n_heads = 2
d_ff = 16
enc_layers = 1
dec_layers = 1
label_width = 8
joint_width = 8

[optim]
epochs = 2
batch_size = 8
warmup = 2
k_best = 1

[decode]
beam = 2
"""


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(root, cfg):
    """datagen -> pretrain -> baseline/enhanced train -> decode -> analyze -> report."""
    data, pre = root / "data", root / "pre"
    assert run("datagen", "--config", cfg, "--out", data) == 0
    assert run("pretrain", "--config", cfg, "--data", data / "train", "--out", pre) == 0
    assert run("decode", "--model", pre / "model.ckpt", "--data", data / "test", "--out", pre / "dec") == 0
    runs = []
    for name, init in [("base", []), ("enh", ["--init", pre / "model.ckpt"])]:
        d = root / name
        assert run("train", "--config", cfg, "--set", "model.arch=transducer", "--set", "model.policy=chunk4",
                   "--data", data / "train", *init, "--out", d) == 0
        assert run("decode", "--model", d / "model.ckpt", "--data", data / "test", "--out", d / "dec") == 0
        assert run("analyze", "--decoded", d / "dec", "--data", data / "test", "--reference", pre / "dec",
                   "--out", d / "ana") == 0
        runs.append(d / "ana")
    assert run("report", "--runs", *runs, "--out", root / "report") == 0
    return root / "report"


@pytest.fixture(scope="module")
def reports(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    return pipeline(root / "a", cfg), pipeline(root / "b", cfg), root


def test_pipeline_outputs(reports):
    report, _, root = reports
    lines = (report / "results.tsv").read_text().splitlines()
    assert lines[0].split("\t")[:4] == ["model", "policy", "latency_ms", "init"]
    assert [line.split("\t")[3] for line in lines[1:]] == ["random", "mask-ctc"]
    assert all(line.split("\t")[2] == "120" for line in lines[1:])
    metrics = json.loads((root / "a" / "enh" / "ana" / "metrics.json").read_text())
    assert {"error_rate", "delay_vs_reference", "delay_vs_nonstreaming", "row", "run"} <= set(metrics)
    for d in ("data", "pre", "base", "enh"):
        assert (root / "a" / d / "config.ini").exists()


def test_rerun_is_byte_identical(reports):
    a, b, _ = reports
    assert (a / "results.tsv").read_bytes() == (b / "results.tsv").read_bytes()
    assert (a.parent / "enh" / "model.ckpt").read_bytes() == (b.parent / "enh" / "model.ckpt").read_bytes()


def test_no_temporary_files_left(reports):
    _, _, root = reports
    assert not [p for p in root.rglob("*") if p.name.startswith(".") or p.suffix == ".tmp"]


def test_config_errors_exit_2(tmp_path, capsys):
    assert run("datagen", "--set", "optim.nope=1", "--out", tmp_path / "x") == 2
    assert "unknown config key" in capsys.readouterr().err
    assert run("datagen", "--config", tmp_path / "missing.ini", "--out", tmp_path / "x") == 2
    assert run("pretrain", "--set", "model.arch=cbs", "--data", tmp_path, "--out", tmp_path / "y") == 2
    with pytest.raises(SystemExit) as exc:
        main(["decode", "--model", "m.ckpt"])
    assert exc.value.code == 2


def test_runtime_errors_exit_1_without_outputs(reports, tmp_path, capsys):
    _, _, root = reports
    data = root / "a" / "data"
    assert run("pretrain", "--config", root / "tiny.ini", "--data", tmp_path / "nowhere", "--out",
               tmp_path / "p") == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    out = tmp_path / "t"
    assert run("train", "--config", root / "tiny.ini", "--set", "model.arch=transducer", "--set",
               "model.policy=chunk4", "--data", data / "train", "--init", bad, "--out", out) == 1
    assert "error" in capsys.readouterr().err
    assert not (out / "model.ckpt").exists()


def test_shipped_recipes_parse(tmp_path):
    for name in ("maskctc", "tt_full", "tt_chunk4", "cbs_block8-4-2", "cbs_offline"):
        assert recipe_path(name).exists()
    assert run("datagen", "--config", "tt_chunk4", "--set", "data.n_train=2", "--set", "data.n_test=1",
               "--seed", 3, "--out", tmp_path / "d") == 0
    assert "seed = 3" in (tmp_path / "d" / "config.ini").read_text()
