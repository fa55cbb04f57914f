import json
import re

import numpy as np
import pytest

from m3ae.cli import build_parser, main
from m3ae.config import schema
from m3ae.metrics import REPORT_FIELDS
from m3ae.volume_io import read_volume, write_volume

TINY_TOML = """
[model]
base_grid = [2, 3, 2]
levels = 2
channels = [4, 4]
latent_dim = 8

[loss]
beta = 0.01
gamma1 = [0.25]
gamma2 = [0.6, 2.4]
gamma3 = [0.6]
gamma4 = [0.6]
gamma5 = [0.6]

[train]
batch_size = 4
epochs = 2
lr = 0.001
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.toml"
    cfg.write_text(TINY_TOML)
    assert main(["make-synthetic", "--out", str(d / "data"), "--n", "8", "--res", "8x12x8", "--seed", "1"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(d / "data"), "--out", str(d / "m.ckpt")]) == 0
    return d


def test_selfcheck_passes(capsys):
    code, out, _ = run(capsys, "selfcheck")
    assert code == 0
    assert "FAIL" not in out and re.search(r"(\d+)/\1 checks passed", out)


def test_pipeline_produces_finite_report(trained, capsys):
    code, out, err = run(capsys, "evaluate", "--ckpt", trained / "m.ckpt", "--data", trained / "data",
                         "--n-samples", 8, "--report", trained / "report.json")
    assert code == 0 and "seed=0" in err
    report = json.loads((trained / "report.json").read_text())
    assert set(report["metrics"]) == set(REPORT_FIELDS)
    assert all(np.isfinite(v) for v in report["metrics"].values())
    assert report["meta"]["extractor"] and report["meta"]["shrinkage_engaged"]


def test_loss_log_written(trained):
    lines = (trained / "m.ckpt.log.ndjson").read_text().splitlines()
    assert len(lines) == 4 and json.loads(lines[-1])["step"] == 4


def test_sample_is_deterministic(trained, capsys):
    for name in ("s1", "s2"):
        assert run(capsys, "sample", "--ckpt", trained / "m.ckpt", "--n", 3, "--seed", 4, "--out", trained / name)[0] == 0
    for i in range(3):
        a = (trained / "s1" / f"sample_{i:05d}.m3v").read_bytes()
        assert a == (trained / "s2" / f"sample_{i:05d}.m3v").read_bytes()


def test_reconstruct_with_trace(trained, capsys):
    src = trained / "data" / "sample_00000.m3v"
    code, _, _ = run(capsys, "reconstruct", "--ckpt", trained / "m.ckpt", "--in", src, "--out", trained / "r.m3v",
                     "--trace", trained / "trace")
    assert code == 0
    assert read_volume(trained / "r.m3v").shape == (8, 12, 8)
    assert read_volume(trained / "trace" / "level1.m3v").shape == (4, 6, 4)
    assert np.array_equal(read_volume(trained / "trace" / "level2.m3v"), read_volume(trained / "r.m3v"))


def test_inspect_warp_exports_field(trained, capsys):
    code, _, _ = run(capsys, "inspect-warp", "--ckpt", trained / "m.ckpt", "--seed", 2, "--level", 1,
                     "--out", trained / "phi.m3v")
    assert code == 0 and read_volume(trained / "phi.m3v").shape == (3, 4, 6, 4)
    code, _, err = run(capsys, "inspect-warp", "--ckpt", trained / "m.ckpt", "--level", 2, "--out", trained / "x.m3v")
    assert code == 4 and err.startswith("error: ConfigError:")


def test_resume_continues_from_checkpoint(trained, capsys, tmp_path):
    cfg = tmp_path / "more.toml"
    cfg.write_text(TINY_TOML.replace("epochs = 2", "epochs = 3"))
    (tmp_path / "m.ckpt").write_bytes((trained / "m.ckpt").read_bytes())
    code, out, err = run(capsys, "train", "--config", cfg, "--data", trained / "data", "--out", tmp_path / "m.ckpt",
                         "--resume", tmp_path / "m.ckpt")
    assert code == 0 and "resuming from step 4" in err and "step 6" in out


@pytest.mark.parametrize("argv,code,cls", [
    (["frobnicate"], 2, "UsageError"),
    (["sample", "--ckpt", "x", "--out", "y", "--bogus"], 2, "UsageError"),
    (["make-synthetic", "--out", "d", "--res", "8x8"], 2, "UsageError"),
    (["sample", "--ckpt", "/nonexistent.ckpt", "--out", "y"], 6, "CheckpointError"),
    (["train", "--config", "/nonexistent.toml", "--data", "d", "--out", "o"], 4, "ConfigError"),
    (["train", "--config", "desk", "--data", "/nonexistent", "--out", "o"], 7, "DataError"),
    (["reconstruct", "--ckpt", "x", "--in", "/nonexistent.m3v", "--out", "y"], 6, "CheckpointError"),
])
def test_errors_are_single_line_with_class(capsys, argv, code, cls):
    got, out, err = run(capsys, *argv)
    assert got == code
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(f"error: {cls}: ")


def test_bad_volume_input(trained, capsys, tmp_path):
    (tmp_path / "bad.m3v").write_bytes(b"garbage")
    code, _, err = run(capsys, "reconstruct", "--ckpt", trained / "m.ckpt", "--in", tmp_path / "bad.m3v",
                       "--out", tmp_path / "o.m3v")
    assert code == 5 and err.startswith("error: VolumeFormatError:")


def _subparser_help(name):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    return sub.choices[name].format_help()


def test_train_help_lists_every_config_field():
    text = _subparser_help("train")
    for key, default in schema():
        assert f"{key} = {default!r}" in text


@pytest.mark.parametrize("name", ["make-synthetic", "train", "sample", "reconstruct", "evaluate", "inspect-warp",
                                  "selfcheck"])
def test_help_shows_defaults_for_optional_flags(name):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command").choices[name]
    text = " ".join(sub.format_help().split())
    for action in sub._actions:
        if action.option_strings and not action.required and action.default not in (None, "==SUPPRESS==") \
                and action.dest != "help":
            assert f"(default: {action.default})" in text or f"(default: {action.default!r})" in text, action.dest
