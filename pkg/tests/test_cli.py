"""Command-line behaviour: config precedence, exit codes, determinism, provenance."""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from twohand import cli
from twohand.config import KEYS, ConfigError, RunConfig
from twohand.metrics import MetricReport
from twohand.synth import read_corpus

TINY = ["--synth.n_train", "12", "--synth.n_val", "2", "--synth.n_test", "4"]
TINY_MODEL = ["--diffusion.d_model", "16", "--diffusion.heads", "2", "--diffusion.layers", "1",
              "--train.batch", "4"]
TINY_REFINE = ["--diffusion.ddim_steps", "4", "--diffusion.n_grad_iters", "1", "--diffusion.lambda", "1e-4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def files(out: Path, names):
    return {n: (out / n).read_bytes() for n in names}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("synth", "--out", out, *TINY) == 0
    assert run("train-diffusion", "--out", out, "--train.steps", 100, *TINY_MODEL) == 0
    assert run("refine", "--out", out, *TINY_REFINE) == 0
    return out


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["refine", "--help"])
    text = capsys.readouterr().out
    for k in KEYS:
        assert f"--{k.name}" in text


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "twohand.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in cli.COMMANDS:
        assert name in res.stdout


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("synth.seed = 3  # file\ndiffusion.lambda = 0.5\ntrain.steps = 10\n")
    args = cli.build_parser().parse_args(["synth", "--config", str(cfg_file), "--set", "diffusion.lambda=0.25",
                                          "--set", "train.steps=20", "--train.steps", "30"])
    cfg = cli.resolve_config(args)
    assert cfg["synth.seed"] == 3
    assert cfg["diffusion.lambda"] == 0.25
    assert cfg["train.steps"] == 30
    args = cli.build_parser().parse_args(["synth", "--set", "synth.seed=4", "--seed", "9"])
    assert cli.resolve_config(args)["synth.seed"] == 9


def test_config_text_errors():
    cfg = RunConfig()
    with pytest.raises(ConfigError):
        cfg.update_text("no equals sign")
    with pytest.raises(ConfigError):
        cfg.set("nope.key", 1)
    with pytest.raises(ConfigError):
        cfg.set("train.steps", "ten")
    with pytest.raises(ConfigError):
        cfg.set("collision.gmof_form", "other")
    assert RunConfig().dumps() == RunConfig({"train.steps": "4500"}).dumps()


def test_exit_codes(tmp_path, capsys):
    assert run("synth", "--out", tmp_path, "--set", "bogus=1") == 2
    assert run("synth", "--out", tmp_path, "--train.steps", "x") == 2
    assert run("synth", "--out", tmp_path, "--jobs", 0) == 2
    assert run("nonsense") == 2
    assert run("refine", "--out", tmp_path / "empty") == 3
    assert run("synth", "--out", tmp_path, "--config", tmp_path / "missing.cfg") == 3
    bad = tmp_path / "bad"
    (bad / "corpus").mkdir(parents=True)
    (bad / "corpus" / "test.corpus").write_text("not a corpus\n")
    assert run("eval", "--out", bad) == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert any(line.startswith("error=config ") for line in err)
    assert any(line.startswith("error=io ") for line in err)


def test_numerical_exit_code(tmp_path, capsys):
    assert run("synth", "--out", tmp_path, "--synth.pose_sigma", 0, "--synth.trans_sigma", 0, *TINY) == 4
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error=numerical ")


def test_synth_deterministic(tiny_run, tmp_path):
    assert run("synth", "--out", tmp_path, *TINY) == 0
    names = ["corpus/train.corpus", "corpus/val.corpus", "corpus/test.corpus"]
    assert files(tmp_path, names) == files(tiny_run, names)


def test_synth_jobs_match_serial(tiny_run, tmp_path):
    assert run("synth", "--out", tmp_path, "--jobs", 4, *TINY) == 0
    names = ["corpus/train.corpus", "corpus/val.corpus", "corpus/test.corpus"]
    assert files(tmp_path, names) == files(tiny_run, names)


def test_train_diffusion_deterministic(tiny_run, tmp_path):
    args = ["--io.corpus_dir", tiny_run / "corpus", "--train.steps", 100, *TINY_MODEL]
    assert run("train-diffusion", "--out", tmp_path, *args) == 0
    names = ["denoiser.weights", "diffusion_loss.txt"]
    assert files(tmp_path, names) == files(tiny_run, names)


def test_refine_deterministic_and_jobs(tiny_run, tmp_path):
    args = ["--io.corpus_dir", tiny_run / "corpus", "--io.weights", tiny_run / "denoiser.weights", *TINY_REFINE]
    assert run("refine", "--out", tmp_path / "a", *args) == 0
    assert run("refine", "--out", tmp_path / "b", "--jobs", 4, *args) == 0
    names = ["refined.corpus", "refine_log.txt"]
    assert files(tmp_path / "a", names) == files(tiny_run, names)
    assert files(tmp_path / "b", names) == files(tiny_run, names)


def test_refined_corpus_keeps_ids_and_clean(tiny_run):
    gt = read_corpus(tiny_run / "corpus" / "test.corpus")
    refined = read_corpus(tiny_run / "refined.corpus")
    assert [r.id for r in refined] == [r.id for r in gt]
    for a, b in zip(refined, gt):
        assert np.array_equal(a.clean.to_vector(), b.clean.to_vector())


def test_eval_self_is_zero(tiny_run, tmp_path):
    assert run("eval", "--out", tmp_path, "--io.corpus_dir", tiny_run / "corpus") == 0
    rep = MetricReport.from_keyvalue((tmp_path / "metrics_clean.kv").read_text())
    for key in ("mpjpe", "mpvpe", "mrrpe", "pa_mpjpe", "pa_mpvpe", "mpjpe_xy", "mpjpe_z"):
        assert getattr(rep, key) == 0.0, key
    assert rep.count == 4


def test_eval_jobs_match_serial(tiny_run, tmp_path):
    base = ["--io.corpus_dir", tiny_run / "corpus", "--io.refined", tiny_run / "refined.corpus"]
    assert run("eval", "--out", tmp_path / "a", *base) == 0
    assert run("eval", "--out", tmp_path / "b", "--jobs", 4, *base) == 0
    names = [f"metrics_{n}.kv" for n in ("clean", "condition", "refined")]
    assert files(tmp_path / "a", names) == files(tmp_path / "b", names)


def test_provenance_records_hashes(tiny_run):
    text = (tiny_run / "provenance-refine.txt").read_text()
    assert "command = refine" in text
    assert f"sha256={cli.sha256_file(tiny_run / 'refined.corpus')}" in text
    assert "config.diffusion.ddim_steps = 4" in text


def test_export_mesh(tiny_run, tmp_path):
    args = ["--io.corpus_dir", tiny_run / "corpus", "--io.refined", tiny_run / "refined.corpus"]
    assert run("export-mesh", "--out", tmp_path, *args, "--export.record", 1) == 0
    objs = sorted(p.name for p in (tmp_path / "meshes").glob("*.obj"))
    assert len(objs) == 6
    assert run("export-mesh", "--out", tmp_path, *args, "--export.record", 99) == 2
