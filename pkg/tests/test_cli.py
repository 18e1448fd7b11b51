import csv

import numpy as np
import pytest

from dafe.cli import main

TINY = """
data.identities = 6
data.images_per_view = 2
data.size = 24
preproc.size = 24
preproc.pca = 8
stack.maps = 3, 4, 5
stack.filters = 5, 3, 2
stack.pool = 2, 2, 1
pretrain.epochs = 1
train.iterations = 20
train.checkpoint_every = 10
mining.batch_identities = 3
mining.batch_images = 2
eval.trials = 2
optim.samples = 60
optim.dim = 4
optim.clusters = 6
optim.epochs = 2
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_and_missing_out(capsys, tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["synth"]) == 1
    assert main(["frobnicate", "--out", "x"]) == 1


def test_bad_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("loss.alpha1 = 0.1\nloss.alpha2 = 0.5\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert "alpha" in capsys.readouterr().err


def test_data_and_format_errors(tmp_path, cfg):
    assert main(["pretrain", "--config", cfg, "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 2
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"DAFE" + bytes(30))
    assert main(["eval", "--config", cfg, "--checkpoint", str(junk), "--out", str(tmp_path)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path)]) == 2


def run_pipeline(root, cfg, seed="3"):
    data, pre, run, ev = (str(root / n) for n in ("data", "pre", "run", "eval"))
    assert main(["synth", "--config", cfg, "--seed", seed, "--out", data]) == 0
    assert main(["pretrain", "--config", cfg, "--seed", seed, "--data", data, "--out", pre]) == 0
    assert main(["train", "--config", cfg, "--seed", seed, "--data", data,
                 "--init", f"{pre}/pretrained.ckpt", "--out", run]) == 0
    assert main(["eval", "--config", cfg, "--seed", seed, "--data", data,
                 "--checkpoint", f"{run}/model.ckpt", "--out", ev]) == 0
    return root


def test_pipeline_outputs_and_determinism(tmp_path, cfg):
    a = run_pipeline(tmp_path / "a", cfg)
    b = run_pipeline(tmp_path / "b", cfg)
    for rel in ("pre/recon.csv", "run/train.csv", "eval/cmc.csv", "eval/report.csv", "run/model.ckpt"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    assert read_rows(a / "pre/recon.csv")[0] == ["epoch", "layer", "mse"]
    train_rows = read_rows(a / "run/train.csv")
    assert train_rows[0] == ["iteration", "loss", "s_ij", "s_ik", "s_il", "fallback"]
    assert len(train_rows) == 21
    report = dict(read_rows(a / "eval/report.csv")[1:])
    assert 0.0 <= float(report["rank1"]) <= 1.0
    assert read_rows(a / "eval/cmc.csv")[0] == ["trial", "rank", "rate"]
    assert (a / "eval/cmc.png").stat().st_size > 0 and (a / "run/loss.png").stat().st_size > 0


def test_resume_matches_uninterrupted(tmp_path, cfg):
    full, part, rest = (str(tmp_path / n) for n in ("full", "part", "rest"))
    assert main(["train", "--config", cfg, "--out", full]) == 0
    assert main(["train", "--config", cfg, "--out", part, "--stop-at", "10"]) == 0
    assert main(["train", "--resume", f"{part}/model.ckpt", "--out", rest]) == 0
    assert (tmp_path / "full/train.csv").read_bytes() == (tmp_path / "rest/train.csv").read_bytes()
    assert (tmp_path / "full/model.ckpt").read_bytes() == (tmp_path / "rest/model.ckpt").read_bytes()


def test_seed_flag_and_environment(tmp_path, cfg, monkeypatch):
    monkeypatch.setenv("DAFE_SEED", "5")
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "env")]) == 0
    assert main(["synth", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "flag")]) == 0
    assert main(["synth", "--config", cfg, "--seed", "6", "--out", str(tmp_path / "other")]) == 0
    a = (tmp_path / "env/0000/0/000.pgm").read_bytes()
    assert a == (tmp_path / "flag/0000/0/000.pgm").read_bytes()
    assert a != (tmp_path / "other/0000/0/000.pgm").read_bytes()


def test_extract_and_score(tmp_path, cfg):
    run, ex, sc = (str(tmp_path / n) for n in ("run", "ex", "sc"))
    assert main(["train", "--config", cfg, "--out", run]) == 0
    assert main(["extract", "--checkpoint", f"{run}/model.ckpt", "--out", ex]) == 0
    labels = read_rows(tmp_path / "ex/labels.csv")
    assert labels[0] == ["index", "identity", "view"] and len(labels) == 25
    assert main(["score", "--checkpoint", f"{run}/model.ckpt", "--features", f"{ex}/features.daft",
                 "--out", sc]) == 0
    rows = read_rows(tmp_path / "sc/scores.csv")
    assert rows[0] == ["i", "j", "score"] and len(rows) == 1 + 24 * 23
    scores = {(int(i), int(j)): float(s) for i, j, s in rows[1:]}
    assert scores[(0, 1)] == scores[(1, 0)]
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    imgs = sorted((tmp_path / "d").rglob("*.pgm"))[:2]
    assert main(["score", "--checkpoint", f"{run}/model.ckpt", "--pair", str(imgs[0]), str(imgs[1]),
                 "--out", str(tmp_path / "pair")]) == 0
    assert main(["score", "--checkpoint", f"{run}/model.ckpt", "--out", str(tmp_path / "none")]) == 1


def test_bench_optim(tmp_path, cfg):
    out = tmp_path / "trace.csv"
    assert main(["bench-optim", "--config", cfg, "--variant", "saga", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["evaluations", "suboptimality", "wall_seconds"]
    subopt = np.array([float(r[1]) for r in rows[1:]])
    assert subopt[-1] < subopt[0]
    assert out.with_suffix(".png").exists()
    assert main(["bench-optim", "--config", cfg, "--variant", "adam", "--out", str(out)]) == 1
    assert main(["bench-optim", "--config", cfg, "--variant", "nsaga", "--k", "3",
                 "--out", str(tmp_path / "dir")]) == 0
    assert (tmp_path / "dir/trace.csv").exists()
