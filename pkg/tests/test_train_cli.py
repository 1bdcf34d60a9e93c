import csv
import json
import math

import numpy as np
import pytest
import torch
import yaml

from afunet.cli import main
from afunet.config import ConfigError, SyntheticDataConfig, load_config
from afunet.data import SceneError, SyntheticScene, generate_synthetic, save_scene, write_manifest
from afunet.metrics import PSNR_CAP
from afunet.train import CheckpointError, Trainer, cosine_lr, evaluate, synthetic_scenes

TINY = {
    "model": {"stages": 1, "channels": 8, "window_size": 4, "num_heads": 2},
    "optim": {"batch": 2, "epochs": 3, "patch": 16},
    "data": {"synthetic": {"count": 2, "size": 24}},
    "train": {"val_every": 1, "checkpoint_every": 1},
}


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def tiny_config(**extra):
    return load_config(None, "desk", {**TINY, **extra})


def read_energy(path):
    with open(path) as fh:
        return [float(r["energy"]) for r in csv.DictReader(fh)]


# schedule


def test_cosine_lr_endpoints():
    E = 400
    assert cosine_lr(0, E) == pytest.approx(5e-4, rel=1e-12)
    assert cosine_lr(E, E) == pytest.approx(5e-6, rel=1e-12)
    assert cosine_lr(E / 2, E) == pytest.approx(2.525e-4, rel=1e-12)


def test_cosine_lr_monotone():
    vals = [cosine_lr(e, 50) for e in range(51)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# configuration


def test_profiles():
    desk = load_config(profile="desk")
    assert (desk.model.stages, desk.model.channels, desk.optim.patch, desk.optim.batch) == (2, 16, 64, 2)
    assert not desk.data.augment
    paper = load_config(profile="paper")
    assert (paper.optim.lr_init, paper.optim.lr_final, paper.optim.batch, paper.optim.epochs) == (5e-4, 5e-6, 6, 400)
    assert paper.optim.patch == 128 and paper.data.augment


def test_config_rejects_unknown_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        load_config(None, "desk", {"optim": {"learning_rate": 1}})
    with pytest.raises(ConfigError):
        load_config(None, "desk", {"optim": {"lr_init": 1e-6, "lr_final": 1e-5}})
    with pytest.raises(ConfigError):
        load_config(None, "desk", {"optim": {"epochs": 0}})
    with pytest.raises(ConfigError, match="profile"):
        load_config(None, "huge")


def test_config_yaml_roundtrip():
    cfg = tiny_config()
    assert load_config(None, "paper", yaml.safe_load(cfg.to_yaml())) == cfg


# trainer


def test_trainer_errors_before_training(tmp_path):
    empty = tiny_config(data={"synthetic": {"count": 0, "size": 24}})
    with pytest.raises(SceneError, match="empty"):
        Trainer(empty, tmp_path / "run")
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        Trainer(tiny_config(), blocker / "run")


def test_ledger_and_checkpoints(tmp_path):
    trainer = Trainer(tiny_config(), tmp_path)
    trainer.fit()
    lines = [json.loads(s) for s in (tmp_path / "ledger.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in lines] == [0, 1, 2]
    for e in lines:
        assert e["lr"] == pytest.approx(cosine_lr(e["epoch"], 3))
        assert {"loss", "losses", "val", "checkpoints", "wall_clock"} <= set(e)
    assert (tmp_path / "best.pt").exists() and (tmp_path / "last.pt").exists()


def test_resume_reproduces_next_batch_loss(tmp_path):
    full = Trainer(tiny_config(), tmp_path / "a")
    reference = full.fit()

    part = Trainer(tiny_config(), tmp_path / "b")
    part.fit(until=2)
    resumed = Trainer.resume(tmp_path / "b" / "last.pt")
    assert resumed.epoch == 2
    entry = resumed.run_epoch()
    want = reference[2]["losses"][0]
    assert abs(entry["losses"][0] - want) <= 1e-6 * abs(want)
    ledger = (tmp_path / "b" / "ledger.jsonl").read_text().splitlines()
    assert [json.loads(s)["epoch"] for s in ledger] == [0, 1, 2]


def test_epoch_batches_deterministic(tmp_path):
    t = Trainer(tiny_config(), tmp_path)
    a = [b.y1 for b in t.epoch_batches(5)]
    b = [b.y1 for b in t.epoch_batches(5)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "bad.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        Trainer.resume(tmp_path / "bad.pt")
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError, match="not an"):
        Trainer.resume(tmp_path / "other.pt")


# evaluation reports


def test_stub_model_hits_caps_and_aggregate_is_mean(tmp_path):
    stacks = synthetic_scenes(SyntheticDataConfig(count=3, size=24))
    report = evaluate(lambda s: s.gt, stacks)
    for row in report.rows:
        assert row["psnr_mu"] == PSNR_CAP and row["psnr_l"] == PSNR_CAP
        assert row["ssim_mu"] == pytest.approx(1.0, abs=1e-12)
    report.write(tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert len(rows) == len(stacks) + 1


def test_aggregate_equals_recomputed_mean(tmp_path):
    rng = np.random.default_rng(0)
    stacks = synthetic_scenes(SyntheticDataConfig(count=4, size=24))
    report = evaluate(lambda s: np.clip(s.gt + rng.normal(0, 0.05, s.gt.shape), 0, 1), stacks)
    report.write(tmp_path)
    rows = [json.loads(s) for s in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    agg = rows[-1]
    assert agg["scene"] == "mean"
    for k in ("psnr_mu", "psnr_l", "ssim_mu", "ssim_l"):
        total = 0.0
        for r in rows[:-1]:
            total += r[k]
        assert abs(agg[k] - total / (len(rows) - 1)) <= 1e-9


# CLI


@pytest.fixture
def trained(tmp_path, tiny_config_file):
    assert main(["train", "--profile", "desk", "--config", str(tiny_config_file),
                 "--out", str(tmp_path), "--run-id", "tr"]) == 0
    return tmp_path / "tr"


def test_cli_train_echoes_config(trained, tiny_config_file):
    echoed = yaml.safe_load((trained / "config.yaml").read_text())
    assert echoed["model"]["channels"] == 8
    assert (trained / "config.source.yaml").read_text() == tiny_config_file.read_text()


def test_cli_infer_bit_identical_and_shape(tmp_path, trained):
    spec = SyntheticScene(height=127, width=131)
    save_scene(generate_synthetic(spec, np.random.default_rng(0), name="odd"), tmp_path / "odd")
    outs = []
    for run in ("i1", "i2"):
        assert main(["infer", "--checkpoint", str(trained / "last.pt"), "--scene", str(tmp_path / "odd"),
                     "--out", str(tmp_path), "--run-id", run]) == 0
        outs.append(tmp_path / run)
    a, b = (np.load(o / "odd.npy") for o in outs)
    assert a.shape == (127, 131, 3)
    assert np.array_equal(a, b)
    assert (outs[0] / "odd.hdr").read_bytes() == (outs[1] / "odd.hdr").read_bytes()
    assert a.min() > 0 and a.max() < 1
    assert (outs[0] / "odd.png").exists()


def test_cli_eval_skips_missing_gt(tmp_path, trained):
    stacks = synthetic_scenes(SyntheticDataConfig(count=2, size=24))
    for s in stacks:
        save_scene(s, tmp_path / "scenes" / s.name)
    (tmp_path / "scenes" / stacks[1].name / "HDRImg.hdr").unlink()
    write_manifest(tmp_path / "scenes" / "m.txt", [s.name for s in stacks])
    assert main(["eval", "--checkpoint", str(trained / "best.pt"), "--manifest", str(tmp_path / "scenes" / "m.txt"),
                 "--out", str(tmp_path), "--run-id", "ev"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "metrics.csv")))
    assert [r["scene"] for r in rows] == [stacks[0].name, "mean"]
    assert (tmp_path / "ev" / "metrics.skipped.txt").read_text().split() == [stacks[1].name]


def test_cli_resume(tmp_path, trained):
    assert main(["train", "--resume", "--checkpoint", str(trained / "last.pt"), "--epochs", "5",
                 "--out", str(tmp_path), "--run-id", "more"]) == 0
    ledger = [json.loads(s) for s in (tmp_path / "more" / "ledger.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in ledger] == [3, 4]


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    (tmp_path / "junk.pt").write_bytes(b"junk")
    assert main(["infer", "--checkpoint", str(tmp_path / "junk.pt"), "--scene", str(tmp_path),
                 "--out", str(tmp_path)]) != 0
    (tmp_path / "bad.yaml").write_text("optim:\n  nope: 1\n")
    assert main(["train", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path)]) != 0
    assert main(["eval", "--out", str(tmp_path)]) != 0
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--sweep", "depth"])
    assert exc.value.code != 0


def write_problem(path, text):
    path.write_text(text)
    return path


def test_cli_oracle_consistent_problem(tmp_path):
    prob = write_problem(tmp_path / "p.yaml", "synthetic: {height: 8, width: 8, seed: 3}\n"
                                              "lambda: [1.0, 1.0]\nsolver: {max_iters: 200, tol: 0}\n")
    assert main(["oracle", "--problem", str(prob), "--out", str(tmp_path), "--run-id", "o"]) == 0
    trace = read_energy(tmp_path / "o" / "energy.csv")
    assert trace[-1] < 1e-10
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["max_abs_error"] < 1e-6
    assert (tmp_path / "o" / "x.hdr").exists()


def test_cli_oracle_lambda_zero_returns_reference(tmp_path):
    rng = np.random.default_rng(0)
    ys = [rng.uniform(size=(6, 5)) for _ in range(3)]
    for name, y in zip(("y1", "y2", "y3"), ys):
        np.save(tmp_path / f"{name}.npy", y)
    prob = write_problem(tmp_path / "p.yaml", "observations: {y1: y1.npy, y2: y2.npy, y3: y3.npy}\n"
                                              "gains: {d1: 0.5, d2: 1.0, d3: 2.0}\n"
                                              "lambda: 0\nsolver: {max_iters: 1}\n")
    assert main(["oracle", "--problem", str(prob), "--out", str(tmp_path), "--run-id", "o"]) == 0
    # (y2 + 2 y2) / 3 is y2 up to one rounding step
    np.testing.assert_allclose(np.load(tmp_path / "o" / "x.npy"), ys[1], rtol=1e-15, atol=0)


@pytest.mark.parametrize("text, field, line", [
    ("lambda: [1, 1]\nsolver:\n  order: XY\n", "solver.order", 3),
    ("synthetic: {}\nbeta: [1, 2, 3]\n", "beta", 2),
    ("observations:\n  y1: [[1.0]]\n  y2: [[1.0]]\n  y3: [[1.0]]\ngains:\n  d1: -1\n", "gains.d1", 6),
    ("synthetic: {}\nstep_size: 1\n", "step_size", 2),
    ("synthetic: {\n", "<syntax>", None),
])
def test_cli_oracle_diagnostics(tmp_path, capsys, text, field, line):
    prob = write_problem(tmp_path / "p.yaml", text)
    assert main(["oracle", "--problem", str(prob), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert field in err
    if line is not None:
        assert f"p.yaml:{line}:" in err


@pytest.mark.parametrize("sweep, names", [
    ("stages", ["T2", "T3", "T4", "T5", "T6"]),
    ("components", ["M1", "M2", "M3", "M4", "full"]),
    ("paradigm", ["AF", "FA"]),
])
def test_cli_ablate_rows(tmp_path, tiny_config_file, sweep, names):
    assert main(["ablate", "--sweep", sweep, "--epochs", "1", "--config", str(tiny_config_file),
                 "--out", str(tmp_path), "--run-id", "ab"]) == 0
    rows = [json.loads(s) for s in (tmp_path / "ab" / "ablation.jsonl").read_text().splitlines()]
    assert [r["variant"] for r in rows] == names
    for r in rows:
        assert math.isfinite(r["psnr_mu"])
        if r["variant"] == "M1":
            assert r["sam_calls"] == r["cfm_calls"] == r["dcm_calls"] == 0
