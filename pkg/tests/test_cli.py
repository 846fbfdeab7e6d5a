import json
import subprocess
import sys

import numpy as np
import pytest

from helpers import perturb
from lrsflow import cli
from lrsflow.checkpoint import FORMAT_VERSION, Checkpoint
from lrsflow.data import read_pgm
from lrsflow.errors import CheckpointError, NonFiniteLoss
from lrsflow.flow import make_rng
from lrsflow.train import TrainConfig, model_from_config

CONFIG = dict(learning_rate=5e-4, batch_size=128, iterations=25, num_bins=8, tail_bound=5.0,
              transformation_layers=2, mode="coupling", seed=1, num_samples=1500,
              resnet_hidden_features=16, eval_interval=10)


def write_config(path, **kw):
    path.write_text(json.dumps({**CONFIG, **kw}))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "cfg.json")
    assert cli.main(["train", cfg, "--data", "generator:rings", "--out", str(root / "out")]) == 0
    return root / "out"


def test_train_writes_outputs(trained):
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["config"]["num_bins"] == 8
    assert manifest["seed"] == 1 and len(manifest["data_hash"]) == 64
    assert manifest["rng"]["bit_generator"] == "Philox"
    lines = (trained / "loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,train_nll,val_nll,lr" and len(lines) == 26


def test_manifest_rerun_reproduces_loss_csv(trained, tmp_path):
    out = tmp_path / "again"
    assert cli.main(["train", "--manifest", str(trained / "manifest.json"), "--out", str(out)]) == 0
    assert (out / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()
    assert (out / "checkpoint.lrsf").read_bytes() == (trained / "checkpoint.lrsf").read_bytes()


def test_manifest_detects_changed_data(trained, tmp_path):
    manifest = json.loads((trained / "manifest.json").read_text())
    manifest["data_hash"] = "0" * 64
    path = tmp_path / "m.json"
    path.write_text(json.dumps(manifest))
    assert cli.main(["train", "--manifest", str(path), "--out", str(tmp_path / "o")]) == 1


def test_missing_config_key_exits_1(tmp_path, capsys):
    cfg = {**CONFIG}
    del cfg["num_bins"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["train", str(path), "--data", "generator:rings", "--out", str(tmp_path)]) == 1
    assert "num_bins" in capsys.readouterr().err


def test_bad_data_exits_1(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert cli.main(["train", cfg, "--data", "generator:spirals", "--out", str(tmp_path)]) == 1
    assert cli.main(["train", cfg, "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 1


def test_non_finite_loss_exits_2(tmp_path, monkeypatch):
    def boom(*args, **kw):
        raise NonFiniteLoss(7, float("nan"))

    monkeypatch.setattr(cli, "fit", boom)
    cfg = write_config(tmp_path / "c.json")
    assert cli.main(["train", cfg, "--data", "generator:rings", "--out", str(tmp_path / "o")]) == 2


def test_usage_errors_exit_1():
    with pytest.raises(SystemExit) as info:
        cli.main(["sample"])
    assert info.value.code == 1


def test_train_on_csv(tmp_path, rng):
    path = tmp_path / "tab.csv"
    rows = rng.standard_normal((300, 3)) @ np.array([[1, 0.5, 0], [0, 1, 0.3], [0, 0, 1]])
    path.write_text("a,b,c\n" + "\n".join(",".join(repr(float(v)) for v in r) for r in rows) + "\n")
    cfg = write_config(tmp_path / "c.json", iterations=5)
    out = tmp_path / "o"
    assert cli.main(["train", cfg, "--data", str(path), "--out", str(out)]) == 0
    ckpt = Checkpoint.load(out / "checkpoint.lrsf")
    assert ckpt.data_stats["columns"] == ["a", "b", "c"]
    assert cli.main(["sample", str(out / "checkpoint.lrsf"), "--n", "4", "--out",
                     str(tmp_path / "s.csv"), "--original-units"]) == 0
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "a,b,c"


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_is_byte_identical(trained, tmp_path):
    raw = (trained / "checkpoint.lrsf").read_bytes()
    ckpt = Checkpoint.from_bytes(raw)
    assert ckpt.to_bytes() == raw
    ckpt.save(tmp_path / "c.lrsf")
    assert (tmp_path / "c.lrsf").read_bytes() == raw
    assert ckpt.optimizer is not None and ckpt.optimizer.step == 25
    assert ckpt.rng_state["bit_generator"] == "Philox"


def test_checkpoint_preserves_log_prob_bitwise(tmp_path):
    cfg = TrainConfig(**{k: v for k, v in CONFIG.items()})
    model = perturb(model_from_config(cfg, 3), 0.2, 0)
    probe = make_rng(5).standard_normal((64, 3))
    Checkpoint.from_model(model, cfg).save(tmp_path / "m.lrsf")
    restored = Checkpoint.load(tmp_path / "m.lrsf").to_model()
    assert restored.log_prob(probe).tobytes() == model.log_prob(probe).tobytes()


def test_checkpoint_version_mismatch_rejected(trained):
    raw = (trained / "checkpoint.lrsf").read_bytes()
    old = f'"format_version":{FORMAT_VERSION}'.encode()
    bad = raw.replace(old, b'"format_version":9')
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(bad)


def test_checkpoint_garbage_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"hello world")
    raw = (tmp_path / "x")
    raw.write_bytes(b"LRSF 5\n{}}}}\n")
    with pytest.raises(CheckpointError):
        Checkpoint.load(raw)
    assert cli.main(["eval", str(tmp_path / "missing.lrsf")]) == 1


def test_checkpoint_payload_is_little_endian_f8(trained):
    raw = (trained / "checkpoint.lrsf").read_bytes()
    first_nl = raw.index(b"\n")
    n = int(raw[5:first_nl])
    header = json.loads(raw[first_nl + 1:first_nl + 1 + n])
    payload = raw[first_nl + 2 + n:]
    total = sum(int(np.prod(e["shape"])) for e in header["tensors"])
    assert len(payload) == 8 * total
    ckpt = Checkpoint.from_bytes(raw)
    e = header["tensors"][0]
    name = e["name"].split("/", 1)[1]
    first = np.frombuffer(payload[:8], dtype="<f8")[0]
    assert first == ckpt.params[name].ravel()[0]


# ---------------------------------------------------------------------------
# eval / sample / grids / spline plots
# ---------------------------------------------------------------------------

def test_eval_prints_machine_readable_line(trained, capsys):
    assert cli.main(["eval", str(trained / "checkpoint.lrsf")]) == 0
    line = capsys.readouterr().out.strip()
    nll, se = (float(part.split("=")[1]) for part in line.split())
    assert line.startswith("nll_nats=") and np.isfinite(nll) and se > 0


def test_eval_identity_model_on_normal_data(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", iterations=0, num_samples=20000)
    out = tmp_path / "o"
    assert cli.main(["train", cfg, "--data", "generator:normal", "--out", str(out)]) == 0
    capsys.readouterr()
    assert cli.main(["eval", str(out / "checkpoint.lrsf")]) == 0
    parts = dict(p.split("=") for p in capsys.readouterr().out.split())
    nll, se = float(parts["nll_nats"]), float(parts["stderr"])
    assert abs(nll - np.log(2 * np.pi * np.e)) < 4 * se


def test_eval_dimension_mismatch_exits_1(trained, tmp_path):
    path = tmp_path / "three.csv"
    path.write_text("\n".join(f"{i},{i * i % 7},{i % 3}" for i in range(50)) + "\n")
    assert cli.main(["eval", str(trained / "checkpoint.lrsf"), "--data", str(path)]) == 1


def test_sample_outputs(trained, tmp_path):
    ckpt = str(trained / "checkpoint.lrsf")
    assert cli.main(["sample", ckpt, "--n", "0", "--out", str(tmp_path / "e.csv")]) == 0
    assert (tmp_path / "e.csv").read_text() == "x0,x1\n"
    for name in ("a.csv", "b.csv"):
        assert cli.main(["sample", ckpt, "--n", "200", "--seed", "4",
                         "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = np.loadtxt(tmp_path / "a.csv", delimiter=",", skiprows=1)
    model = Checkpoint.load(ckpt).to_model()
    assert rows.shape == (200, 2) and np.all(np.isfinite(model.log_prob(rows)))
    assert cli.main(["sample", ckpt, "--n", "-1", "--out", str(tmp_path / "c.csv")]) == 1


def test_density_grid_csv_and_pgm(trained, tmp_path, capsys):
    ckpt = str(trained / "checkpoint.lrsf")
    assert cli.main(["density-grid", ckpt, "--range", "-6", "6", "--steps", "300",
                     "--out", str(tmp_path / "g.csv")]) == 0
    integral = float(capsys.readouterr().out.strip().split("=")[1])
    assert abs(integral - 1.0) < 0.02
    grid = np.loadtxt(tmp_path / "g.csv", delimiter=",", skiprows=1)
    assert grid.shape == (300 * 300, 3)
    assert grid[0, 0] == pytest.approx(-6 + 0.02) and grid[0, 1] == pytest.approx(-6 + 0.02)
    assert cli.main(["density-grid", ckpt, "--range", "-6", "6", "--steps", "40",
                     "--out", str(tmp_path / "g.pgm")]) == 0
    pix = read_pgm(tmp_path / "g.pgm")
    assert pix.shape == (40, 40) and pix.max() == 255
    one = tmp_path / "one.csv"
    assert cli.main(["density-grid", ckpt, "--range", "-1", "1", "--steps", "1",
                     "--out", str(one)]) == 0
    cell = np.loadtxt(one, delimiter=",", skiprows=1)
    assert cell.shape == (3,) and cell[0] == 0.0 and cell[1] == 0.0


def test_density_grid_pgm_peak_is_at_the_mode(tmp_path):
    cfg = TrainConfig(**CONFIG)
    model = perturb(model_from_config(cfg, 2), 0.3, 2)
    Checkpoint.from_model(model, cfg).save(tmp_path / "m.lrsf")
    out = tmp_path / "g.pgm"
    assert cli.main(["density-grid", str(tmp_path / "m.lrsf"), "--range", "-4", "4",
                     "--steps", "50", "--out", str(out)]) == 0
    pix = read_pgm(out)
    c, dens, _ = cli.density_grid(model, -4.0, 4.0, 50)
    i, j = np.unravel_index(np.argmax(dens), dens.shape)
    assert pix[49 - i, j] == 255


def test_density_grid_rejects_bad_input(trained, tmp_path):
    ckpt = str(trained / "checkpoint.lrsf")
    out = str(tmp_path / "g.csv")
    assert cli.main(["density-grid", ckpt, "--range", "1", "-1", "--steps", "5", "--out", out]) == 1
    assert cli.main(["density-grid", ckpt, "--range", "-1", "1", "--steps", "0", "--out", out]) == 1


def _knots(tmp_path, xs, ys, ds):
    path = tmp_path / "k.json"
    path.write_text(json.dumps({"xs": xs, "ys": ys, "ds": ds}))
    return str(path)


def test_spline_plot_identity(tmp_path):
    k = _knots(tmp_path, [-1, 0, 1], [-1, 0, 1], [1, 1, 1])
    assert cli.main(["spline-plot", "--knots", k, "--lambda", "0.3", "--out",
                     str(tmp_path / "c.csv")]) == 0
    rows = np.loadtxt(tmp_path / "c.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(rows[:, 2], rows[:, 1], atol=1e-14)


def test_spline_plot_lambdas_agree_at_knots_only(tmp_path):
    xs, ys, ds = [-1, 0, 1], [-1, 0.6, 1], [1, 0.2, 3]
    k = _knots(tmp_path, xs, ys, ds)
    out = tmp_path / "c.csv"
    assert cli.main(["spline-plot", "--knots", k, "--lambda", "0.2", "--lambda", "0.8",
                     "--out", str(out)]) == 0
    rows = np.loadtxt(out, delimiter=",", skiprows=1)
    a, b = rows[rows[:, 0] == 0.2], rows[rows[:, 0] == 0.8]
    np.testing.assert_array_equal(a[:, 1], b[:, 1])
    at_knots = np.isin(a[:, 1], xs)
    assert at_knots.sum() == 3
    np.testing.assert_allclose(a[at_knots, 2], ys, atol=1e-14)
    np.testing.assert_allclose(b[at_knots, 2], ys, atol=1e-14)
    np.testing.assert_allclose(a[at_knots, 3], ds, rtol=1e-9)
    assert np.max(np.abs(a[:, 2] - b[:, 2])) > 0


@pytest.mark.parametrize("lam", ["0", "1.0", "1.5", "-0.2"])
def test_spline_plot_rejects_bad_lambda(tmp_path, lam):
    k = _knots(tmp_path, [0, 1], [0, 1], [1, 1])
    assert cli.main(["spline-plot", "--knots", k, f"--lambda={lam}", "--out",
                     str(tmp_path / "c.csv")]) == 1


def test_spline_plot_rejects_bad_knots(tmp_path):
    k = _knots(tmp_path, [0, 1], [1, 0], [1, 1])
    assert cli.main(["spline-plot", "--knots", k, "--out", str(tmp_path / "c.csv")]) == 1


def test_timing_command(trained, capsys):
    assert cli.main(["timing", str(trained / "checkpoint.lrsf"), "--repeats", "1",
                     "--batch-size", "64"]) == 0
    assert "ratio=" in capsys.readouterr().out


def test_module_entry_point_and_log_env(trained):
    env = {"LRSFLOW_LOG": "DEBUG", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "lrsflow", "eval",
                           str(trained / "checkpoint.lrsf")], capture_output=True, text=True,
                          env=env)
    assert proc.returncode == 0 and proc.stdout.startswith("nll_nats=")
    proc = subprocess.run([sys.executable, "-m", "lrsflow", "--version"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "lrsflow" in proc.stdout
