"""CLI tests: config validation and exit codes, run-directory artifacts,
seed determinism, checkpoint round trips, and the plot exporter."""

import copy
import hashlib
import json
import os

import numpy as np
import pytest

from invgp import cli
from invgp import model as mdl
from invgp import ndgrad as ng
from invgp import transforms as tf


def _write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _toy_config(steps=25):
    return {
        "preset": "toy-fig1",
        "schedule": {
            "phases": [{"groups": ["gp_variational", "gp_hyper", "likelihood"],
                        "steps": steps, "lr": 0.05, "lr_decay": "none"}],
            "cycles": 1,
        },
    }


def _run(tmp_path, *argv):
    return cli.main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# config validation and exit codes


def test_missing_config_file_exits_2(tmp_path, capsys):
    rc = _run(tmp_path, "train", "--config", tmp_path / "nope.json",
              "--out", tmp_path / "out")
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_malformed_json_config_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    rc = _run(tmp_path, "train", "--config", path, "--out", tmp_path / "out")
    assert rc == 2


def test_missing_idx_path_exits_2_and_names_field(tmp_path, capsys):
    cfg = _toy_config()
    cfg["dataset"] = {"name": "idx"}
    rc = _run(tmp_path, "train", "--config", _write_config(tmp_path, cfg),
              "--out", tmp_path / "out")
    assert rc == 2
    assert "dataset.images_path" in capsys.readouterr().err


def test_nonexistent_idx_file_exits_2_and_names_field(tmp_path, capsys):
    cfg = _toy_config()
    cfg["dataset"] = {"name": "idx", "images_path": str(tmp_path / "x.idx"),
                      "labels_path": str(tmp_path / "y.idx")}
    rc = _run(tmp_path, "train", "--config", _write_config(tmp_path, cfg),
              "--out", tmp_path / "out")
    assert rc == 2
    assert "dataset.images_path" in capsys.readouterr().err


def test_unknown_preset_exits_2(tmp_path, capsys):
    rc = _run(tmp_path, "train",
              "--config", _write_config(tmp_path, {"preset": "bogus"}),
              "--out", tmp_path / "out")
    assert rc == 2
    assert "preset" in capsys.readouterr().err


def test_empty_probe_levels_exits_2(tmp_path, capsys):
    cfg = {"preset": "probe-cifar-desk", "probe": {"levels": []}}
    rc = _run(tmp_path, "probe", "--config", _write_config(tmp_path, cfg),
              "--out", tmp_path / "out")
    assert rc == 2
    assert "probe.levels" in capsys.readouterr().err


def test_softmax_requires_sample_bound():
    cfg = copy.deepcopy(cli.PRESETS["rotmnist-softmax-M9"])
    cfg["model"]["elbo_mode"] = "closed_gaussian"
    with pytest.raises(cli.ConfigError, match="elbo_mode"):
        cli.parse_config(cfg)


def test_parse_config_is_a_fixed_point():
    once = cli.parse_config(_toy_config())
    twice = cli.parse_config(json.loads(cli.serialize_config(once)))
    assert once == twice


def test_paper_scale_overrides_counts():
    cfg = cli.parse_config({"preset": "mnist312"}, paper_scale=True)
    assert cfg["model"]["inducing"] == 1200
    assert cfg["counts"]["s_o"] == 120
    assert "n_train" not in cfg["dataset"]


def test_preset_orbit_starts_at_phi_init():
    cfg = cli.parse_config({"preset": "mnist312"})
    orbit = cli.build_orbit(cfg["model"]["orbit"])
    assert orbit.angle_range() == pytest.approx(0.02)
    # only the angle component is active
    assert orbit.active_mask.tolist() == [True] + [False] * 6


# ---------------------------------------------------------------------------
# training runs: artifacts and determinism


def _train_once(tmp_path, sub, seed=0, steps=25):
    out = tmp_path / sub
    rc = _run(tmp_path, "train",
              "--config", _write_config(tmp_path, _toy_config(steps)),
              "--seed", seed, "--out", out)
    assert rc == 0
    return out


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_train_writes_standard_artifacts(tmp_path, capsys):
    out = _train_once(tmp_path, "run")
    assert (out / "checkpoint.bin").exists()
    assert (out / "manifest.json").exists()
    assert (out / "metrics.ndjson").exists()
    assert not (out / ".lock").exists()  # released on exit
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["seed"] == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed == manifest["final"]
    lines = (out / "metrics.ndjson").read_text().splitlines()
    assert len(lines) == 25
    assert all(np.isfinite(json.loads(l)["elbo"]) for l in lines)


def test_same_seed_reproduces_checkpoint_and_metrics(tmp_path, capsys):
    a = _train_once(tmp_path, "a", seed=7)
    b = _train_once(tmp_path, "b", seed=7)
    c = _train_once(tmp_path, "c", seed=8)
    assert _sha(a / "checkpoint.bin") == _sha(b / "checkpoint.bin")
    assert (a / "metrics.ndjson").read_text() == (b / "metrics.ndjson").read_text()
    assert _sha(a / "checkpoint.bin") != _sha(c / "checkpoint.bin")


def test_eval_reproduces_training_final_metrics(tmp_path, capsys):
    out = _train_once(tmp_path, "run")
    manifest = json.loads((out / "manifest.json").read_text())
    capsys.readouterr()
    rc = _run(tmp_path, "eval",
              "--config", _write_config(tmp_path, _toy_config()),
              "--seed", 0, "--out", tmp_path / "evalout",
              "--checkpoint", out / "checkpoint.bin")
    assert rc == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    for key, val in manifest["final"].items():
        assert printed[key] == pytest.approx(val, rel=1e-12)


def test_locked_output_dir_refuses_second_writer(tmp_path):
    out = tmp_path / "run"
    os.makedirs(out)
    (out / ".lock").write_text("12345")
    with pytest.raises(RuntimeError, match="locked"):
        cli.RunDir(str(out))


# ---------------------------------------------------------------------------
# checkpoint format round trip


def test_checkpoint_round_trips_params(tmp_path, rng):
    params = [
        ng.Param("a", rng.normal(size=(3, 2)), "gp_hyper"),
        ng.Param("b", np.float64(1.5), "likelihood"),
        ng.Param("c", rng.normal(size=4), "orbit"),
    ]
    path = tmp_path / "ck.bin"
    mdl.save_checkpoint(str(path), params, step=12, rng_state={"seed": 3},
                        extra={"kind": "model"})
    manifest, values = mdl.load_checkpoint(str(path))
    assert manifest["step"] == 12
    assert manifest["extra"]["kind"] == "model"
    fresh = [ng.Param(p.id, np.zeros_like(p.value), p.group) for p in params]
    mdl.restore_params(fresh, values)
    for orig, new in zip(params, fresh):
        np.testing.assert_array_equal(orig.value, new.value)


def test_restore_params_strict_mode_rejects_missing(tmp_path, rng):
    p = ng.Param("a", rng.normal(size=3), "gp_hyper")
    path = tmp_path / "ck.bin"
    mdl.save_checkpoint(str(path), [p])
    _, values = mdl.load_checkpoint(str(path))
    other = ng.Param("zz", np.zeros(3), "gp_hyper")
    with pytest.raises(KeyError):
        mdl.restore_params([other], values, strict=True)
    mdl.restore_params([other], values, strict=False)  # lenient: no-op
    np.testing.assert_array_equal(other.value, 0.0)


# ---------------------------------------------------------------------------
# plot exporter


def _write_ndjson(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def test_plot_flattens_runs_and_series(tmp_path, capsys):
    m1 = tmp_path / "runA.ndjson"
    _write_ndjson(m1, [
        {"step": s, "elbo": float(s), "phi_min": [-0.1 * s, 1.0]}
        for s in range(5)
    ])
    m2 = tmp_path / "runB.ndjson"
    _write_ndjson(m2, [{"step": s, "elbo": -1.0} for s in range(3)])
    rc = _run(tmp_path, "plot", m1, m2, "--out", tmp_path / "plots")
    assert rc == 0
    text = (tmp_path / "plots" / "series.csv").read_bytes().decode()
    assert "\r\n" in text
    rows = [r.split(",") for r in text.strip().splitlines()]
    assert rows[0] == ["run", "step", "series", "value"]
    body = rows[1:]
    runs = {r[0] for r in body}
    assert runs == {"runA", "runB"}
    series_a = {r[2] for r in body if r[0] == "runA"}
    assert series_a == {"elbo", "phi_min.0", "phi_min.1"}
    assert len([r for r in body if r[0] == "runB"]) == 3


def test_plot_names_run_from_directory_for_metrics_ndjson(tmp_path, capsys):
    rundir = tmp_path / "myexp"
    rundir.mkdir()
    m = rundir / "metrics.ndjson"
    _write_ndjson(m, [{"step": 0, "elbo": 1.0}])
    rc = _run(tmp_path, "plot", m, "--out", tmp_path / "plots")
    assert rc == 0
    text = (tmp_path / "plots" / "series.csv").read_text()
    assert "myexp" in text


def test_plot_downsamples_long_series_keeping_endpoints(tmp_path):
    m = tmp_path / "long.ndjson"
    _write_ndjson(m, [{"step": s, "elbo": float(s)} for s in range(5000)])
    rc = _run(tmp_path, "plot", m, "--out", tmp_path / "plots")
    assert rc == 0
    rows = (tmp_path / "plots" / "series.csv").read_text().strip().splitlines()[1:]
    steps = [int(r.split(",")[1]) for r in rows]
    assert len(steps) <= 2000
    assert steps[0] == 0 and steps[-1] == 4999


def test_plot_reports_malformed_line_with_location(tmp_path):
    m = tmp_path / "bad.ndjson"
    m.write_text('{"step": 0, "elbo": 1.0}\n{oops\n')
    with pytest.raises(ValueError, match=r"bad\.ndjson:2"):
        cli.cmd_plot([str(m)], str(tmp_path / "plots"))


# ---------------------------------------------------------------------------
# thread cap


def test_thread_cap_env_sets_blas_vars(monkeypatch):
    monkeypatch.setenv("INVGP_THREADS", "2")
    monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
    cli._apply_thread_cap()
    assert os.environ["OMP_NUM_THREADS"] == "2"
