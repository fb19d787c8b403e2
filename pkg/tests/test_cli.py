"""End-to-end command-line tests on a tiny network and dataset."""

import json

import numpy as np
import pytest
import yaml

from vlocnet import cli, experiments as X, gradcheck
from vlocnet import tensor as T
from vlocnet.data import directory_hash, load_sevenscenes_layout
from vlocnet.model import load_checkpoint

TINY = {
    "network": {
        "input_resolution": [16, 16, 3],
        "stem_channels": 4,
        "stage_channels": [4, 8, 8, 8],
        "units_per_stage": 1,
        "fuse_channels": 2,
        "fc1_dim": 8,
    },
    "preprocess": {"rescale_short_side": 16, "crop": 16},
    "synth": {"resolution": 16, "n_frames": 6, "n_sequences": 2, "test_sequences": 1},
    "train": {"iterations": 4, "batch_size": 4},
}


@pytest.fixture(scope="module")
def tiny_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return str(p)


@pytest.fixture(scope="module")
def dataset(tiny_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "desk"
    assert cli.main(["synth", "--config", tiny_file, "--out", str(out), "--seed", "3"]) == 0
    return str(out)


def run(*argv):
    return cli.main([str(a) for a in argv])


# ---------------------------------------------------------------- synth


def test_synth_is_hash_stable(tiny_file, dataset, tmp_path):
    other = tmp_path / "again"
    assert run("synth", "--config", tiny_file, "--out", other, "--seed", 3) == 0
    assert directory_hash(other) == directory_hash(dataset)
    splits = load_sevenscenes_layout(dataset)
    assert len(splits["train"]) == 1 and len(splits["test"]) == 1
    assert len(splits["train"][0]) == 6


def test_synth_refuses_to_overwrite(tiny_file, tmp_path, capsys):
    out = tmp_path / "d"
    assert run("synth", "--config", tiny_file, "--out", out) == 0
    before = directory_hash(out)
    assert run("synth", "--config", tiny_file, "--out", out, "--seed", 9) == cli.EXIT_DATA
    assert directory_hash(out) == before
    assert "--force" in capsys.readouterr().err
    assert run("synth", "--config", tiny_file, "--out", out, "--seed", 9, "--force") == 0
    assert directory_hash(out) != before


def test_synth_rejects_zero_frames(tiny_file, tmp_path):
    out = tmp_path / "z"
    assert run("synth", "--config", tiny_file, "--out", out, "--n-frames", 0) == cli.EXIT_CONFIG
    assert not out.exists()


def test_synth_aliasing_manifest_lists_twins(tiny_file, tmp_path):
    out = tmp_path / "a"
    # file keys outrank presets, so the tiny file's sequence counts are overridden by flags
    args = ["--preset", "aliased", "--set", "synth.n_sequences=4", "--set", "synth.test_sequences=2"]
    assert run("synth", "--config", tiny_file, "--out", out, *args) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["alias_twins"] == [["seq-01", "seq-02"], ["seq-03", "seq-04"]]
    assert len(m["aliasing_regions"]) == 2
    odd = tmp_path / "odd"
    assert run("synth", "--config", tiny_file, "--out", odd, "--aliasing") == cli.EXIT_CONFIG


# ---------------------------------------------------------------- config handling


def test_precedence_defaults_presets_file_flags(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"preset": "m1", "loss": {"beta": 50.0}, "seed": 4}))
    cfg = X.resolve(X.load_file(f), {"loss": {"beta": 7.0}})
    assert cfg.loss == {"mode": "beta", "beta": 7.0}
    assert cfg.network["activation"] == "relu" and cfg.seed == 4
    assert X.resolve(X.load_file(f)).loss["beta"] == 50.0


def test_config_hash_ignores_output_path():
    a = X.resolve({}, {"out": "x", "preset": "m4"})
    b = X.resolve({}, {"out": "y", "preset": ["m4"]})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != X.resolve({}, {"preset": "m2"}).config_hash()


@pytest.mark.parametrize(
    "argv",
    [
        ["--preset", "nope"],
        ["--set", "network.no_such_field=1"],
        ["--set", "network.activation=tanh"],
        ["--set", "missing_equals"],
        ["--set", "train.iterations=-1"],
    ],
)
def test_bad_configuration_exits_2(dataset, tmp_path, argv):
    assert run("train", "--dataset", dataset, "--out", tmp_path / "t", *argv) == cli.EXIT_CONFIG
    assert not (tmp_path / "t").exists()


def test_missing_config_file(tmp_path):
    assert run("train", "--config", tmp_path / "none.yaml") == cli.EXIT_CONFIG


# ---------------------------------------------------------------- train and eval


def test_missing_dataset_leaves_no_outputs(tiny_file, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--config", tiny_file, "--dataset", tmp_path / "nothing", "--out", out) == cli.EXIT_DATA
    assert not out.exists()


@pytest.mark.parametrize("preset", ["m1", "m2", "m3", "m4", "vo"])
def test_train_presets(tiny_file, dataset, tmp_path, preset):
    out = tmp_path / preset
    assert run("train", "--config", tiny_file, "--dataset", dataset, "--out", out, "--preset", preset) == 0
    params, header = load_checkpoint(out / "checkpoint.npz")
    meta = header["meta"]
    assert meta["run_config"]["preset"] == [preset]
    assert meta["dataset_hash"] == directory_hash(dataset)
    assert (out / "curves.csv").read_text().count("\n") == 1 + TINY["train"]["iterations"]
    saved = yaml.safe_load((out / "config.yaml").read_text())
    assert saved["config_hash"] == meta["config_hash"]
    if preset == "m1":
        assert params.config.activation == "relu" and params.config.fuse_prev_pose_at_stage == 0


def test_train_and_eval_are_byte_deterministic(tiny_file, dataset, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("train", "--config", tiny_file, "--dataset", dataset, "--out", out, "--seed", 5) == 0
        assert run("eval", "--checkpoint", out / "checkpoint.npz", "--dataset", dataset, "--out", out / "eval") == 0
        outs.append(out)
    a, b = outs
    for rel in ("checkpoint.npz", "curves.csv", "config.yaml", "eval/report.json", "eval/medians.csv", "eval/histogram.csv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    report = json.loads((a / "eval/report.json").read_text())
    assert report["metadata"]["first_frame_previous_pose"] == "groundtruth"
    assert report["metadata"]["seed"] == 5
    assert report["metadata"]["vo_protocol"]["window_fractions_of_path_length"] == [0.25, 0.5, 0.75, 1.0]


def test_eval_rejects_mismatched_config(tiny_file, dataset, tmp_path, capsys):
    out = tmp_path / "t"
    assert run("train", "--config", tiny_file, "--dataset", dataset, "--out", out) == 0
    code = run(
        "eval", "--checkpoint", out / "checkpoint.npz", "--dataset", dataset, "--out", tmp_path / "e",
        "--config", tiny_file, "--set", "network.fc1_dim=16",
    )
    assert code == cli.EXIT_CONFIG
    assert "config hash mismatch" in capsys.readouterr().err
    assert not (tmp_path / "e").exists()
    # the matching config passes the check
    assert run("eval", "--checkpoint", out / "checkpoint.npz", "--dataset", dataset, "--config", tiny_file, "--out", tmp_path / "ok") == 0


def test_eval_missing_checkpoint(dataset, tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "x.npz", "--dataset", dataset) == cli.EXIT_DATA


def test_multitask_initialization_copies_streams(tiny_file, dataset, tmp_path):
    st, vo = tmp_path / "st", tmp_path / "vo"
    assert run("train", "--config", tiny_file, "--dataset", dataset, "--out", st, "--preset", "st", "--seed", 1) == 0
    assert run("train", "--config", tiny_file, "--dataset", dataset, "--out", vo, "--preset", "vo", "--seed", 2) == 0
    mt = tmp_path / "mt"
    assert run("train", "--config", tiny_file, "--dataset", dataset, "--out", mt, "--preset", "mt-dual") == cli.EXIT_CONFIG
    code = run(
        "train", "--config", tiny_file, "--dataset", dataset, "--out", mt, "--preset", "mt-dual",
        "--init-global", st / "checkpoint.npz", "--init-odometry", vo / "checkpoint.npz", "--iterations", 0,
    )
    assert code == 0
    p_mt, h = load_checkpoint(mt / "checkpoint.npz")
    p_st, _ = load_checkpoint(st / "checkpoint.npz")
    p_vo, _ = load_checkpoint(vo / "checkpoint.npz")
    assert h["meta"]["init_applied"] == ["odometry", "global"]
    sub = p_mt.subsets()
    mt_w, st_w, vo_w = (dict((k, v.data) for k, v in p.named()) for p in (p_mt, p_st, p_vo))
    for name in [*sub["shared"], *sub["global_only"], *sub["heads_global"]]:
        np.testing.assert_array_equal(mt_w[name], st_w[name])
    for name in [*sub["odom_only"], *sub["heads_odom"]]:
        np.testing.assert_array_equal(mt_w[name], vo_w[name])


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_command_prints_every_row(capsys):
    assert run("gradcheck", "--points", 1) == 0
    out = capsys.readouterr().out
    for check in gradcheck.registry():
        assert check.name in out
    assert f"{len(gradcheck.registry())} checks, {len(gradcheck.registry())} passed" in out


def test_gradcheck_command_fails_on_corrupted_gradient(monkeypatch, capsys):
    def bad_exp(a):
        a = T.as_tensor(a)
        out = np.exp(a.data)
        return T._make(out, (a,), lambda g: (1.01 * g * out,), "exp")

    monkeypatch.setattr(T, "exp", bad_exp)
    assert run("gradcheck", "--points", 1) == cli.EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out


# ---------------------------------------------------------------- sweeps


def test_sharing_depth_sweep(tiny_file, dataset, tmp_path):
    out = tmp_path / "sw"
    assert run("sweep", "sharing-depth", "--config", tiny_file, "--dataset", dataset, "--out", out, "--set", "train.iterations=2") == 0
    rows = X.read_sweep(out / "sweep.csv")
    assert [r["value"] for r in rows] == ["2", "3", "4"]
    assert len({r["dataset_hash"] for r in rows}) == 1
    assert rows[0]["dataset_hash"] == directory_hash(dataset)


def test_strategy_sweep_reports_both(tiny_file, dataset, tmp_path, capsys):
    out = tmp_path / "sw"
    assert run("sweep", "strategy", "--config", tiny_file, "--dataset", dataset, "--out", out, "--seed", 2) == 0
    rows = X.read_sweep(out / "sweep.csv")
    assert [r["point"] for r in rows] == ["joint", "alternating"]
    assert {r["seed"] for r in rows} == {"2"}
    assert all(r["median_translation_m"] and r["vo_translation_pct"] for r in rows)
    assert "alternating vs joint" in capsys.readouterr().out


def test_sweep_without_dataset(tiny_file, tmp_path):
    assert run("sweep", "strategy", "--config", tiny_file, "--out", tmp_path / "s") == cli.EXIT_DATA
