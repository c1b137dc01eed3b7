"""Command line behavior: settings precedence, manifests, determinism,
artifact layout, and exit codes. Most tests drive main() in-process to keep
the suite fast; nothing here starts a server (the online loop has its own
tests)."""

import json
import os

import numpy as np
import pytest

from fleetnav.cli import (build_parser, gen_config_from_dict, main,
                          resolve_settings, sim_config_from_dict)
from fleetnav.procgen import load_layout
from fleetnav.sim import SimConfig
import dataclasses


def run_cli(argv):
    return main(argv)


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# parser and exit codes


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["gen-env", "--no-such-flag"])
    assert exc.value.code == 2


def test_missing_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        run_cli([])
    assert exc.value.code == 2


def test_help_lists_every_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in ("gen-env", "serve", "worker", "pretrain", "train-online",
                 "eval", "ablate", "bc-train"):
        assert name in out


def test_worker_usage_errors_exit_2(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("FLEETNAV_PASSWORD", raising=False)
    assert run_cli(["worker", "--outdir", str(tmp_path)]) == 2  # no user
    assert run_cli(["worker", "--user", "w1", "--outdir", str(tmp_path)]) == 2


def test_eval_without_policy_exits_2(tmp_path):
    assert run_cli(["eval", "--outdir", str(tmp_path)]) == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    code = run_cli(["eval", "--policy", str(tmp_path / "missing.bin"),
                    "--outdir", str(tmp_path / "out")])
    assert code == 1
    # the manifest must already be on disk: it is written before any work
    assert (tmp_path / "out" / "run_manifest.json").exists()


# ---------------------------------------------------------------------------
# settings resolution


def test_precedence_flag_env_file_default(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 7, "seed": 3}))
    parser = build_parser()

    args = parser.parse_args(["gen-env", "--config", str(cfg)])
    s = resolve_settings(args, {"count": 1, "seed": 0, "outdir": "x"})
    assert (s["count"], s["seed"]) == (7, 3)          # file beats default
    assert s["outdir"] == "x"                          # default survives

    monkeypatch.setenv("FLEETNAV_SEED", "11")
    s = resolve_settings(args, {"count": 1, "seed": 0, "outdir": "x"})
    assert s["seed"] == 11                             # env beats file
    assert isinstance(s["seed"], int)                  # coerced via default type

    args = parser.parse_args(["gen-env", "--config", str(cfg), "--seed", "99"])
    s = resolve_settings(args, {"count": 1, "seed": 0, "outdir": "x"})
    assert s["seed"] == 99                             # flag beats env


def test_env_bool_coercion(monkeypatch):
    parser = build_parser()
    args = parser.parse_args(["serve"])
    monkeypatch.setenv("FLEETNAV_VERBOSE", "true")
    s = resolve_settings(args, {"verbose": False})
    assert s["verbose"] is True
    monkeypatch.setenv("FLEETNAV_VERBOSE", "0")
    s = resolve_settings(args, {"verbose": False})
    assert s["verbose"] is False


def test_config_file_from_env(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 5}))
    monkeypatch.setenv("FLEETNAV_CONFIG", str(cfg))
    parser = build_parser()
    args = parser.parse_args(["gen-env"])
    s = resolve_settings(args, {"count": 1})
    assert s["count"] == 5


def test_sim_config_dict_roundtrip():
    base = SimConfig()
    doc = dataclasses.asdict(base)
    assert sim_config_from_dict(doc) == base
    # partial documents override only what they name
    tweaked = sim_config_from_dict({"max_steps": 77})
    assert tweaked.max_steps == 77
    assert tweaked.camera == base.camera


def test_gen_config_dict_lists_become_tuples():
    gen = gen_config_from_dict({"room_count_range": [1, 1],
                                "obstacle_count_range": [0, 0]})
    assert gen.room_count_range == (1, 1)
    assert gen.obstacle_count_range == (0, 0)


# ---------------------------------------------------------------------------
# gen-env


def test_gen_env_writes_layouts_index_manifest(tmp_path):
    out = tmp_path / "layouts"
    assert run_cli(["gen-env", "--count", "3", "--seed", "21",
                    "--outdir", str(out)]) == 0
    index = read_json(out / "index.json")
    assert len(index["layouts"]) == 3
    for entry in index["layouts"]:
        layout = load_layout(str(out / entry["file"]))
        assert layout.seed == entry["seed"]
        assert len(layout.obstacles) == entry["obstacles"]
    manifest = read_json(out / "run_manifest.json")
    assert manifest["command"] == "gen-env"
    assert manifest["settings"]["count"] == 3
    assert manifest["seeds"] == {"seed": 21}
    assert "build" in manifest and "created_ms" in manifest


def test_gen_env_respects_gen_config_file(tmp_path):
    gen_path = tmp_path / "gen.json"
    gen_path.write_text(json.dumps({"room_count_range": [1, 1],
                                    "obstacle_count_range": [0, 0],
                                    "room_size_range": [4.0, 5.0]}))
    out = tmp_path / "empty-rooms"
    assert run_cli(["gen-env", "--count", "2", "--seed", "400",
                    "--gen-config", str(gen_path), "--outdir", str(out)]) == 0
    for entry in read_json(out / "index.json")["layouts"]:
        layout = load_layout(str(out / entry["file"]))
        assert len(layout.rooms) == 1
        assert len(layout.obstacles) == 0


# ---------------------------------------------------------------------------
# pretrain / eval / bc-train artifacts


PRETRAIN_ARGS = ["--episodes", "6", "--seed", "5", "--layouts", "2",
                 "--warmup", "40", "--hidden", "16"]


@pytest.fixture(scope="module")
def pretrain_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-pretrain")
    dirs = [root / "a", root / "b"]
    for d in dirs:
        assert main(["pretrain", *PRETRAIN_ARGS, "--outdir", str(d)]) == 0
    return dirs


def test_pretrain_is_deterministic_across_runs(pretrain_dirs):
    a, b = pretrain_dirs
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "policy.bin").read_bytes() == (b / "policy.bin").read_bytes()


def test_pretrain_artifacts(pretrain_dirs):
    out = pretrain_dirs[0]
    result = read_json(out / "result.json")
    assert result["episodes"] == 6
    assert result["stop_reason"] == "budget"
    assert result["env_steps"] > 0
    assert len(result["policy_content_hash"]) == 64
    assert (out / "learner-state" / "learner.json").exists()
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert "episode" in header and "," in header


def test_eval_writes_report_and_table(pretrain_dirs, tmp_path, capsys):
    out = tmp_path / "eval"
    code = run_cli(["eval", "--policy", str(pretrain_dirs[0] / "policy.bin"),
                    "--suite", "empty", "--suite-size", "2", "--trials", "1",
                    "--outdir", str(out)])
    assert code == 0
    report = read_json(out / "report.json")
    assert set(report) >= {"success_rate", "goal_distance", "collision_rate",
                           "episode_count", "per_layout"}
    assert report["episode_count"] == 2
    table = (out / "table.txt").read_text()
    assert "SR↑" in table and "GD↓" in table and "CR↓" in table
    assert table == capsys.readouterr().out  # table is also printed


def test_eval_unknown_suite_exits_1(pretrain_dirs, tmp_path):
    code = run_cli(["eval", "--policy", str(pretrain_dirs[0] / "policy.bin"),
                    "--suite", "nope", "--outdir", str(tmp_path / "x")])
    assert code == 1


def test_bc_train_artifacts(tmp_path):
    out = tmp_path / "bc"
    assert run_cli(["bc-train", "--demos", "4", "--epochs", "3",
                    "--outdir", str(out)]) == 0
    result = read_json(out / "result.json")
    assert result["transitions"] > 0
    assert result["final_loss"] < result["first_loss"]
    assert (out / "policy.bin").exists()


# ---------------------------------------------------------------------------
# train-online (in-process mode)


def test_train_online_inprocess_artifacts(tmp_path):
    out = tmp_path / "online"
    code = run_cli(["train-online", "--episodes", "4", "--workers", "1",
                    "--publish-every", "2", "--open-target", "2",
                    "--warmup", "30", "--hidden", "16", "--layouts", "2",
                    "--outdir", str(out)])
    assert code == 0
    result = read_json(out / "result.json")
    assert result["episodes"] >= 4
    assert len(result["publishes"]) >= 2   # initial publish + at least one more
    assert result["stop_reason"] == "budget"
    data = np.load(out / "buffer.npz")
    assert data["obs"].shape[0] == result["env_steps"]
    assert (out / "policy.bin").exists()
    assert (out / "learner-state").is_dir()
    manifest = read_json(out / "run_manifest.json")
    assert manifest["command"] == "train-online"
    assert manifest["settings"]["distributed"] in (False, None)
