"""Command line: generate environments, serve, work, train, and evaluate.

Every subcommand writes a run manifest (command, resolved settings, seeds,
build id) into its output directory before doing any work, so any artifact
on disk can be traced back to the invocation that made it. Settings resolve
as flags > FLEETNAV_* environment variables > --config JSON file > defaults.
Logs are line-oriented JSON on stderr; exit code 2 means bad usage, 1 a
runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import signal
import subprocess
import sys
import threading
import time

from .errors import FatalAuth, FleetNavError, GenerationFailed
from .procgen import GenConfig, generate_layout, save_layout
from .sim import CameraModel, EstimationNoiseConfig, ObsSpec, SimConfig

ENV_PREFIX = "FLEETNAV_"


def _jlog(**fields) -> None:
    doc = {"ts": round(time.time(), 3), **fields}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr, flush=True)


def _build_id() -> str:
    try:
        from importlib.metadata import version

        return "fleetnav-" + version("fleetnav")
    except Exception:
        return "fleetnav-unknown"


# ---------------------------------------------------------------------------
# settings resolution


def _coerce(text: str, like):
    if isinstance(like, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def resolve_settings(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > FLEETNAV_<KEY> env > --config file > defaults."""
    file_cfg = {}
    config_path = getattr(args, "config", None) or os.environ.get(ENV_PREFIX + "CONFIG")
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
    out = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            env = os.environ.get(ENV_PREFIX + key.upper())
            if env is not None and default is not None:
                value = _coerce(env, default)
            elif env is not None:
                value = env
            elif key in file_cfg:
                value = file_cfg[key]
            else:
                value = default
        out[key] = value
    return out


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def sim_config_from_dict(doc: dict) -> SimConfig:
    doc = dict(doc)
    camera = CameraModel(**doc.pop("camera", {}))
    estimation = EstimationNoiseConfig(**doc.pop("estimation", {}))
    obs = ObsSpec(**doc.pop("obs", {}))
    return SimConfig(camera=camera, estimation=estimation, obs=obs, **doc)


def gen_config_from_dict(doc: dict) -> GenConfig:
    doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    return GenConfig(**doc)


def _sim_config(settings: dict) -> SimConfig:
    path = settings.get("sim_config")
    return sim_config_from_dict(_load_json(path)) if path else SimConfig()


def _gen_config(settings: dict) -> GenConfig:
    path = settings.get("gen_config")
    return gen_config_from_dict(_load_json(path)) if path else GenConfig()


def _layout_pool(gen: GenConfig, base: int, count: int) -> list:
    """Scan seeds upward from base, skipping over-constrained ones."""
    pool, seed = [], base
    while len(pool) < count:
        try:
            pool.append(generate_layout(gen, seed))
        except GenerationFailed:
            pass
        seed += 1
        if seed - base > 50 * count + 200:
            raise GenerationFailed(
                f"could not find {count} viable layouts from seed {base}")
    return pool


def write_manifest(outdir: str, command: str, settings: dict, seeds: dict) -> str:
    """Must run before any real work: artifacts trace back to this file."""
    os.makedirs(outdir, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "settings": {k: v for k, v in settings.items()},
        "seeds": seeds,
        "build": _build_id(),
        "outdir": os.path.abspath(outdir),
        "created_ms": int(time.time() * 1000),
    }
    path = os.path.join(outdir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_env(args) -> int:
    defaults = {"count": 20, "seed": 0, "outdir": "./layouts",
                "gen_config": None}
    s = resolve_settings(args, defaults)
    write_manifest(s["outdir"], "gen-env", s, {"seed": s["seed"]})
    gen = _gen_config(s)
    index = []
    for layout in _layout_pool(gen, s["seed"], s["count"]):
        name = f"layout-{layout.seed}.json"
        save_layout(layout, os.path.join(s["outdir"], name))
        index.append({"seed": layout.seed, "file": name,
                      "rooms": len(layout.rooms), "obstacles": len(layout.obstacles)})
    _write_json(os.path.join(s["outdir"], "index.json"),
                {"gen_config": dataclasses.asdict(gen), "layouts": index})
    _jlog(event="gen_env_done", count=s["count"], outdir=s["outdir"])
    return 0


def cmd_serve(args) -> int:
    from .server import FleetServer, FleetStore

    defaults = {"data": "./fleet-data", "host": "127.0.0.1", "port": 8080,
                "lease_ms": 600_000, "verbose": False, "outdir": None}
    s = resolve_settings(args, defaults)
    outdir = s["outdir"] or s["data"]
    write_manifest(outdir, "serve", s, {})
    store = FleetStore(s["data"], lease_ms=s["lease_ms"])
    for pair in args.account or []:
        user, _, password = pair.partition(":")
        if not user or not password:
            _jlog(level="error", event="bad_account", detail="want user:pass")
            return 1
        store.create_account(user, password, replace=True)
    server = FleetServer(store, host=s["host"], port=s["port"],
                         verbose=s["verbose"])
    server.start()
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    _jlog(event="serving", url=server.url, data=os.path.abspath(s["data"]))
    try:
        stop.wait()
    finally:
        _jlog(event="stopping")
        server.stop()
    return 0


def _worker_log(level, msg, **fields):
    _jlog(level=level, event=msg, **fields)


def cmd_worker(args) -> int:
    from .worker import Worker, WorkerConfig

    defaults = {"server": "http://127.0.0.1:8080", "user": None,
                "pass_file": None, "slots": 1, "once": False, "seed": None,
                "poll_interval": 2.0, "sim_config": None, "gen_config": None,
                "outdir": "."}
    s = resolve_settings(args, defaults)
    if not s["user"]:
        _jlog(level="error", event="usage", detail="--user is required")
        return 2
    if s["pass_file"]:
        with open(s["pass_file"], "r", encoding="utf-8") as fh:
            password = fh.read().strip()
    else:
        password = os.environ.get(ENV_PREFIX + "PASSWORD")
    if not password:
        _jlog(level="error", event="usage",
              detail="need --pass-file or FLEETNAV_PASSWORD")
        return 2
    write_manifest(s["outdir"], "worker", {**s, "pass_file": bool(s["pass_file"])},
                   {"seed": s["seed"]})
    config = WorkerConfig(
        server=s["server"], username=s["user"], password=password,
        sim_config=_sim_config(s), gen_config=_gen_config(s),
        slots=s["slots"], once=s["once"], seed=s["seed"],
        poll_interval_s=s["poll_interval"])
    worker = Worker(config, log_fn=_worker_log)
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: worker.stop())
    try:
        return worker.run()
    except FatalAuth as exc:
        _jlog(level="error", event="fatal_auth", detail=str(exc))
        return 1


def cmd_pretrain(args) -> int:
    from .learner import SacConfig, pretrain
    from .policy import serialize_snapshot

    defaults = {"episodes": 2000, "seed": 0, "layouts": 72,
                "layout_base": 50_000, "outdir": "./pretrain-run",
                "sim_config": None, "gen_config": None, "hidden": 256,
                "warmup": 1000}
    s = resolve_settings(args, defaults)
    write_manifest(s["outdir"], "pretrain", s,
                   {"seed": s["seed"], "layout_base": s["layout_base"]})
    sim = _sim_config(s)
    gen = _gen_config(s)
    pool = _layout_pool(gen, s["layout_base"], s["layouts"])
    sac_cfg = SacConfig(hidden=(s["hidden"], s["hidden"]), warmup_steps=s["warmup"])
    t0 = time.monotonic()
    result = pretrain(pool, sim, sac_cfg=sac_cfg, max_episodes=s["episodes"],
                      seed=s["seed"],
                      diag_path=os.path.join(s["outdir"], "metrics.csv"))
    snap = result.learner.snapshot(result.episodes, sim.obs)
    with open(os.path.join(s["outdir"], "policy.bin"), "wb") as fh:
        fh.write(serialize_snapshot(snap))
    result.learner.save_state(os.path.join(s["outdir"], "learner-state"))
    recent = result.successes[-100:]
    _write_json(os.path.join(s["outdir"], "result.json"), {
        "episodes": result.episodes, "env_steps": result.env_steps,
        "updates": result.updates, "stop_reason": result.stop_reason,
        "recent_success_rate": round(100.0 * sum(recent) / max(1, len(recent)), 2),
        "policy_content_hash": snap.content_hash,
        "wall_seconds": round(time.monotonic() - t0, 3),
    })
    _jlog(event="pretrain_done", episodes=result.episodes,
          env_steps=result.env_steps, outdir=s["outdir"])
    return 0


def _eval_suite(settings: dict) -> list:
    from .evaluation import suite_blocked_line, suite_empty, suite_light_clutter

    builders = {"empty": suite_empty, "light-clutter": suite_light_clutter,
                "blocked-line": suite_blocked_line}
    name = settings["suite"]
    if name not in builders:
        raise FleetNavError(
            f"unknown suite {name!r}; choose from {sorted(builders)}")
    return builders[name](settings["suite_size"], seed_base=settings["suite_base"])


def cmd_eval(args) -> int:
    from .evaluation import eval_config, render_table, run_suite
    from .policy import deserialize_snapshot

    defaults = {"policy": None, "suite": "empty", "suite_size": 20,
                "suite_base": 500, "trials": 10, "seed": 7,
                "sim_config": None, "outdir": "./eval-run"}
    s = resolve_settings(args, defaults)
    if not s["policy"]:
        _jlog(level="error", event="usage", detail="--policy is required")
        return 2
    write_manifest(s["outdir"], "eval", s, {"seed": s["seed"]})
    with open(s["policy"], "rb") as fh:
        snap = deserialize_snapshot(fh.read())
    suite = _eval_suite(s)
    config = eval_config(_sim_config(s))
    report = run_suite(snap, suite, config, trials=s["trials"], seed=s["seed"])
    _write_json(os.path.join(s["outdir"], "report.json"), report.to_dict())
    table = render_table({f"{os.path.basename(s['policy'])}@{s['suite']}": report})
    with open(os.path.join(s["outdir"], "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    _jlog(event="eval_done", suite=s["suite"], success_rate=report.success_rate,
          goal_distance=report.goal_distance, collision_rate=report.collision_rate)
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import (ablation_layout_count, eval_config, render_table,
                             sr_trend)
    from .learner import SacConfig

    defaults = {"sizes": "1,6,72", "budget": 500, "seed": 0, "trials": 10,
                "eval_size": 20, "eval_base": 900_000, "hidden": 256,
                "warmup": 1000, "sim_config": None, "gen_config": None,
                "outdir": "./ablate-run"}
    s = resolve_settings(args, defaults)
    write_manifest(s["outdir"], "ablate", s, {"seed": s["seed"]})
    sizes = [int(x) for x in str(s["sizes"]).split(",") if x.strip()]
    sim = eval_config(_sim_config(s))
    gen = _gen_config(s)
    eval_suite = _layout_pool(gen, s["eval_base"], s["eval_size"])
    sac_cfg = SacConfig(hidden=(s["hidden"], s["hidden"]), warmup_steps=s["warmup"])

    def on_size(size, report):
        _jlog(event="ablation_size_done", pool_size=size,
              success_rate=report.success_rate)

    results = ablation_layout_count(
        sizes, gen_config=gen, sim_config=sim, eval_suite=eval_suite,
        budget_episodes=s["budget"], seed=s["seed"], trials=s["trials"],
        sac_cfg=sac_cfg, on_size=on_size)
    trend = sr_trend(results)
    _write_json(os.path.join(s["outdir"], "ablation.json"), {
        "results": [{"pool_size": r["pool_size"],
                     "report": r["report"].to_dict()} for r in results],
        "trend": trend,
    })
    table = render_table({f"pool={r['pool_size']}": r["report"] for r in results})
    with open(os.path.join(s["outdir"], "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    _jlog(event="ablate_done", trend=trend)
    return 0


def cmd_bc_train(args) -> int:
    from .evaluation import eval_config, suite_empty, suite_light_clutter
    from .expert import collect_expert_dataset
    from .learner import BcConfig, BcLearner
    from .policy import serialize_snapshot

    defaults = {"demos": 200, "seed": 41, "epochs": 50,
                "demo_base": 4000, "sim_config": None, "outdir": "./bc-run"}
    s = resolve_settings(args, defaults)
    write_manifest(s["outdir"], "bc-train", s, {"seed": s["seed"]})
    sim = eval_config(_sim_config(s))
    demo_layouts = (suite_empty(10, seed_base=s["demo_base"])
                    + suite_light_clutter(10, seed_base=s["demo_base"] + 100))
    X, Y, logs = collect_expert_dataset(demo_layouts, sim, episodes=s["demos"],
                                        seed=s["seed"])
    bc = BcLearner(X.shape[1], cfg=BcConfig(epochs=s["epochs"]), seed=s["seed"])
    losses = bc.fit(X, Y, log_every=10,
                    log_fn=lambda e, l: _jlog(event="bc_epoch", epoch=e,
                                              loss=round(l, 6)))
    snap = bc.snapshot(policy_id=1, obs_spec=sim.obs)
    with open(os.path.join(s["outdir"], "policy.bin"), "wb") as fh:
        fh.write(serialize_snapshot(snap))
    _write_json(os.path.join(s["outdir"], "result.json"), {
        "demos_collected": len(logs), "transitions": int(X.shape[0]),
        "first_loss": losses[0], "final_loss": losses[-1],
        "policy_content_hash": snap.content_hash,
    })
    _jlog(event="bc_train_done", transitions=int(X.shape[0]),
          final_loss=losses[-1], outdir=s["outdir"])
    return 0


# ---------------------------------------------------------------------------
# train-online


def _online_defaults() -> dict:
    return {"episodes": 200, "workers": 2, "publish_every": 50,
            "open_target": 8, "seed": 0, "port": 0, "distributed": False,
            "layouts": 20, "layout_base": 100, "success_window": 0,
            "finetune_layout": None, "init_state": None, "hidden": 256,
            "warmup": 1000, "sim_config": None, "gen_config": None,
            "outdir": "./train-online-run"}


def _make_learner(settings: dict, sim: SimConfig):
    from .learner import SacConfig, SacLearner

    cfg = SacConfig(hidden=(settings["hidden"], settings["hidden"]),
                    warmup_steps=settings["warmup"])
    learner = SacLearner(sim.obs.input_width, cfg=cfg, seed=settings["seed"])
    if settings["init_state"]:
        learner.restore_state(settings["init_state"])
    return learner


def _finish_online(settings: dict, sim, learner, service, result, t0) -> None:
    from .policy import serialize_snapshot

    outdir = settings["outdir"]
    service.buffer.save(os.path.join(outdir, "buffer.npz"))
    learner.save_state(os.path.join(outdir, "learner-state"))
    snap = learner.snapshot(result.publishes[-1] if result.publishes else 0,
                            sim.obs)
    with open(os.path.join(outdir, "policy.bin"), "wb") as fh:
        fh.write(serialize_snapshot(snap))
    _write_json(os.path.join(outdir, "result.json"), {
        "episodes": result.episodes, "env_steps": result.env_steps,
        "updates": result.updates, "publishes": result.publishes,
        "stop_reason": result.stop_reason,
        "successes": sum(result.successes),
        "ingested": result.ingested,
        "wall_seconds": round(time.monotonic() - t0, 3),
    })
    _jlog(event="train_online_done", episodes=result.episodes,
          publishes=len(result.publishes), wall_seconds=round(time.monotonic() - t0, 1))


def _layout_seed_pool(settings: dict) -> list:
    if settings["finetune_layout"] is not None:
        return [int(settings["finetune_layout"])]
    pool = _layout_pool(_gen_config(settings), settings["layout_base"],
                        settings["layouts"])
    return [layout.seed for layout in pool]


def _online_cfg(settings: dict):
    from .learner import OnlineConfig

    return OnlineConfig(max_episodes=settings["episodes"],
                        publish_every=settings["publish_every"],
                        open_target=settings["open_target"],
                        success_window=settings["success_window"])


def _train_online_inprocess(settings: dict) -> int:
    from .client import FleetClient
    from .learner import LearnerService
    from .server import FleetServer, FleetStore
    from .worker import Worker, WorkerConfig

    sim = _sim_config(settings)
    gen = _gen_config(settings)
    outdir = settings["outdir"]
    store = FleetStore(os.path.join(outdir, "server-data"))
    store.create_account("learner", "learner-pw")
    names = [f"w{i}" for i in range(settings["workers"])]
    for name in names:
        store.create_account(name, name + "-pw")
    server = FleetServer(store, port=settings["port"])
    server.start()
    _jlog(event="serving", url=server.url, mode="in-process")
    t0 = time.monotonic()
    workers, threads = [], []
    try:
        for i, name in enumerate(names):
            wc = WorkerConfig(server=server.url, username=name,
                              password=name + "-pw", sim_config=sim,
                              gen_config=gen, poll_interval_s=0.2,
                              backoff_base_s=0.2,
                              seed=settings["seed"] * 1000 + i)
            worker = Worker(wc, log_fn=_worker_log)
            workers.append(worker)
            thread = threading.Thread(target=worker.run, daemon=True,
                                      name=f"worker-{name}")
            threads.append(thread)
            thread.start()

        def stop_workers():
            for worker in workers:
                worker.stop()
            for thread in threads:
                thread.join(timeout=30)

        client = FleetClient(server.url)
        client.login("learner", "learner-pw")
        learner = _make_learner(settings, sim)
        service = LearnerService(client, learner, sim.obs,
                                 layout_seeds=_layout_seed_pool(settings),
                                 cfg=_online_cfg(settings),
                                 log_fn=lambda **kw: _jlog(**kw))
        result = service.run(stop_workers=stop_workers)
        _finish_online(settings, sim, learner, service, result, t0)
        return 0
    finally:
        server.stop()


def _pump_stderr(proc, prefix: str, ready: dict, ready_event) -> None:
    for raw in proc.stderr:
        line = raw.decode("utf-8", "replace").rstrip()
        if not line:
            continue
        print(f"[{prefix}] {line}", file=sys.stderr, flush=True)
        if not ready_event.is_set():
            try:
                doc = json.loads(line)
            except ValueError:
                continue
            if doc.get("event") == "serving":
                ready["url"] = doc.get("url")
                ready_event.set()


def _terminate(procs, grace_s: float) -> None:
    for proc in procs:
        if proc.poll() is None:
            proc.terminate()
    deadline = time.monotonic() + grace_s
    for proc in procs:
        remaining = max(0.1, deadline - time.monotonic())
        try:
            proc.wait(timeout=remaining)
        except subprocess.TimeoutExpired:
            _jlog(level="warn", event="kill", pid=proc.pid)
            proc.kill()
            proc.wait(timeout=5)


def _train_online_distributed(settings: dict) -> int:
    from .client import FleetClient
    from .learner import LearnerService

    sim = _sim_config(settings)
    outdir = settings["outdir"]
    names = [f"w{i}" for i in range(settings["workers"])]
    sim_path = os.path.join(outdir, "sim-config.json")
    _write_json(sim_path, dataclasses.asdict(sim))
    gen_path = os.path.join(outdir, "gen-config.json")
    _write_json(gen_path, dataclasses.asdict(_gen_config(settings)))

    cmd = [sys.executable, "-m", "fleetnav.cli", "serve",
           "--data", os.path.join(outdir, "server-data"),
           "--port", str(settings["port"]), "--host", "127.0.0.1",
           "--outdir", os.path.join(outdir, "serve-run"),
           "--account", "learner:learner-pw"]
    for name in names:
        cmd += ["--account", f"{name}:{name}-pw"]
    server_proc = subprocess.Popen(cmd, stderr=subprocess.PIPE)
    procs = [server_proc]
    t0 = time.monotonic()
    try:
        ready, ready_event = {}, threading.Event()
        threading.Thread(target=_pump_stderr,
                         args=(server_proc, "serve", ready, ready_event),
                         daemon=True).start()
        if not ready_event.wait(timeout=30) or not ready.get("url"):
            raise FleetNavError("server did not come up within 30 s")
        url = ready["url"]

        worker_procs = []
        for i, name in enumerate(names):
            pass_path = os.path.join(outdir, f"{name}.pass")
            with open(pass_path, "w", encoding="utf-8") as fh:
                fh.write(name + "-pw\n")
            os.chmod(pass_path, 0o600)
            wcmd = [sys.executable, "-m", "fleetnav.cli", "worker",
                    "--server", url, "--user", name,
                    "--pass-file", pass_path,
                    "--seed", str(settings["seed"] * 1000 + i),
                    "--poll-interval", "0.2",
                    "--sim-config", sim_path, "--gen-config", gen_path,
                    "--outdir", os.path.join(outdir, f"{name}-run")]
            proc = subprocess.Popen(wcmd, stderr=subprocess.PIPE)
            threading.Thread(target=_pump_stderr,
                             args=(proc, name, {}, threading.Event()),
                             daemon=True).start()
            worker_procs.append(proc)
        procs += worker_procs
        _jlog(event="fleet_up", url=url, workers=len(worker_procs))

        def stop_workers():
            _terminate(worker_procs, grace_s=30.0)

        client = FleetClient(url)
        client.login("learner", "learner-pw")
        learner = _make_learner(settings, sim)
        service = LearnerService(client, learner, sim.obs,
                                 layout_seeds=_layout_seed_pool(settings),
                                 cfg=_online_cfg(settings),
                                 log_fn=lambda **kw: _jlog(**kw))
        result = service.run(stop_workers=stop_workers)
        _finish_online(settings, sim, learner, service, result, t0)
        return 0
    finally:
        _terminate(procs, grace_s=5.0)


def cmd_train_online(args) -> int:
    s = resolve_settings(args, _online_defaults())
    write_manifest(s["outdir"], "train-online", s, {"seed": s["seed"]})
    if s["distributed"]:
        return _train_online_distributed(s)
    return _train_online_inprocess(s)


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON settings file (lowest precedence)")
    p.add_argument("--outdir", help="output directory for artifacts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fleetnav",
        description="Fleet learning for point-goal navigation: simulate, "
                    "coordinate, train, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-env", help="generate procedural layouts to files")
    _add_common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--gen-config", dest="gen_config")
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("serve", help="run the fleet coordination server")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--lease-ms", dest="lease_ms", type=int)
    p.add_argument("--verbose", action="store_const", const=True)
    p.add_argument("--account", action="append",
                   help="user:pass to create at startup (repeatable)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("worker", help="run a headless recording worker")
    _add_common(p)
    p.add_argument("--server")
    p.add_argument("--user")
    p.add_argument("--pass-file", dest="pass_file")
    p.add_argument("--slots", type=int)
    p.add_argument("--once", action="store_const", const=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--poll-interval", dest="poll_interval", type=float)
    p.add_argument("--sim-config", dest="sim_config")
    p.add_argument("--gen-config", dest="gen_config")
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("pretrain", help="train from scratch on procedural layouts")
    _add_common(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--layouts", type=int)
    p.add_argument("--layout-base", dest="layout_base", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--sim-config", dest="sim_config")
    p.add_argument("--gen-config", dest="gen_config")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-online",
                       help="full loop: server + learner + workers")
    _add_common(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--publish-every", dest="publish_every", type=int)
    p.add_argument("--open-target", dest="open_target", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--port", type=int)
    p.add_argument("--distributed", action="store_const", const=True,
                   help="server and workers as separate processes over loopback")
    p.add_argument("--layouts", type=int)
    p.add_argument("--layout-base", dest="layout_base", type=int)
    p.add_argument("--success-window", dest="success_window", type=int)
    p.add_argument("--finetune-layout", dest="finetune_layout", type=int,
                   help="train on this single layout seed (online finetuning)")
    p.add_argument("--init-state", dest="init_state",
                   help="learner-state directory to start from")
    p.add_argument("--hidden", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--sim-config", dest="sim_config")
    p.add_argument("--gen-config", dest="gen_config")
    p.set_defaults(func=cmd_train_online)

    p = sub.add_parser("eval", help="evaluate a policy snapshot on a suite")
    _add_common(p)
    p.add_argument("--policy")
    p.add_argument("--suite")
    p.add_argument("--suite-size", dest="suite_size", type=int)
    p.add_argument("--suite-base", dest="suite_base", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sim-config", dest="sim_config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="layout-count ablation at fixed budget")
    _add_common(p)
    p.add_argument("--sizes")
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--eval-size", dest="eval_size", type=int)
    p.add_argument("--eval-base", dest="eval_base", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--sim-config", dest="sim_config")
    p.add_argument("--gen-config", dest="gen_config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bc-train", help="behavior cloning from scripted demos")
    _add_common(p)
    p.add_argument("--demos", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--demo-base", dest="demo_base", type=int)
    p.add_argument("--sim-config", dest="sim_config")
    p.set_defaults(func=cmd_bc_train)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FleetNavError as exc:
        _jlog(level="error", event="failed", kind=type(exc).__name__,
              detail=str(exc))
        return 1
    except OSError as exc:
        _jlog(level="error", event="failed", kind="os_error", detail=str(exc))
        return 1
    except KeyboardInterrupt:
        _jlog(level="warn", event="interrupted")
        return 1


if __name__ == "__main__":
    sys.exit(main())
