"""``srp`` command line: pipeline stages and the end-to-end semantic robot programming run.

Exit codes: 0 success, 1 goal unsatisfied or unsolvable, 2 configuration error,
3 failure inside a pipeline stage. Logs go to stderr, artifacts to files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomli

from .bench import BenchConfig, Thresholds, run_suite
from .detect import NoiseConfig, detect_synthetic, load_detections, save_detections
from .digest import FilterConfig, digest, estimate_to_dict, load_estimate
from .geometry import CameraIntrinsics, Pose, read_pgm, write_pgm
from .models import RegistryError, load_registry
from .plan import (DEFAULT_MAX_STATES, PlannerLimit, emit_pddl, execute_plan, grounded_state, goal_atoms,
                   plan_bfs, save_plan, validate)
from .pipeline import StageError, run_srp
from .render import render_depth
from .scene import DEFAULT_TABLE_HEIGHT, GroundTruthScene, PlacedObject
from .scenegraph import SceneGraph, derive_scene_graph

log = logging.getLogger("srp")

EXIT_OK, EXIT_UNSATISFIED, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    registry: str = "builtin"
    out_dir: str = "."
    seed: int | None = None
    threads: int | None = None  # None: hardware count
    scale: float = 0.25
    table_bounds: tuple[float, float, float, float] = (-0.3, 0.3, -0.25, 0.25)
    max_states: int = DEFAULT_MAX_STATES
    placement_tries: int = 2000
    max_hypotheses: int | None = None
    filter: FilterConfig = field(default_factory=FilterConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    bench: dict = field(default_factory=lambda: {"n_scenes": 10, "n_objects": 1, "stacking_prob": 0.0,
                                                 "models": None})


_SECTIONS = {"filter": FilterConfig, "noise": NoiseConfig}


def _coerce(value: str) -> Any:
    try:
        return tomli.loads(f"v = {value}")["v"]
    except tomli.TOMLDecodeError:
        return value


def load_config(path: str | None, overrides: list[str] = ()) -> RunConfig:
    """TOML file (optional) plus ``key=value`` / ``section.key=value`` overrides."""
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = tomli.loads(p.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        *sections, leaf = key.strip().split(".")
        d = doc
        for s in sections:
            d = d.setdefault(s, {})
        d[leaf] = _coerce(value.strip())
    return _build_config(doc)


def _build_config(doc: dict) -> RunConfig:
    cfg = RunConfig()
    top = {f.name for f in dataclasses.fields(RunConfig)} - {"filter", "noise", "thresholds", "bench"}
    try:
        for key, value in doc.items():
            if key in _SECTIONS:
                known = {f.name for f in dataclasses.fields(_SECTIONS[key])}
                unknown = set(value) - known
                if unknown:
                    raise ConfigError(f"unknown [{key}] field(s): {sorted(unknown)}")
                setattr(cfg, key, _SECTIONS[key](**value))
            elif key == "thresholds":
                unknown = set(value) - {"dt_cm", "dtheta_deg"}
                if unknown:
                    raise ConfigError(f"unknown [thresholds] field(s): {sorted(unknown)}")
                cfg.thresholds = Thresholds(
                    tuple(np.asarray(value.get("dt_cm", [1, 2, 4, 6]), float) / 100),
                    tuple(np.radians(value.get("dtheta_deg", [5, 10, 15, 30]))))
            elif key == "bench":
                unknown = set(value) - set(cfg.bench)
                if unknown:
                    raise ConfigError(f"unknown [bench] field(s): {sorted(unknown)}")
                cfg.bench.update(value)
            elif key in top:
                setattr(cfg, key, tuple(value) if key == "table_bounds" else value)
            else:
                raise ConfigError(f"unknown config field {key!r}")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if cfg.registry != "builtin" and not Path(cfg.registry).exists():
        raise ConfigError(f"registry path does not exist: {cfg.registry}")
    return cfg


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _registry(cfg: RunConfig):
    try:
        return load_registry(cfg.registry)
    except RegistryError as exc:
        raise ConfigError(str(exc)) from None


def _need_seed(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else cfg.seed
    if seed is None:
        raise ConfigError("--seed is required for this command")
    return int(seed)


def _threads(args, cfg: RunConfig) -> int | None:
    return args.threads if args.threads is not None else cfg.threads


def _load_scene(path) -> GroundTruthScene:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"scene file not found: {path}")
    try:
        return GroundTruthScene.load(p)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed scene ({exc})") from None


def _load_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {path}")
    return json.loads(p.read_text())


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _proximity(items) -> list[tuple[str, str, str]]:
    out = []
    for item in items or ():
        parts = item.split(":")
        if len(parts) != 3:
            raise ConfigError(f"--proximity expects parent:region:child, got {item!r}")
        out.append(tuple(parts))
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_render(args, cfg: RunConfig) -> int:
    scene = _load_scene(args.scene)
    depth = render_depth(scene.instance(), scene.intrinsics, _registry(cfg))
    write_pgm(args.out, depth)
    log.info("wrote %s (%dx%d)", args.out, depth.width, depth.height)
    return EXIT_OK


def cmd_detect(args, cfg: RunConfig) -> int:
    seed = _need_seed(args, cfg)
    scene = _load_scene(args.scene)
    dets = detect_synthetic(scene, _registry(cfg), cfg.noise, seed)
    save_detections(args.out, dets)
    log.info("wrote %d detection(s) to %s", len(dets), args.out)
    return EXIT_OK


def cmd_estimate(args, cfg: RunConfig) -> int:
    seed = _need_seed(args, cfg)
    cam_doc = _load_json(args.camera)
    try:
        intr = CameraIntrinsics.from_dict(cam_doc["camera"]["intrinsics"])
        extr = Pose.from_dict(cam_doc["camera"]["extrinsic"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.camera}: no usable camera block ({exc})") from None
    n = args.n_objects if args.n_objects is not None else len(cam_doc.get("objects", []))
    if n < 1:
        raise ConfigError("--n-objects is required (the camera file lists no objects)")
    depth = read_pgm(args.depth)
    dets = load_detections(args.detections)
    res = digest(depth, dets, n, intr, extr, _registry(cfg), cfg.filter, seed, _threads(args, cfg),
                 cfg.max_hypotheses)
    doc = estimate_to_dict(res, cam_doc.get("scene_id", "scene"))
    doc["table_height"] = float(cam_doc.get("table_height", DEFAULT_TABLE_HEIGHT))
    _write_json(args.out, doc)
    if res.size_mismatch:
        log.warning("fewer candidates than objects: hypotheses are partial")
    log.info("best hypothesis %d, log-likelihood %.4f", res.best.hyp_index, res.best.log_likelihood)
    return EXIT_OK


def cmd_graph(args, cfg: RunConfig) -> int:
    registry = _registry(cfg)
    if (args.scene is None) == (args.estimate is None):
        raise ConfigError("give exactly one of --scene or --estimate")
    if args.scene is not None:
        scene = _load_scene(args.scene)
        world, th = scene.poses(), scene.table_height
        prox = _proximity(args.proximity) or list(scene.proximity)
    else:
        _load_json(args.estimate)
        _, world = load_estimate(args.estimate)
        th = float(_load_json(args.estimate).get("table_height", DEFAULT_TABLE_HEIGHT))
        prox = _proximity(args.proximity)
    if args.table_height is not None:
        th = args.table_height
    g = derive_scene_graph(world, registry, th, prox)
    g.save(args.out)
    log.info("wrote %d axiom(s) to %s", len(g.axioms), args.out)
    return EXIT_OK


def cmd_plan(args, cfg: RunConfig) -> int:
    registry = _registry(cfg)
    try:
        init = SceneGraph.from_dict(_load_json(args.init))
        goal = SceneGraph.from_dict(_load_json(args.goal))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed scene graph ({exc})") from None
    domain, problem = emit_pddl(init, goal, registry)
    if args.pddl_dir:
        d = Path(args.pddl_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "domain.pddl").write_text(domain)
        (d / "problem.pddl").write_text(problem)
    state, want = grounded_state(init, goal, registry), goal_atoms(goal)
    max_states = args.max_states if args.max_states is not None else cfg.max_states
    result = plan_bfs(state, want, max_states=max_states)
    if result.plan is None:
        _write_json(args.out, {"solvable": False, "actions": []})
        log.error("goal is unreachable (%d states expanded)", result.expanded)
        return EXIT_UNSATISFIED
    verdict = validate(result.plan, state, want)
    seed = _need_seed(args, cfg)
    _, steps = execute_plan(result.plan, init.instances, registry, init.table_height, cfg.table_bounds,
                            {**init.regions, **goal.regions}, seed, cfg.placement_tries)
    save_plan(args.out, steps, verdict)
    log.info("plan with %d action(s) written to %s", len(result.plan), args.out)
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    seed = _need_seed(args, cfg)
    b = cfg.bench
    models = tuple(b["models"]) if b.get("models") else None
    bc = BenchConfig(n_scenes=int(b["n_scenes"]), n_objects=int(b["n_objects"]),
                     stacking_prob=float(b["stacking_prob"]), models=models, registry=cfg.registry,
                     scale=cfg.scale, max_hypotheses=cfg.max_hypotheses, filter=cfg.filter, noise=cfg.noise,
                     thresholds=cfg.thresholds)
    out = Path(args.out_dir or cfg.out_dir)
    report, _ = run_suite(bc, seed, out, _threads(args, cfg))
    log.info("accuracy grid written to %s", out / "accuracy.csv")
    return EXIT_OK


def _scene_from_world(template: GroundTruthScene, world, scene_id: str) -> GroundTruthScene:
    return template.with_objects([PlacedObject(i, m, p) for i, (m, p) in sorted(world.items())],
                                 scene_id=scene_id)


def cmd_run(args, cfg: RunConfig) -> int:
    seed = _need_seed(args, cfg)
    registry = _registry(cfg)
    initial, goal = _load_scene(args.initial), _load_scene(args.goal)
    out = Path(args.out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    o = run_srp(initial, goal, registry, cfg.filter, cfg.noise, seed, _threads(args, cfg),
                args.bypass_estimation, cfg.max_states, cfg.placement_tries, cfg.max_hypotheses)
    for tag, per, scene in (("goal", o.goal, goal), ("initial", o.initial, initial)):
        if per.depth is not None:
            write_pgm(out / f"{tag}_depth.pgm", per.depth)
            save_detections(out / f"{tag}_detections.json", per.detections)
            doc = estimate_to_dict(per.result, scene.scene_id)
            doc["table_height"] = scene.table_height
            _write_json(out / f"{tag}_estimate.json", doc)
        else:
            _scene_from_world(scene, per.world, scene.scene_id).save(out / f"{tag}_estimate_scene.json")
    o.goal_graph.save(out / "goal_graph.json")
    o.initial_graph.save(out / "initial_graph.json")
    (out / "domain.pddl").write_text(o.domain)
    (out / "problem.pddl").write_text(o.problem)
    if o.result.plan is None:
        _write_json(out / "plan.json", {"solvable": False, "actions": []})
    else:
        save_plan(out / "plan.json", o.steps, o.validation)
        _scene_from_world(initial, o.final_world, "final").save(out / "final_scene.json")
        o.final_graph.save(out / "final_graph.json")
    verdict = {
        "verdict": "yes" if o.verdict else "no",
        "solvable": o.result.plan is not None,
        "plan_length": None if o.result.plan is None else len(o.result.plan),
        "missing_goal_axioms": [f"{a}" for a in o.missing],
    }
    _write_json(out / "verdict.json", verdict)
    log.info("verdict: %s", verdict["verdict"])
    return EXIT_OK if o.verdict else EXIT_UNSATISFIED


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. filter.lambda_r=60 (repeatable)")
    common.add_argument("--registry", help="model registry: 'builtin', a directory or registry.json")
    common.add_argument("--seed", type=int, help="random seed (required for stochastic commands)")
    common.add_argument("--threads", type=int, help="worker threads (default: hardware count)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="srp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("render", parents=[common], help="render a scene to a 16-bit depth PGM")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("detect", parents=[common], help="oracle detections for a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("estimate", parents=[common], help="estimate object poses from depth and detections")
    s.add_argument("--depth", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--camera", required=True, help="JSON file with a 'camera' block (e.g. a scene file)")
    s.add_argument("--n-objects", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("graph", parents=[common], help="derive a scene graph")
    s.add_argument("--scene")
    s.add_argument("--estimate")
    s.add_argument("--table-height", type=float)
    s.add_argument("--proximity", action="append", metavar="PARENT:REGION:CHILD")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("plan", parents=[common], help="plan from an initial to a goal scene graph")
    s.add_argument("--init", required=True)
    s.add_argument("--goal", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pddl-dir")
    s.add_argument("--max-states", type=int)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("bench", parents=[common], help="pose-accuracy benchmark on generated scenes")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("run", parents=[common], help="end-to-end run on a goal and an initial scene")
    s.add_argument("--initial", required=True)
    s.add_argument("--goal", required=True)
    s.add_argument("--out-dir")
    s.add_argument("--bypass-estimation", action="store_true", help="use ground-truth poses")
    s.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = list(args.set)
        if args.registry:
            overrides.append(f'registry="{args.registry}"')
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    except PlannerLimit as exc:
        log.error("stage 'plan' failed: %s", exc)
        return EXIT_STAGE
    except Exception as exc:  # noqa: BLE001 - any other stage failure
        log.error("stage '%s' failed: %s: %s", args.command, type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
