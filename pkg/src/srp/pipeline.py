"""End-to-end semantic robot programming: perceive both scenes, plan, simulate, check."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .detect import Detection, NoiseConfig, detect_synthetic
from .digest import DigestResult, FilterConfig, digest
from .geometry import DepthImage, ModelInfo, Pose
from .pddl import parse_pddl
from .plan import (DEFAULT_MAX_STATES, ExecutionStep, PlanResult, Validation, emit_pddl, execute_plan,
                   plan_bfs, validate)
from .render import render_depth
from .scene import GroundTruthScene
from .scenegraph import SceneGraph, derive_scene_graph

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


@dataclass
class Perception:
    world: dict[str, tuple[str, Pose]]
    depth: DepthImage | None = None
    detections: list[Detection] | None = None
    result: DigestResult | None = None


def perceive(scene: GroundTruthScene, registry: Mapping[str, ModelInfo], cfg: FilterConfig,
             noise: NoiseConfig, seed: int, threads: int | None = 1, bypass: bool = False,
             max_hypotheses: int | None = None) -> Perception:
    """Render the scene, detect and estimate; or return ground truth when ``bypass``."""
    if bypass:
        return Perception(scene.poses())
    depth = _stage("render", render_depth, scene.instance(), scene.intrinsics, registry)
    dets = _stage("detect", detect_synthetic, scene, registry, noise, seed)
    res = _stage("estimate", digest, depth, dets, scene.n_objects, scene.intrinsics, scene.extrinsic,
                 registry, cfg, seed, threads, max_hypotheses)
    best = res.best
    return Perception(dict(zip(best.instance_ids(), zip(best.labels, best.poses))), depth, dets, res)


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, exc) from exc


def translate_proximity(proximity: Sequence[tuple[str, str, str]], scene: GroundTruthScene,
                        world: Mapping[str, tuple[str, Pose]]) -> list[tuple[str, str, str]]:
    """Map scene instance ids to estimated names (k-th instance of a model -> k-th estimate)."""
    def rename(i: str) -> str:
        if i in world:
            return i
        mid = scene.poses()[i][0]
        same = [o.instance_id for o in scene.objects if o.model_id == mid]
        est = sorted((n for n, (m, _) in world.items() if m == mid), key=lambda n: (len(n), n))
        k = same.index(i)
        if k >= len(est):
            raise KeyError(f"proximity instance {i!r} was not perceived")
        return est[k]
    return [(rename(p), r, rename(c)) for p, r, c in proximity]


@dataclass
class SRPOutcome:
    verdict: bool
    initial: Perception
    goal: Perception
    initial_graph: SceneGraph
    goal_graph: SceneGraph
    domain: str
    problem: str
    result: PlanResult
    validation: Validation | None
    steps: list[ExecutionStep] = field(default_factory=list)
    final_world: dict = field(default_factory=dict)
    final_graph: SceneGraph | None = None
    missing: list = field(default_factory=list)


def run_srp(initial: GroundTruthScene, goal: GroundTruthScene, registry: Mapping[str, ModelInfo],
            cfg: FilterConfig = FilterConfig(), noise: NoiseConfig = NoiseConfig(), seed: int = 0,
            threads: int | None = 1, bypass: bool = False, max_states: int = DEFAULT_MAX_STATES,
            placement_tries: int = 2000, max_hypotheses: int | None = None) -> SRPOutcome:
    """Goal demonstration and initial scene in, simulated rearrangement and verdict out.

    The plan is executed on the estimated initial world; the verdict checks that
    every on/in/has relation of the goal graph holds in the re-derived final graph.
    """
    seeds = np.random.SeedSequence(seed).generate_state(3)
    g_per = perceive(goal, registry, cfg, noise, int(seeds[0]), threads, bypass, max_hypotheses)
    i_per = perceive(initial, registry, cfg, noise, int(seeds[1]), threads, bypass, max_hypotheses)
    proximity = list(goal.proximity) or list(initial.proximity)

    def graph(per: Perception, scene: GroundTruthScene) -> SceneGraph:
        prox = translate_proximity(proximity, scene, per.world)
        return derive_scene_graph(per.world, registry, scene.table_height, prox)

    goal_graph = _stage("graph", graph, g_per, goal)
    init_graph = _stage("graph", graph, i_per, initial)
    domain, problem = _stage("pddl", emit_pddl, init_graph, goal_graph, registry)
    dom, prob = _stage("pddl", parse_pddl, domain, problem)
    result = _stage("plan", plan_bfs, prob.state, prob.goal, dom.schemas, max_states)
    if result.plan is None:
        log.warning("goal unreachable from the initial scene graph")
        return SRPOutcome(False, i_per, g_per, init_graph, goal_graph, domain, problem, result, None)
    verdict = validate(result.plan, prob.state, prob.goal, dom.schemas)
    regions = dict(init_graph.regions)
    regions.update(goal_graph.regions)
    final_world, steps = _stage("execute", execute_plan, result.plan, i_per.world, registry,
                                initial.table_height, initial.table_bounds, regions, int(seeds[2]),
                                placement_tries)
    prox = translate_proximity(proximity, initial, final_world)
    final_graph = _stage("graph", derive_scene_graph, final_world, registry, initial.table_height, prox)
    want = {a for a in goal_graph.axioms if a.predicate in ("on", "in", "has")}
    missing = sorted(want - final_graph.axioms)
    return SRPOutcome(verdict.ok and not missing, i_per, g_per, init_graph, goal_graph, domain, problem,
                      result, verdict, steps, final_world, final_graph, missing)
