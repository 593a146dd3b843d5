"""Synthetic tabletop scenes, pose-accuracy evaluation and benchmark suites."""

from __future__ import annotations

import io
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .detect import NoiseConfig, detect_synthetic, visible_objects
from .digest import FilterConfig, digest
from .geometry import CameraIntrinsics, ModelInfo, Pose, pose_error
from .models import TABLE_ID, load_registry
from .plan import GroundedAction, PlacementError, sample_placement
from .render import render_depth
from .scene import DEFAULT_TABLE_HEIGHT, GroundTruthScene, PlacedObject, default_camera
from .scenegraph import SceneGraph, ax, derive_scene_graph

log = logging.getLogger(__name__)

BENCH_BOUNDS = (-0.3, 0.3, -0.25, 0.25)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Thresholds:
    dt_list: tuple[float, ...] = (0.01, 0.02, 0.04, 0.06)  # m
    dtheta_list: tuple[float, ...] = tuple(np.radians([5.0, 10.0, 15.0, 30.0]))  # rad

    def __post_init__(self):
        for name in ("dt_list", "dtheta_list"):
            v = tuple(float(x) for x in getattr(self, name))
            if not v or min(v) <= 0 or any(b <= a for a, b in zip(v, v[1:])):
                raise ValueError(f"{name} must be positive and strictly ascending")
            object.__setattr__(self, name, v)


# --------------------------------------------------------------------------
# scene generation
# --------------------------------------------------------------------------

def _names(labels: Sequence[str]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for label in labels:
        seen[label] = seen.get(label, 0) + 1
        out.append(label if seen[label] == 1 else f"{label}_{seen[label]}")
    return out


def _subseed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**31))


def _intended_graph(relations: Mapping[str, tuple[str, str]], world, table_height: float,
                    proximity: Sequence[tuple[str, str, str]] = (), in_region: Sequence[str] = ()) -> SceneGraph:
    """Axioms the generator meant to build: relations maps child -> (predicate, parent)."""
    axioms = {ax("exist", i) for i in world}
    axioms |= {ax(p, i, parent) for i, (p, parent) in relations.items()}
    parents = {parent for _, parent in relations.values()}
    axioms |= {ax("clear", i) for i in world if i not in parents}
    regions = {}
    for parent, rid, child in proximity:
        g = f"{parent}-{rid}"
        regions[g] = (parent, rid)
        axioms.add(ax("has", parent, g))
        if child in in_region:
            axioms.add(ax("in", g, child))
    return SceneGraph(frozenset(axioms), dict(world), regions, table_height)


def _place(world, mid, name, action_name, target, registry, table_height, bounds, regions, rng):
    args = (name,) if target is None else (name, target)
    return sample_placement(GroundedAction(action_name, args), world, registry, table_height, bounds,
                            regions, seed=_subseed(rng), max_tries=400, model_id=mid)


def _stack_action(registry, world, target) -> str:
    return "place_in" if registry[world[target][0]].concave else "stack"


def _regions_on_table(world, parent: str, registry, bounds) -> bool:
    from .plan import region_polygon, _inside_bounds
    mid, pose = world[parent]
    return all(_inside_bounds(region_polygon(pose, registry[mid], r.region_id), bounds)
               for r in registry[mid].virtual_regions)


def _arrange(labels: Sequence[str], registry, stacking_prob: float, rng, table_height: float, bounds,
             keep_free: str | None = None):
    """Place ``labels`` one by one; returns (world, relations) or raises PlacementError.

    With ``keep_free`` the first label is that parent model, placed so its
    virtual regions lie on the table, and later table placements avoid them.
    """
    world: dict[str, tuple[str, Pose]] = {}
    relations: dict[str, tuple[str, str]] = {}
    regions: dict[str, tuple[str, str]] = {}
    names = _names(labels)
    for k, (name, mid) in enumerate(zip(names, labels)):
        if keep_free is not None and k == 0:
            for _ in range(50):
                pose = _place(world, mid, name, "place", None, registry, table_height, bounds, {}, rng)
                if _regions_on_table({name: (mid, pose)}, name, registry, bounds):
                    break
            else:
                raise PlacementError(f"no pose keeps the regions of {name!r} on the table")
            world[name] = (mid, pose)
            relations[name] = ("on", TABLE_ID)
            regions = {f"{name}-{r.region_id}": (name, r.region_id) for r in registry[mid].virtual_regions}
            continue
        stack = rng.random() < stacking_prob
        targets = sorted(j for j in world if j not in {p for _, p in relations.values()})
        pose = None
        if stack and targets:
            target = targets[int(rng.integers(len(targets)))]
            action = _stack_action(registry, world, target)
            try:
                pose = _place(world, mid, name, action, target, registry, table_height, bounds, regions, rng)
                relations[name] = ("in" if action == "place_in" else "on", target)
            except PlacementError:
                pose = None
        if pose is None:
            pose = _place(world, mid, name, "place", None, registry, table_height, bounds, regions, rng)
            relations[name] = ("on", TABLE_ID)
        world[name] = (mid, pose)
    return world, relations


def generate_scene(registry: Mapping[str, ModelInfo], n_objects: int, stacking_prob: float = 0.0,
                   seed: int = 0, models: Sequence[str] | None = None,
                   table_height: float = DEFAULT_TABLE_HEIGHT, table_bounds=BENCH_BOUNDS,
                   intrinsics: CameraIntrinsics | None = None, extrinsic: Pose | None = None,
                   min_pixels: int = 50, max_attempts: int = 50,
                   scene_id: str = "scene") -> tuple[GroundTruthScene, SceneGraph]:
    """Random upright arrangement plus the axiom set it was built to have."""
    if not registry:
        raise GenerationError("registry is empty")
    if n_objects < 1:
        raise GenerationError("n_objects must be >= 1")
    pool = sorted(models if models is not None else registry)
    rng = np.random.default_rng([seed, 0x5CE4E])
    for _ in range(max_attempts):
        labels = [str(l) for l in rng.choice(pool, n_objects, replace=n_objects > len(pool))]
        try:
            world, relations = _arrange(labels, registry, stacking_prob, rng, table_height, table_bounds)
        except PlacementError:
            continue
        scene = _scene(world, registry, table_height, table_bounds, intrinsics, extrinsic, scene_id)
        if len(visible_objects(scene, registry, min_pixels)) == n_objects:
            return scene, _intended_graph(relations, world, table_height)
    raise GenerationError(f"cannot fit {n_objects} visible objects in the table bounds "
                          f"after {max_attempts} attempts")


def _scene(world, registry, table_height, bounds, intrinsics, extrinsic, scene_id, proximity=()):
    return GroundTruthScene(intrinsics or CameraIntrinsics.default(), extrinsic or default_camera(table_height),
                            table_height, tuple(PlacedObject(i, m, p) for i, (m, p) in world.items()),
                            table_bounds=tuple(bounds), proximity=tuple(proximity), scene_id=scene_id)


@dataclass(frozen=True)
class Task:
    initial: GroundTruthScene
    goal: GroundTruthScene
    initial_graph: SceneGraph  # intended, from construction
    goal_graph: SceneGraph


def generate_task(registry: Mapping[str, ModelInfo], n_objects: int, seed: int = 0,
                  parent_model: str = "tray", table_height: float = DEFAULT_TABLE_HEIGHT,
                  table_bounds=BENCH_BOUNDS, min_pixels: int = 50, max_attempts: int = 50) -> Task:
    """(initial, goal) pair over one object set; the goal has one proximity and one stacking relation."""
    if parent_model not in registry or not registry[parent_model].virtual_regions:
        raise GenerationError(f"{parent_model!r} with virtual regions required for proximity goals")
    if n_objects < 4:
        raise GenerationError("a task needs at least 4 objects (region parent and child, stack pair)")
    rng = np.random.default_rng([seed, 0x7A5C])
    others = sorted(m for m in registry if m != parent_model)
    cam = CameraIntrinsics.default()
    ext = default_camera(table_height)
    for _ in range(max_attempts):
        if n_objects - 1 > len(others):
            raise GenerationError(f"only {len(others)} distinct models besides {parent_model!r}")
        # distinct labels keep instance names identical across the two scenes
        labels = [parent_model] + [str(l) for l in rng.choice(others, n_objects - 1, replace=False)]
        names = _names(labels)
        model_of = dict(zip(names, labels))
        child = names[1 + int(rng.integers(n_objects - 1))]
        rid = registry[parent_model].virtual_regions[int(rng.integers(len(registry[parent_model].virtual_regions)))].region_id
        proximity = ((names[0], rid, child),)
        regions = {f"{names[0]}-{rid}": (names[0], rid)}
        rest = [n for n in names[1:] if n != child]
        top, base = [rest[k] for k in rng.permutation(len(rest))[:2]]
        try:
            goal_world: dict[str, tuple[str, Pose]] = {}
            rel: dict[str, tuple[str, str]] = {}
            order = [names[0], child, base, top] + [n for n in rest if n not in (top, base)]
            for name in order:
                mid = model_of[name]
                if name == child:
                    pose = _place(goal_world, mid, name, "place_in_region", f"{names[0]}-{rid}", registry,
                                  table_height, table_bounds, regions, rng)
                    rel[name] = ("on", TABLE_ID)
                elif name == top:
                    action = _stack_action(registry, goal_world, base)
                    pose = _place(goal_world, mid, name, action, base, registry, table_height, table_bounds,
                                  regions, rng)
                    rel[name] = ("in" if action == "place_in" else "on", base)
                else:
                    pose = _place(goal_world, mid, name, "place", None, registry, table_height, table_bounds,
                                  regions, rng)
                    rel[name] = ("on", TABLE_ID)
                goal_world[name] = (mid, pose)
        except PlacementError:
            continue
        goal = _scene({n: goal_world[n] for n in names}, registry, table_height, table_bounds, cam, ext,
                      "goal", proximity)
        if len(visible_objects(goal, registry, min_pixels)) != n_objects:
            continue
        # the initial scene keeps the parent's regions on the table and unoccupied
        init_labels = [parent_model] + [labels[1 + k] for k in rng.permutation(n_objects - 1)]
        try:
            init_world, _ = _arrange(init_labels, registry, 0.3, rng, table_height, table_bounds,
                                     keep_free=parent_model)
        except PlacementError:
            continue
        initial = _scene(init_world, registry, table_height, table_bounds, cam, ext, "initial", proximity)
        if len(visible_objects(initial, registry, min_pixels)) != n_objects:
            continue
        goal_graph = _intended_graph(rel, goal_world, table_height, proximity, in_region=(child,))
        init_graph = derive_scene_graph(initial.poses(), registry, table_height, proximity)
        wanted = {a for a in goal_graph.axioms if a.predicate in ("on", "in", "has")}
        if wanted <= init_graph.axioms:
            continue  # already solved; draw again
        return Task(initial, goal, init_graph, goal_graph)
    raise GenerationError(f"could not generate a task with {n_objects} objects")


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectError:
    scene_id: str
    instance_id: str
    model_id: str
    matched: str | None
    dt: float  # inf when unmatched
    dtheta: float


@dataclass
class EvalReport:
    thresholds: Thresholds
    accuracy: np.ndarray  # (len(dt_list), len(dtheta_list)); NaN when there are no objects
    errors: list[ObjectError] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def n_objects(self) -> int:
        return len(self.errors)

    def at(self, dt: float, dtheta: float) -> float:
        i = self.thresholds.dt_list.index(dt)
        j = self.thresholds.dtheta_list.index(dtheta)
        return float(self.accuracy[i, j])

    def matching(self) -> list[dict]:
        return [{"scene_id": e.scene_id, "truth": e.instance_id, "estimate": e.matched} for e in self.errors]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dt_cm \\ dtheta_deg"] + [f"{np.degrees(a):g}" for a in self.thresholds.dtheta_list])
        for i, dt in enumerate(self.thresholds.dt_list):
            w.writerow([f"{dt * 100:g}"] + [("nan" if np.isnan(v) else f"{v:.6f}") for v in self.accuracy[i]])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "dt_list_m": list(self.thresholds.dt_list),
            "dtheta_list_rad": list(self.thresholds.dtheta_list),
            "accuracy": [[None if np.isnan(v) else float(v) for v in row] for row in self.accuracy],
            "objects": [
                {"scene_id": e.scene_id, "instance_id": e.instance_id, "model_id": e.model_id,
                 "matched": e.matched, "dt_m": None if np.isinf(e.dt) else e.dt,
                 "dtheta_rad": None if np.isinf(e.dtheta) else e.dtheta}
                for e in self.errors
            ],
            "timings_s": self.timings,
        }


def match_objects(estimate: Mapping[str, tuple[str, Pose]], truth: Mapping[str, tuple[str, Pose]]
                  ) -> dict[str, str | None]:
    """Greedy label-first matching: same model only, smallest position error first."""
    pairs = []
    for ti, (tm, tp) in truth.items():
        for ei, (em, ep) in estimate.items():
            if em == tm:
                pairs.append((float(np.linalg.norm(ep.position - tp.position)), ti, ei))
    pairs.sort()
    out: dict[str, str | None] = {t: None for t in truth}
    used = set()
    for _, ti, ei in pairs:
        if out[ti] is None and ei not in used:
            out[ti] = ei
            used.add(ei)
    return out


def evaluate(estimates: Sequence[tuple[str, Mapping[str, tuple[str, Pose]]]], truths: Sequence[GroundTruthScene],
             registry: Mapping[str, ModelInfo], th: Thresholds = Thresholds()) -> EvalReport:
    """Fraction of ground-truth objects localized within each (dt, dtheta) pair.

    ``estimates`` holds (scene_id, instance_id -> (model_id, pose)) per scene, in
    the same order as ``truths``. Unmatched ground-truth objects count as wrong.
    """
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} estimates for {len(truths)} scenes")
    errors: list[ObjectError] = []
    for (sid, est), truth in zip(estimates, truths):
        if sid != truth.scene_id:
            raise ValueError(f"scene id mismatch: estimate {sid!r} vs truth {truth.scene_id!r}")
        tw = truth.poses()
        for ti, ei in sorted(match_objects(est, tw).items()):
            tm, tp = tw[ti]
            if ei is None:
                errors.append(ObjectError(sid, ti, tm, None, np.inf, np.inf))
            else:
                dt, dth = pose_error(est[ei][1], tp, registry[tm])
                errors.append(ObjectError(sid, ti, tm, ei, dt, dth))
    acc = np.full((len(th.dt_list), len(th.dtheta_list)), np.nan)
    if errors:
        dts = np.array([e.dt for e in errors])
        dths = np.array([e.dtheta for e in errors])
        for i, a in enumerate(th.dt_list):
            for j, b in enumerate(th.dtheta_list):
                acc[i, j] = np.count_nonzero((dts <= a) & (dths <= b)) / len(errors)
    return EvalReport(th, acc, errors)


# --------------------------------------------------------------------------
# suites
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchConfig:
    n_scenes: int = 10
    n_objects: int = 1
    stacking_prob: float = 0.0
    models: tuple[str, ...] | None = None
    registry: str = "builtin"
    table_height: float = DEFAULT_TABLE_HEIGHT
    scale: float = 0.25  # image resolution relative to 640x480
    max_hypotheses: int | None = None
    filter: FilterConfig = FilterConfig()
    noise: NoiseConfig = NoiseConfig()
    thresholds: Thresholds = Thresholds()

    def __post_init__(self):
        if self.n_scenes < 0 or self.n_objects < 1:
            raise ValueError("n_scenes must be >= 0 and n_objects >= 1")
        if not 0.0 <= self.stacking_prob <= 1.0:
            raise ValueError("stacking_prob must lie in [0, 1]")


def scene_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def run_suite(config: BenchConfig, seed: int, out_dir=None, threads: int | None = 1,
              registry: Mapping[str, ModelInfo] | None = None) -> tuple[EvalReport, str]:
    """Generate, observe, detect, estimate and evaluate ``config.n_scenes`` scenes."""
    registry = registry if registry is not None else load_registry(config.registry)
    cam = CameraIntrinsics.default(config.scale)
    truths, estimates, timings = [], [], {}
    for k in range(config.n_scenes):
        s = scene_seed(seed, k)
        scene, _ = generate_scene(registry, config.n_objects, config.stacking_prob, s, models=config.models,
                                  table_height=config.table_height, intrinsics=cam, scene_id=f"scene_{k:04d}")
        depth = render_depth(scene.instance(), cam, registry)
        dets = detect_synthetic(scene, registry, config.noise, s)
        t0 = time.perf_counter()
        if dets:
            res = digest(depth, dets, config.n_objects, cam, scene.extrinsic, registry, config.filter, s,
                         threads, config.max_hypotheses)
            best = res.best
            est = dict(zip(best.instance_ids(), zip(best.labels, best.poses)))
        else:
            est = {}
        timings[scene.scene_id] = time.perf_counter() - t0
        log.info("scene %d/%d done in %.1f s", k + 1, config.n_scenes, timings[scene.scene_id])
        truths.append(scene)
        estimates.append((scene.scene_id, est))
    report = evaluate(estimates, truths, registry, config.thresholds)
    report.timings = timings
    text = report.to_csv()
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "accuracy.csv").write_text(text)
        (d / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report, text
