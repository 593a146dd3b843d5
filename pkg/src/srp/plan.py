"""STRIPS planning over scene graphs and placement sampling for the plan's actions.

Planner view: every instance is a constant typed ``container`` (concave model)
or ``solid``; each virtual region of a proximity relation is a ``region``
constant, clear while nothing occupies it. ``has`` atoms are static.

Caveat: ``pick`` does not delete a stale ``in(region, x)``. A STRIPS domain
cannot require "x is in no region" without negative preconditions, and the
stale fact is only reachable in plans that move an object out of a region it
must end in, which breadth-first search never prefers over leaving it there.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import ModelInfo, Pose, axis_angle_to_quat, convex_hull_2d
from .models import TABLE_ID, inner_floor_height
from .pddl import (SCHEMAS, ActionSchema, Atom, GroundedState, domain_text, is_subtype, problem_text)
from .scenegraph import SceneGraph, check_invariants, derive_scene_graph, overlap_area, top_elevation

DEFAULT_MAX_STATES = 10**7
PLACE_ACTIONS = ("place", "stack", "place_in", "place_in_region")


class PlanningError(ValueError):
    pass


class PlannerLimit(RuntimeError):
    pass


class PlacementError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# scene graph -> planner state
# --------------------------------------------------------------------------

def _object_types(graphs: Sequence[SceneGraph], registry: Mapping[str, ModelInfo]) -> dict[str, str]:
    types = {TABLE_ID: "surface"}
    for g in graphs:
        for i, (mid, _) in g.instances.items():
            types[i] = "container" if registry[mid].concave else "solid"
        for name in g.regions:
            types[name] = "region"
    return types


def _relations(g: SceneGraph) -> set[Atom]:
    return {(a.predicate, *a.args) for a in g.axioms if a.predicate in ("on", "in", "has")}


def grounded_state(initial: SceneGraph, goal: SceneGraph | None, registry: Mapping[str, ModelInfo]) -> GroundedState:
    """Planner view of ``initial``; regions and static ``has`` facts also come from ``goal``."""
    graphs = [initial] + ([goal] if goal is not None else [])
    for g in graphs:
        problems = check_invariants(g)
        if problems:
            raise PlanningError("inconsistent scene graph: " + "; ".join(problems))
    if goal is not None and set(goal.instances) - set(initial.instances):
        missing = sorted(set(goal.instances) - set(initial.instances))
        raise PlanningError(f"goal mentions instances absent from the initial scene: {missing}")
    types = _object_types(graphs, registry)
    atoms = {r for r in _relations(initial) if r[0] != "has"}
    for g in graphs:
        atoms |= {r for r in _relations(g) if r[0] == "has"}
    atoms |= {("clear", a.args[0]) for a in initial.axioms if a.predicate == "clear"}
    occupied = {r[1] for r in atoms if r[0] == "in" and types.get(r[1]) == "region"}
    atoms |= {("clear", n) for n, t in types.items() if t == "region" and n not in occupied}
    atoms.add(("handempty",))
    for a in atoms:
        for arg in a[1:]:
            if arg not in types:
                raise PlanningError(f"atom {a} mentions unknown object {arg!r}")
    return GroundedState(tuple(types.items()), frozenset(atoms))


def goal_atoms(goal: SceneGraph) -> frozenset[Atom]:
    """Goal block: the on/in/has relations of ``goal`` (no poses, no clear)."""
    problems = check_invariants(goal)
    if problems:
        raise PlanningError("inconsistent goal graph: " + "; ".join(problems))
    return frozenset(_relations(goal))


def emit_pddl(initial: SceneGraph, goal: SceneGraph, registry: Mapping[str, ModelInfo],
              name: str = "srp-task") -> tuple[str, str]:
    state = grounded_state(initial, goal, registry)
    return domain_text(SCHEMAS), problem_text(state, goal_atoms(goal), name)


# --------------------------------------------------------------------------
# grounding and search
# --------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class GroundedAction:
    name: str
    args: tuple[str, ...]
    pre: frozenset = field(default=frozenset(), compare=False, repr=False)
    add: frozenset = field(default=frozenset(), compare=False, repr=False)
    delete: frozenset = field(default=frozenset(), compare=False, repr=False)

    def __str__(self) -> str:
        return f"{self.name}({', '.join(self.args)})"

    def applicable(self, state: frozenset) -> bool:
        return self.pre <= state

    def apply(self, state: frozenset) -> frozenset:
        return (state - self.delete) | self.add


def _subst(atoms: Iterable[Atom], binding: Mapping[str, str]) -> frozenset:
    return frozenset(tuple(binding.get(t, t) for t in a) for a in atoms)


def ground_action(schema: ActionSchema, args: Sequence[str]) -> GroundedAction:
    if len(args) != len(schema.params):
        raise PlanningError(f"{schema.name} takes {len(schema.params)} argument(s), got {len(args)}")
    b = {p: a for (p, _), a in zip(schema.params, args)}
    return GroundedAction(schema.name, tuple(args), _subst(schema.pre, b), _subst(schema.add, b),
                          _subst(schema.delete, b))


def ground(schemas: Sequence[ActionSchema], objects: Sequence[tuple[str, str]]) -> list[GroundedAction]:
    """All groundings with distinct arguments, in schema order then argument order."""
    names = sorted(objects)
    out = []
    for s in schemas:
        domains = [[n for n, t in names if is_subtype(t, pt)] for _, pt in s.params]
        for args in product(*domains):
            if len(set(args)) == len(args):
                out.append(ground_action(s, args))
    return out


@dataclass(frozen=True)
class Plan:
    actions: tuple[GroundedAction, ...]

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)


@dataclass(frozen=True)
class PlanResult:
    plan: Plan | None
    expanded: int

    @property
    def solvable(self) -> bool:
        return self.plan is not None


def plan_bfs(state: GroundedState, goal: Iterable[Atom], schemas: Sequence[ActionSchema] = SCHEMAS,
             max_states: int = DEFAULT_MAX_STATES) -> PlanResult:
    """Minimum-length plan from ``state`` to any state containing ``goal``."""
    problems = state.problems()
    if problems:
        raise PlanningError("inconsistent state: " + "; ".join(problems))
    goal = frozenset(tuple(a) for a in goal)
    actions = ground(schemas, state.objects)
    # index by one precondition so only plausible actions are tested
    by_anchor: dict[Atom, list[int]] = {}
    free: list[int] = []
    for k, a in enumerate(actions):
        anchor = min(a.pre, key=lambda p: (p == ("handempty",), p)) if a.pre else None
        (by_anchor.setdefault(anchor, []) if anchor else free).append(k)

    start = state.atoms
    if goal <= start:
        return PlanResult(Plan(()), 0)
    parent: dict[frozenset, tuple[frozenset, int] | None] = {start: None}
    queue = deque([start])
    expanded = 0
    while queue:
        s = queue.popleft()
        expanded += 1
        cand = sorted(set(free).union(*(by_anchor.get(p, ()) for p in s)))
        for k in cand:
            a = actions[k]
            if not a.pre <= s:
                continue
            t = a.apply(s)
            if t in parent:
                continue
            parent[t] = (s, k)
            if goal <= t:
                steps = []
                while parent[t] is not None:
                    t, kk = parent[t]
                    steps.append(actions[kk])
                return PlanResult(Plan(tuple(reversed(steps))), expanded)
            if len(parent) > max_states:
                raise PlannerLimit(f"search exceeded max_states={max_states}")
            queue.append(t)
    return PlanResult(None, expanded)


@dataclass(frozen=True)
class Validation:
    ok: bool
    step: int | None = None  # index of the first failing action; len(plan) for goal failure
    reason: str = ""


def validate(plan: Iterable, state: GroundedState, goal: Iterable[Atom],
             schemas: Sequence[ActionSchema] = SCHEMAS) -> Validation:
    by_name = {s.name: s for s in schemas}
    s = state.atoms
    steps = list(plan)
    for k, step in enumerate(steps):
        name, args = (step.name, step.args) if isinstance(step, GroundedAction) else (step[0], tuple(step[1]))
        if name not in by_name:
            return Validation(False, k, f"unknown action {name!r}")
        try:
            a = ground_action(by_name[name], args)
        except PlanningError as exc:
            return Validation(False, k, str(exc))
        missing = sorted(a.pre - s)
        if missing:
            return Validation(False, k, f"{a}: precondition(s) not met: {missing}")
        s = a.apply(s)
    unmet = sorted(frozenset(tuple(g) for g in goal) - s)
    if unmet:
        return Validation(False, len(steps), f"goal not reached: {unmet}")
    return Validation(True)


# --------------------------------------------------------------------------
# placement
# --------------------------------------------------------------------------

World = Mapping[str, tuple[str, Pose]]


def shadow(pose: Pose, info: ModelInfo, margin: float = 0.0) -> np.ndarray:
    """Whole bounding box projected onto the table (convex, counter-clockwise)."""
    corners = info.box_corners() * ((np.asarray(info.box_dims) + 2 * margin) / np.asarray(info.box_dims))
    return convex_hull_2d(pose.apply(corners)[:, :2])


def _aabb(poly: np.ndarray) -> np.ndarray:
    return np.concatenate([poly.min(axis=0), poly.max(axis=0)])


def _aabb_hit(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3])


def region_polygon(parent_pose: Pose, info: ModelInfo, region_id: str) -> np.ndarray:
    r = info.region(region_id)
    lo, hi = r.lo, r.hi
    pts = [(x, y, 0.0) for x in (lo[0], hi[0]) for y in (lo[1], hi[1])]
    return convex_hull_2d(parent_pose.apply(pts)[:, :2])


def _inside_bounds(poly: np.ndarray, bounds) -> bool:
    x0, x1, y0, y1 = bounds
    return bool(np.all((poly[:, 0] >= x0) & (poly[:, 0] <= x1) & (poly[:, 1] >= y0) & (poly[:, 1] <= y1)))


def _upright(x: float, y: float, z: float, yaw: float) -> Pose:
    return Pose((x, y, z), axis_angle_to_quat((0, 0, 1), yaw))


def _support_chain(world: World, registry, table_height: float, start: str) -> set[str]:
    g = derive_scene_graph(world, registry, table_height)
    chain, cur = set(), start
    while cur is not None and cur != TABLE_ID and cur not in chain:
        chain.add(cur)
        cur = g.support_parent(cur)
    return chain


def intended_atoms(action: GroundedAction, regions: Mapping[str, tuple[str, str]]) -> set[Atom]:
    x = action.args[0]
    if action.name == "place":
        return {("on", x, TABLE_ID)}
    if action.name == "stack":
        return {("on", x, action.args[1])}
    if action.name == "place_in":
        return {("in", x, action.args[1])}
    if action.name == "place_in_region":
        return {("on", x, TABLE_ID), ("in", action.args[1], x)}
    raise PlanningError(f"{action} does not place an object")


def sample_placement(action: GroundedAction, world: World, registry: Mapping[str, ModelInfo],
                     table_height: float, table_bounds, regions: Mapping[str, tuple[str, str]] = {},
                     seed: int = 0, max_tries: int = 2000, model_id: str | None = None,
                     clearance: float = 0.005, offset: float = 0.01, draws_per_try: int = 50) -> Pose:
    """Rejection-sample an upright pose for the moved object that realizes ``action``.

    If the moved object is in ``world`` its current pose is ignored; otherwise
    ``model_id`` names its model. Region boxes follow their parent's current pose.
    Candidates are drawn cheaply and screened with 2D shadows; ``max_tries`` caps
    the survivors checked against the re-derived scene graph, and at most
    ``draws_per_try * max_tries`` candidates are drawn in total.
    """
    x_id = action.args[0]
    target = action.args[1] if len(action.args) > 1 else None
    if x_id in world:
        mid = world[x_id][0]
        world = {i: v for i, v in world.items() if i != x_id}
    elif model_id is not None:
        mid = model_id
    else:
        raise PlacementError(f"{action}: model of {x_id!r} is unknown")
    info = registry[mid]
    hz = info.box_dims[2] / 2
    rng = np.random.default_rng(seed)
    want = intended_atoms(action, regions)

    keep_out: set[str] = set()
    region_polys = []
    if action.name in ("stack", "place_in"):
        if target not in world:
            raise PlacementError(f"{action}: target {target!r} not in the scene")
        keep_out = _support_chain(world, registry, table_height, target)
    elif action.name == "place_in_region":
        if target not in regions or regions[target][0] not in world:
            raise PlacementError(f"{action}: unknown region or missing parent for {target!r}")
    if action.name == "place":
        for name, (parent, rid) in sorted(regions.items()):
            if parent in world:
                pm, pp = world[parent]
                region_polys.append(region_polygon(pp, registry[pm], rid))
    others = [shadow(p, registry[m]) for i, (m, p) in sorted(world.items()) if i not in keep_out]
    blocked = [(_aabb(o), o) for o in others + region_polys]
    proximity = [(regions[target][0], regions[target][1], x_id)] if action.name == "place_in_region" else []
    local = shadow(_upright(0.0, 0.0, 0.0, 0.0), info, clearance)
    check_bounds = action.name in ("place", "place_in_region")

    x0, x1, y0, y1 = table_bounds
    tries = 0
    for _ in range(draws_per_try * max_tries):
        yaw = rng.uniform(-np.pi, np.pi)
        if action.name == "place":
            x, y, z = rng.uniform(x0, x1), rng.uniform(y0, y1), table_height + hz
        elif action.name == "place_in_region":
            parent, rid = regions[target]
            pm, pp = world[parent]
            r = registry[pm].region(rid)
            local_pt = (rng.uniform(r.lo[0], r.hi[0]), rng.uniform(r.lo[1], r.hi[1]), 0.0)
            x, y, _ = pp.apply(np.array([local_pt]))[0]
            z = table_height + hz
        else:
            tm, tp = world[target]
            dx, dy = rng.uniform(-offset, offset, 2)
            if action.name == "stack":
                z = top_elevation(tp, registry[tm]) + hz
            else:
                z = tp.position[2] - registry[tm].box_dims[2] / 2 + inner_floor_height(registry[tm]) + hz
            x, y = tp.position[0] + dx, tp.position[1] + dy

        c, s_ = np.cos(yaw), np.sin(yaw)
        poly = local @ np.array([[c, s_], [-s_, c]]) + (x, y)
        if check_bounds and not _inside_bounds(poly, table_bounds):
            continue
        box = _aabb(poly)
        if any(_aabb_hit(box, ob) and overlap_area(poly, o) > 0 for ob, o in blocked):
            continue
        pose = _upright(x, y, z, yaw)
        hypo = dict(world)
        hypo[x_id] = (mid, pose)
        g = derive_scene_graph(hypo, registry, table_height, proximity)
        got = {(a.predicate, *a.args) for a in g.axioms}
        if want <= got and not g.children(x_id):
            return pose
        tries += 1
        if tries >= max_tries:
            break
    raise PlacementError(f"no valid pose for {action} after {max_tries} tries")


@dataclass(frozen=True)
class ExecutionStep:
    action: GroundedAction
    pose: Pose | None


def execute_plan(plan: Iterable[GroundedAction], world: World, registry: Mapping[str, ModelInfo],
                 table_height: float, table_bounds, regions: Mapping[str, tuple[str, str]] = {},
                 seed: int = 0, max_tries: int = 2000) -> tuple[dict, list[ExecutionStep]]:
    """Simulate ``plan`` on ``world``: picks remove the object, places sample a pose."""
    world = dict(world)
    held: tuple[str, str] | None = None
    steps = []
    for k, a in enumerate(plan):
        x = a.args[0]
        if a.name in PLACE_ACTIONS:
            if held is None or held[0] != x:
                raise PlacementError(f"step {k}: {a} but {x!r} is not held")
            pose = sample_placement(a, world, registry, table_height, table_bounds, regions,
                                    seed=int(np.random.SeedSequence([seed, k]).generate_state(1)[0]),
                                    max_tries=max_tries, model_id=held[1])
            world[x] = (held[1], pose)
            held = None
            steps.append(ExecutionStep(a, pose))
        else:
            if held is not None:
                raise PlacementError(f"step {k}: {a} while holding {held[0]!r}")
            if x not in world:
                raise PlacementError(f"step {k}: {x!r} not in the scene")
            held = (x, world.pop(x)[0])
            steps.append(ExecutionStep(a, None))
    if held is not None:
        raise PlacementError(f"plan ends while holding {held[0]!r}")
    return world, steps


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def plan_to_dict(steps: Sequence[ExecutionStep | GroundedAction], verdict: Validation | None = None) -> dict:
    out = []
    for s in steps:
        a, pose = (s.action, s.pose) if isinstance(s, ExecutionStep) else (s, None)
        e = {"action": a.name, "args": list(a.args)}
        if pose is not None:
            e["pose"] = pose.to_dict()
        out.append(e)
    doc = {"actions": out}
    if verdict is not None:
        doc["valid"] = verdict.ok
    return doc


def save_plan(path, steps, verdict: Validation | None = None) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(steps, verdict), indent=2) + "\n")


def load_plan(path, schemas: Sequence[ActionSchema] = SCHEMAS) -> list[ExecutionStep]:
    by_name = {s.name: s for s in schemas}
    doc = json.loads(Path(path).read_text())
    steps = []
    for e in doc["actions"]:
        if e["action"] not in by_name:
            raise PlanningError(f"unknown action {e['action']!r}")
        a = ground_action(by_name[e["action"]], e["args"])
        steps.append(ExecutionStep(a, Pose.from_dict(e["pose"]) if "pose" in e else None))
    return steps
