"""Axiomatic scene graphs (exist, clear, on, in, has) derived from object poses.

Support is decided per object: if one of its model axes points along gravity,
the object rests on something else only when its center sits higher above the
table than half its extent along that axis; if no axis is aligned it must be
leaning on something. Supported objects are assigned, in ascending height, to
the already-placed object whose top-surface footprint overlaps their bottom
footprint the most. Concave supporters give ``in``, convex ones ``on``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import AXES, ModelInfo, Pose, convex_hull_2d, polygon_area
from .models import TABLE_ID

ARITY = {"exist": 1, "clear": 1, "on": 2, "in": 2, "has": 2}
ALIGN_TOL = np.radians(10.0)
SUPPORT_EPS = 0.005  # m
AREA_TIE = 1e-9  # m^2


class SceneGraphError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Axiom:
    predicate: str
    args: tuple[str, ...]

    def __post_init__(self):
        if self.predicate not in ARITY:
            raise SceneGraphError(f"unknown predicate {self.predicate!r}")
        object.__setattr__(self, "args", tuple(self.args))
        if len(self.args) != ARITY[self.predicate]:
            raise SceneGraphError(f"{self.predicate} takes {ARITY[self.predicate]} argument(s), got {self.args}")

    def __str__(self) -> str:
        return f"{self.predicate}({', '.join(self.args)})"


def ax(predicate: str, *args: str) -> Axiom:
    return Axiom(predicate, tuple(args))


def region_name(parent: str, region_id: str) -> str:
    return f"{parent}-{region_id}"


@dataclass(frozen=True)
class SceneGraph:
    axioms: frozenset[Axiom]
    instances: Mapping[str, tuple[str, Pose]] = field(default_factory=dict)
    regions: Mapping[str, tuple[str, str]] = field(default_factory=dict)  # name -> (parent, region_id)
    table_height: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "axioms", frozenset(self.axioms))

    def sorted_axioms(self) -> list[Axiom]:
        return sorted(self.axioms)

    def support_parent(self, i: str) -> str | None:
        for a in self.axioms:
            if a.predicate in ("on", "in") and a.args[0] == i:
                return a.args[1]
        return None

    def children(self, i: str) -> list[str]:
        return sorted(a.args[0] for a in self.axioms
                      if a.predicate in ("on", "in") and a.args[1] == i and a.args[0] not in self.regions)

    def to_dict(self) -> dict:
        return {
            "table_height": self.table_height,
            "instances": {
                i: {"model_id": mid, "pose": pose.to_dict()} for i, (mid, pose) in sorted(self.instances.items())
            },
            "regions": {n: {"parent": p, "region_id": r} for n, (p, r) in sorted(self.regions.items())},
            "axioms": [[a.predicate, *a.args] for a in self.sorted_axioms()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        return cls(
            axioms=frozenset(Axiom(a[0], tuple(a[1:])) for a in d["axioms"]),
            instances={i: (v["model_id"], Pose.from_dict(v["pose"])) for i, v in d.get("instances", {}).items()},
            regions={n: (v["parent"], v["region_id"]) for n, v in d.get("regions", {}).items()},
            table_height=float(d.get("table_height", 0.0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SceneGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# geometric tests
# --------------------------------------------------------------------------

def aligned_axis(pose: Pose, tol: float = ALIGN_TOL) -> int | None:
    """Model axis most parallel to gravity, if within ``tol``."""
    vertical = np.abs(pose.rotation[2])  # world-z component of each model axis
    a = int(np.argmax(vertical))
    return a if vertical[a] >= np.cos(tol) else None


def is_supported_by_object(pose: Pose, info: ModelInfo, table_height: float,
                           align_tol: float = ALIGN_TOL, eps: float = SUPPORT_EPS) -> bool:
    a = aligned_axis(pose, align_tol)
    if a is None:
        return True
    return pose.position[2] - table_height > 0.5 * info.box_dims[a] + eps


def _face_corners(pose: Pose, info: ModelInfo, surface: str) -> np.ndarray:
    if surface not in ("top", "bottom"):
        raise ValueError("surface must be 'top' or 'bottom'")
    up = pose.rotation[2]  # world z of each model axis
    if surface == "bottom":
        up = -up
    a = int(np.argmax(np.abs(up)))
    sign = np.sign(up[a]) or 1.0
    corners = info.box_corners()
    face = corners[np.isclose(corners[:, a], sign * info.box_dims[a] / 2)]
    return pose.apply(face)


def footprint(pose: Pose, info: ModelInfo, surface: str = "bottom") -> np.ndarray:
    """Counter-clockwise polygon: the box's top or bottom face projected onto the table."""
    return convex_hull_2d(_face_corners(pose, info, surface)[:, :2])


def top_elevation(pose: Pose, info: ModelInfo) -> float:
    return float(_face_corners(pose, info, "top")[:, 2].max())


def _clip(subject: list, a, b) -> list:
    def inside(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0

    def intersect(p, q):
        dx, dy = q[0] - p[0], q[1] - p[1]
        ex, ey = b[0] - a[0], b[1] - a[1]
        den = ex * dy - ey * dx
        t = (ex * (a[1] - p[1]) - ey * (a[0] - p[0])) / den
        return (p[0] + t * dx, p[1] + t * dy)

    out = []
    for k in range(len(subject)):
        p, q = subject[k - 1], subject[k]
        if inside(q):
            if not inside(p):
                out.append(intersect(p, q))
            out.append(q)
        elif inside(p):
            out.append(intersect(p, q))
    return out


def overlap_area(r1, r2) -> float:
    """Intersection area of two convex counter-clockwise polygons."""
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    if len(r1) < 3 or len(r2) < 3:
        return 0.0
    poly = [tuple(p) for p in r1]
    for k in range(len(r2)):
        poly = _clip(poly, r2[k - 1], r2[k])
        if len(poly) < 3:
            return 0.0
    return max(0.0, polygon_area(poly))


def find_supporter(i: str, others: Iterable[str], instances: Mapping[str, tuple[str, Pose]],
                   registry: Mapping[str, ModelInfo]) -> str:
    """Object whose top footprint overlaps ``i``'s bottom footprint most, else ``table``."""
    mid, pose = instances[i]
    bottom = footprint(pose, registry[mid], "bottom")
    best, best_key = TABLE_ID, None
    for j in sorted(others):
        if j == i:
            continue
        mj, pj = instances[j]
        area = overlap_area(bottom, footprint(pj, registry[mj], "top"))
        if area <= AREA_TIE:
            continue
        key = (area, top_elevation(pj, registry[mj]))
        if best_key is None or key[0] > best_key[0] + AREA_TIE or (
                abs(key[0] - best_key[0]) <= AREA_TIE and key[1] > best_key[1]):
            best, best_key = j, key
    return best


# --------------------------------------------------------------------------
# derivation
# --------------------------------------------------------------------------

def derive_scene_graph(instances: Mapping[str, tuple[str, Pose]], registry: Mapping[str, ModelInfo],
                       table_height: float, proximity: Sequence[tuple[str, str, str]] = (),
                       align_tol: float = ALIGN_TOL, eps: float = SUPPORT_EPS) -> SceneGraph:
    """Scene graph of world-frame ``instances`` (id -> (model_id, pose))."""
    for i, (mid, _) in instances.items():
        if i == TABLE_ID:
            raise SceneGraphError(f"'{TABLE_ID}' is reserved")
        registry[mid]
    axioms = {ax("exist", i) for i in instances}
    supported = sorted((i for i, (mid, pose) in instances.items()
                        if is_supported_by_object(pose, registry[mid], table_height, align_tol, eps)),
                       key=lambda i: (instances[i][1].position[2], i))
    resting = sorted(set(instances) - set(supported))
    for i in resting:
        axioms.add(ax("on", i, TABLE_ID))
    parents: dict[str, str] = {}
    for i in supported:
        j = find_supporter(i, resting, instances, registry)
        if j == TABLE_ID:
            axioms.add(ax("on", i, TABLE_ID))
        else:
            parents[i] = j
            axioms.add(ax("in" if registry[instances[j][0]].concave else "on", i, j))
        resting.append(i)
    for i in instances:
        if i not in parents.values():
            axioms.add(ax("clear", i))

    regions: dict[str, tuple[str, str]] = {}
    for parent, region_id, child in proximity:
        for name in (parent, child):
            if name not in instances:
                raise SceneGraphError(f"proximity refers to unknown instance {name!r}")
        pmid, ppose = instances[parent]
        try:
            region = registry[pmid].region(region_id)
        except KeyError as exc:
            raise SceneGraphError(str(exc)) from None
        g = region_name(parent, region_id)
        regions[g] = (parent, region_id)
        axioms.add(ax("has", parent, g))
        if region.contains(ppose.inverse().apply(instances[child][1].position)):
            axioms.add(ax("in", g, child))
    return SceneGraph(frozenset(axioms), dict(instances), regions, table_height)


def check_invariants(g: SceneGraph) -> list[str]:
    """Structural problems with ``g`` (empty list when it is well formed)."""
    problems = []
    objects = set(g.instances) if g.instances else {a.args[0] for a in g.axioms if a.predicate == "exist"}
    for i in objects:
        if ax("exist", i) not in g.axioms:
            problems.append(f"{i}: missing exist")
    parents: dict[str, list[str]] = {i: [] for i in objects}
    for a in g.axioms:
        if a.predicate in ("on", "in") and a.args[0] not in g.regions:
            if a.args[0] not in objects:
                problems.append(f"{a}: unknown instance")
                continue
            parents[a.args[0]].append(a.args[1])
    for i, ps in parents.items():
        if len(ps) != 1:
            problems.append(f"{i}: {len(ps)} support parents")
    for i in objects:
        seen, cur = set(), i
        while cur in parents and parents[cur]:
            if cur in seen:
                problems.append(f"{i}: support cycle")
                break
            seen.add(cur)
            cur = parents[cur][0]
        else:
            if cur != TABLE_ID:
                problems.append(f"{i}: support chain ends at {cur!r}, not table")
    for i in objects:
        has_child = any(a.predicate in ("on", "in") and a.args[1] == i and a.args[0] not in g.regions
                        for a in g.axioms)
        if (ax("clear", i) in g.axioms) == has_child:
            problems.append(f"{i}: clear does not match children")
    return problems
