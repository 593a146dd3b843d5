"""Model registry: JSON index of OBJ meshes plus per-model metadata.

Every model frame is centered on its enclosing box, with +z up when the object
stands upright. The built-in registry ships with the package (``builtin``).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .geometry import ModelInfo, TriMesh, VirtualRegion, load_mesh

BUILTIN_DIR = Path(__file__).parent / "data" / "models"
TABLE_ID = "table"


class RegistryError(ValueError):
    pass


class ModelRegistry(Mapping[str, ModelInfo]):
    def __init__(self, models: Mapping[str, ModelInfo] | list[ModelInfo]):
        if not isinstance(models, Mapping):
            models = {m.model_id: m for m in models}
        if TABLE_ID in models:
            raise RegistryError(f"'{TABLE_ID}' is reserved")
        self._models = dict(models)

    def __getitem__(self, key: str) -> ModelInfo:
        try:
            return self._models[key]
        except KeyError:
            raise KeyError(f"unknown model_id {key!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._models)

    def __len__(self) -> int:
        return len(self._models)

    def subset(self, ids) -> "ModelRegistry":
        return ModelRegistry({i: self[i] for i in ids})

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for mid, info in self._models.items():
            (d / f"{mid}.obj").write_text(info.mesh.to_obj())
            entries.append({
                "model_id": mid,
                "mesh": f"{mid}.obj",
                "box_dims": list(info.box_dims),
                "symmetry_axis": info.symmetry_axis,
                "concave": info.concave,
                "virtual_regions": [
                    {"region_id": r.region_id, "min": list(r.lo), "max": list(r.hi)}
                    for r in info.virtual_regions
                ],
            })
        path = d / "registry.json"
        path.write_text(json.dumps({"models": entries}, indent=2) + "\n")
        return path


def load_registry(path) -> ModelRegistry:
    """Load ``registry.json`` (or a directory containing one, or ``builtin``)."""
    if str(path) == "builtin":
        path = BUILTIN_DIR
    p = Path(path)
    if p.is_dir():
        p = p / "registry.json"
    if not p.is_file():
        raise RegistryError(f"model registry not found: {path}")
    try:
        doc = json.loads(p.read_text())
        models = []
        for e in doc["models"]:
            regions = tuple(
                VirtualRegion(r["region_id"], tuple(r["min"]), tuple(r["max"]))
                for r in e.get("virtual_regions", [])
            )
            models.append(ModelInfo(
                model_id=e["model_id"],
                mesh=load_mesh(p.parent / e["mesh"]),
                box_dims=tuple(e["box_dims"]),
                symmetry_axis=e.get("symmetry_axis"),
                concave=bool(e.get("concave", False)),
                virtual_regions=regions,
            ))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise RegistryError(f"{p}: malformed registry ({exc})") from exc
    return ModelRegistry(models)


# --------------------------------------------------------------------------
# procedural meshes
# --------------------------------------------------------------------------

def box_mesh(dx: float, dy: float, dz: float) -> TriMesh:
    h = np.array([dx, dy, dz]) / 2
    v = np.array([[sx, sy, sz] for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)], float) * h
    # vertex index = ix + 2*iy + 4*iz
    t = [
        (0, 2, 1), (1, 2, 3),  # bottom
        (4, 5, 6), (5, 7, 6),  # top
        (0, 1, 4), (1, 5, 4),  # -y
        (2, 6, 3), (3, 6, 7),  # +y
        (0, 4, 2), (2, 4, 6),  # -x
        (1, 3, 5), (3, 7, 5),  # +x
    ]
    return TriMesh(v, np.array(t))


def _ring(r: float, z: float, n: int) -> np.ndarray:
    a = np.arange(n) * 2 * np.pi / n
    return np.column_stack([r * np.cos(a), r * np.sin(a), np.full(n, z)])


def _band(i0: int, i1: int, n: int) -> list[tuple[int, int, int]]:
    tris = []
    for k in range(n):
        a, b = i0 + k, i0 + (k + 1) % n
        c, d = i1 + k, i1 + (k + 1) % n
        tris += [(a, b, d), (a, d, c)]
    return tris


def _disk(center: int, ring0: int, n: int) -> list[tuple[int, int, int]]:
    return [(center, ring0 + k, ring0 + (k + 1) % n) for k in range(n)]


def cylinder_mesh(radius: float, height: float, n: int = 24) -> TriMesh:
    h = height / 2
    v = np.vstack([_ring(radius, -h, n), _ring(radius, h, n), [[0, 0, -h], [0, 0, h]]])
    t = _band(0, n, n) + _disk(2 * n, 0, n) + _disk(2 * n + 1, n, n)
    return TriMesh(v, np.array(t))


def cup_mesh(radius: float, height: float, wall: float, floor: float, n: int = 24) -> TriMesh:
    """Open-topped cylinder with inner wall and inner floor."""
    h = height / 2
    ri = radius - wall
    v = np.vstack([
        _ring(radius, -h, n),          # 0: outer bottom
        _ring(radius, h, n),           # n: outer top
        _ring(ri, h, n),               # 2n: inner top
        _ring(ri, -h + floor, n),      # 3n: inner floor
        [[0, 0, -h], [0, 0, -h + floor]],
    ])
    t = (_band(0, n, n) + _band(n, 2 * n, n) + _band(2 * n, 3 * n, n)
         + _disk(4 * n, 0, n) + _disk(4 * n + 1, 3 * n, n))
    return TriMesh(v, np.array(t))


def builtin_registry() -> ModelRegistry:
    """Tabletop object set used by the benchmark and examples."""
    models = []

    models.append(ModelInfo("can", cylinder_mesh(0.035, 0.12), (0.07, 0.07, 0.12), symmetry_axis="z"))

    bowl_h = 0.06
    models.append(ModelInfo("bowl", cup_mesh(0.075, bowl_h, 0.008, 0.012), (0.15, 0.15, bowl_h),
                            symmetry_axis="z", concave=True))

    # mug: cup body offset so the handle fits inside a centered box
    body_r, mug_h = 0.04, 0.10
    body = cup_mesh(body_r, mug_h, 0.006, 0.01)
    handle = box_mesh(0.04, 0.02, 0.07)
    width = 2 * body_r + 0.035
    mug = TriMesh.merge([body.translated([-width / 2 + body_r, 0, 0]),
                         handle.translated([width / 2 - 0.02, 0, 0])])
    models.append(ModelInfo("mug", mug, (width, 2 * body_r, mug_h), concave=True))

    # L-shaped block
    lx, ly, lz = 0.14, 0.10, 0.06
    arm_a = box_mesh(lx, 0.045, lz).translated([0, -ly / 2 + 0.0225, 0])
    arm_b = box_mesh(0.05, ly, lz).translated([-lx / 2 + 0.025, 0, 0])
    models.append(ModelInfo("lblock", TriMesh.merge([arm_a, arm_b]), (lx, ly, lz)))

    # stacking block with a step on one side (asymmetric top view)
    bx, by, bz = 0.10, 0.08, 0.05
    base = box_mesh(bx, by, 0.035).translated([0, 0, -bz / 2 + 0.0175])
    step = box_mesh(0.05, by, 0.015).translated([-bx / 2 + 0.025, 0, bz / 2 - 0.0075])
    models.append(ModelInfo("block", TriMesh.merge([base, step]), (bx, by, bz)))

    # tray with a lip on the +x end; proximity regions sit beside it on the table
    tx, ty, tz = 0.26, 0.18, 0.03
    plate = box_mesh(tx - 0.03, ty, 0.015).translated([-0.015, 0, -tz / 2 + 0.0075])
    lip = box_mesh(0.03, ty, tz)
    lip = lip.translated([tx / 2 - 0.015, 0, 0])
    regions = (
        VirtualRegion("front", (-0.13, -0.26, -0.02), (0.13, -0.10, 0.30)),
        VirtualRegion("back", (-0.13, 0.10, -0.02), (0.13, 0.26, 0.30)),
    )
    models.append(ModelInfo("tray", TriMesh.merge([plate, lip]), (tx, ty, tz), virtual_regions=regions))

    return ModelRegistry(models)


def inner_floor_height(info: ModelInfo) -> float:
    """Height above the model's bottom where a contained object rests.

    Casts a vertical ray through the model origin and takes the second surface
    hit from below (the inner floor of a cup); falls back to the box top.
    """
    v = info.mesh.vertices
    hits = []
    for a, b, c in info.mesh.triangles:
        p0, p1, p2 = v[a], v[b], v[c]
        d = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if abs(d) < 1e-15:
            continue
        l1 = ((0 - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (0 - p0[1])) / d
        l2 = ((p1[0] - p0[0]) * (0 - p0[1]) - (0 - p0[0]) * (p1[1] - p0[1])) / d
        if l1 >= -1e-12 and l2 >= -1e-12 and l1 + l2 <= 1 + 1e-12:
            hits.append(p0[2] + l1 * (p1[2] - p0[2]) + l2 * (p2[2] - p0[2]))
    bottom = -info.box_dims[2] / 2
    zs = sorted(set(np.round(hits, 9)))
    if len(zs) >= 2:
        return float(zs[1] - bottom)
    return float(info.box_dims[2])
