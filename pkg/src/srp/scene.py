"""Ground-truth scene files (JSON) shared by detection, rendering and the benchmark."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import CameraIntrinsics, Pose, look_at
from .render import SceneInstance

DEFAULT_TABLE_HEIGHT = 0.75


@dataclass(frozen=True)
class PlacedObject:
    instance_id: str
    model_id: str
    pose: Pose


@dataclass(frozen=True)
class GroundTruthScene:
    intrinsics: CameraIntrinsics
    extrinsic: Pose
    table_height: float
    objects: tuple[PlacedObject, ...]
    table_bounds: tuple[float, float, float, float] = (-0.3, 0.3, -0.3, 0.3)  # xmin, xmax, ymin, ymax
    proximity: tuple[tuple[str, str, str], ...] = ()
    scene_id: str = "scene"

    def __post_init__(self):
        ids = [o.instance_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("instance_ids must be unique")
        if not np.isfinite(self.table_height):
            raise ValueError("table_height must be finite")
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "proximity", tuple(tuple(p) for p in self.proximity))

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def instance(self) -> SceneInstance:
        return SceneInstance([(o.model_id, o.pose) for o in self.objects], self.extrinsic)

    def poses(self) -> dict[str, tuple[str, Pose]]:
        return {o.instance_id: (o.model_id, o.pose) for o in self.objects}

    def with_objects(self, objects: Sequence[PlacedObject], **kw) -> "GroundTruthScene":
        d = dict(intrinsics=self.intrinsics, extrinsic=self.extrinsic, table_height=self.table_height,
                 objects=tuple(objects), table_bounds=self.table_bounds, proximity=self.proximity,
                 scene_id=self.scene_id)
        d.update(kw)
        return GroundTruthScene(**d)

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "camera": {"intrinsics": self.intrinsics.to_dict(), "extrinsic": self.extrinsic.to_dict()},
            "table_height": self.table_height,
            "table_bounds": list(self.table_bounds),
            "objects": [
                {"instance_id": o.instance_id, "model_id": o.model_id, "pose": o.pose.to_dict()}
                for o in self.objects
            ],
            "proximity": [list(p) for p in self.proximity],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthScene":
        cam = d["camera"]
        return cls(
            intrinsics=CameraIntrinsics.from_dict(cam["intrinsics"]),
            extrinsic=Pose.from_dict(cam["extrinsic"]),
            table_height=float(d["table_height"]),
            objects=tuple(
                PlacedObject(o["instance_id"], o["model_id"], Pose.from_dict(o["pose"]))
                for o in d["objects"]
            ),
            table_bounds=tuple(d.get("table_bounds", (-0.3, 0.3, -0.3, 0.3))),
            proximity=tuple(tuple(p) for p in d.get("proximity", ())),
            scene_id=d.get("scene_id", "scene"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GroundTruthScene":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_camera(table_height: float = DEFAULT_TABLE_HEIGHT, distance: float = 0.75,
                   elevation_deg: float = 50.0) -> Pose:
    """Camera in front of the table looking down at its center."""
    el = np.radians(elevation_deg)
    eye = [0.0, -distance * np.cos(el), table_height + distance * np.sin(el)]
    return look_at(eye, [0.0, 0.0, table_height])
