"""Detections, object candidates and scene-hypothesis enumeration.

The learned detector is replaced by an oracle that reads the ground-truth
object mask and corrupts it with configurable noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import CameraIntrinsics, ModelInfo
from .render import render_object_mask
from .scene import GroundTruthScene


class DetectionError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    bbox: tuple[int, int, int, int]  # x, y, w, h in pixels
    scores: Mapping[str, float]

    def __post_init__(self):
        x, y, w, h = (int(v) for v in self.bbox)
        if w < 1 or h < 1 or x < 0 or y < 0:
            raise DetectionError(f"invalid bbox {self.bbox}")
        for label, c in self.scores.items():
            if not 0.0 <= c <= 1.0:
                raise DetectionError(f"confidence for {label!r} outside [0, 1]: {c}")
        object.__setattr__(self, "bbox", (x, y, w, h))
        object.__setattr__(self, "scores", dict(self.scores))

    def within(self, cam: CameraIntrinsics) -> bool:
        x, y, w, h = self.bbox
        return x + w <= cam.width and y + h <= cam.height

    def to_dict(self) -> dict:
        return {"bbox": list(self.bbox), "scores": dict(sorted(self.scores.items()))}


@dataclass(frozen=True)
class Candidate:
    label: str
    confidence: float
    bbox: tuple[int, int, int, int]
    index: int = 0  # position of the source detection


@dataclass(frozen=True)
class SceneHypothesis:
    candidates: tuple[Candidate, ...]

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def confidence_sum(self) -> float:
        return math.fsum(c.confidence for c in self.candidates)

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(c.index for c in self.candidates)


@dataclass(frozen=True)
class NoiseConfig:
    bbox_sigma: float = 0.0  # pixels
    label_noise: float = 0.0  # probability mass moved off the true label
    miss_rate: float = 0.0
    fp_rate: float = 0.0  # expected false positives per visible object
    min_pixels: int = 50
    n_distractors: int = 2


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    vs, us = np.nonzero(mask)
    return int(us.min()), int(vs.min()), int(us.max() - us.min() + 1), int(vs.max() - vs.min() + 1)


def _clip_bbox(x, y, w, h, cam: CameraIntrinsics) -> tuple[int, int, int, int]:
    x = int(np.clip(round(x), 0, cam.width - 1))
    y = int(np.clip(round(y), 0, cam.height - 1))
    w = int(np.clip(round(w), 1, cam.width - x))
    h = int(np.clip(round(h), 1, cam.height - y))
    return x, y, w, h


def visible_objects(scene: GroundTruthScene, registry: Mapping[str, ModelInfo],
                    min_pixels: int) -> list[tuple[int, np.ndarray]]:
    """(object index, boolean mask) for every object with at least ``min_pixels`` visible."""
    mask = render_object_mask(scene.instance(), scene.intrinsics, registry)
    out = []
    for k in range(scene.n_objects):
        m = mask == k
        if m.sum() >= min_pixels:
            out.append((k, m))
    return out


def detect_synthetic(scene: GroundTruthScene, registry: Mapping[str, ModelInfo],
                     noise: NoiseConfig = NoiseConfig(), seed: int = 0) -> list[Detection]:
    cam = scene.intrinsics
    rng = np.random.default_rng([seed, 0xD37EC7])
    labels = sorted(registry)
    dets: list[Detection] = []
    visible = visible_objects(scene, registry, noise.min_pixels)
    for k, m in visible:
        # draws happen unconditionally so one knob does not reshuffle the others
        miss = rng.random() < noise.miss_rate
        jitter = rng.normal(0.0, 1.0, 4) * noise.bbox_sigma
        true_label = scene.objects[k].model_id
        others = [l for l in labels if l != true_label]
        distract = list(rng.permutation(others)[: noise.n_distractors]) if others else []
        if miss:
            continue
        x, y, w, h = mask_bbox(m)
        bbox = _clip_bbox(x + jitter[0], y + jitter[1], w + jitter[2], h + jitter[3], cam)
        scores = {true_label: 1.0 - noise.label_noise}
        if noise.label_noise > 0 and distract:
            for l in distract:
                scores[l] = noise.label_noise / len(distract)
        dets.append(Detection(bbox, scores))
    n_fp = rng.poisson(noise.fp_rate * len(visible)) if noise.fp_rate > 0 else 0
    for _ in range(n_fp):
        w = int(rng.integers(8, max(9, cam.width // 4)))
        h = int(rng.integers(8, max(9, cam.height // 4)))
        x = int(rng.integers(0, cam.width - w + 1))
        y = int(rng.integers(0, cam.height - h + 1))
        dets.append(Detection(_clip_bbox(x, y, w, h, cam), {str(rng.choice(labels)): float(rng.uniform(0.2, 0.9))}))
    return dets


def make_candidates(detections: Sequence[Detection]) -> list[Candidate]:
    """One candidate per detection: the top-scoring label (ties -> smallest label)."""
    out = []
    for i, d in enumerate(detections):
        if not d.scores:
            raise DetectionError(f"detection {i} has no scores")
        label, conf = min(d.scores.items(), key=lambda kv: (-kv[1], kv[0]))
        out.append(Candidate(label, float(conf), d.bbox, i))
    return out


def enumerate_hypotheses(candidates: Sequence[Candidate], n_objects: int,
                         max_hypotheses: int | None = None) -> list[SceneHypothesis]:
    """All ``n_objects``-subsets of the candidates (or one hypothesis if too few).

    Each hypothesis lists its candidates by descending confidence; hypotheses are
    ordered by descending confidence sum, ties by candidate indices.
    """
    if n_objects < 1:
        raise DetectionError("n_objects must be >= 1")
    if not candidates:
        raise DetectionError("no candidates: cannot form a scene hypothesis")
    idx = range(len(candidates))
    subsets = combinations(idx, n_objects) if len(candidates) >= n_objects else [tuple(idx)]
    hyps = []
    for s in subsets:
        cands = sorted((candidates[i] for i in s), key=lambda c: (-c.confidence, c.index))
        hyps.append((s, SceneHypothesis(tuple(cands))))
    hyps.sort(key=lambda sh: (-sh[1].confidence_sum, sh[0]))
    out = [h for _, h in hyps]
    return out[:max_hypotheses] if max_hypotheses else out


def save_detections(path, detections: Sequence[Detection]) -> None:
    Path(path).write_text(json.dumps([d.to_dict() for d in detections], indent=2) + "\n")


def load_detections(path) -> list[Detection]:
    doc = json.loads(Path(path).read_text())
    return [Detection(tuple(d["bbox"]), d["scores"]) for d in doc]
