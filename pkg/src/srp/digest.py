"""DIGEST: detection-seeded particle filtering over object poses.

Each scene hypothesis is filtered by iterated likelihood weighting against the
single observed depth image: score every particle by rendering it, normalize,
systematically resample and diffuse with zero-mean Gaussian noise. A particle's
distance is the mean depth error over rendered object pixels, where observed
pixels inside the active object's detection box that nothing rendered covers
count as missing. Without that term an object can hide behind a frozen one and
score as well as the frozen objects alone. Objects are
estimated one at a time in order of detection confidence; earlier objects stay
frozen at their best pose while later ones are left out of the render.

Randomness is drawn from counter-based Philox streams keyed by
``(seed, hypothesis, purpose, counter)``. Particle scoring is deterministic, so
results do not depend on how many worker threads score particles.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .detect import (Detection, DetectionError, SceneHypothesis, enumerate_hypotheses,
                     make_candidates)
from .geometry import (CameraIntrinsics, DepthImage, ModelInfo, Pose, axis_angle_to_quat,
                       quat_mul, quat_normalize, quat_to_matrix, random_unit_quats)
from .render import SceneInstance, rasterize, score_particles, zbuf_to_depth

log = logging.getLogger(__name__)

_INIT, _RESAMPLE, _RETRY = 0, 1, 2


class LikelihoodCollapse(RuntimeError):
    """Every particle has zero weight."""


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 625
    n_iterations: int = 400
    lambda_r: float = 20.0  # 1/m
    sigma_pos: float = 0.01  # m
    sigma_rot: float = 0.05  # rad
    missing_penalty: float = 0.10  # m
    upright_only: bool = False

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        for name in ("lambda_r", "missing_penalty"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("sigma_pos", "sigma_rot"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox stream for ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


# --------------------------------------------------------------------------
# likelihood
# --------------------------------------------------------------------------

def distance(observed: DepthImage, rendered: DepthImage, mask: np.ndarray,
             cam: CameraIntrinsics, missing_penalty: float = 0.10, support: np.ndarray | None = None) -> float:
    """Mean 3D distance between observed and rendered points over rendered-object pixels.

    With a boolean ``support`` (detection boxes), observed pixels inside it that no
    rendered object covers also cost ``missing_penalty`` each.
    """
    if observed.data.shape != rendered.data.shape or mask.shape != observed.data.shape:
        raise ValueError("observed, rendered and mask must have the same size")
    sel = mask >= 0
    n = int(sel.sum())
    extra = 0
    if support is not None:
        if support.shape != mask.shape:
            raise ValueError("support must match the image size")
        extra = int((support & ~sel & (observed.data > 0)).sum())
    if n + extra == 0:
        return float(missing_penalty)
    zo = observed.data[sel]
    zr = rendered.data[sel]
    cost = np.where(zo > 0, np.abs(zo - zr) * cam.ray_norms()[sel], missing_penalty)
    return float((cost.sum() + extra * missing_penalty) / (n + extra))


def weight(d, lambda_r: float):
    return np.exp(-lambda_r * np.asarray(d, dtype=float)) if np.ndim(d) else math.exp(-lambda_r * d)


def scene_distance(observed: DepthImage, objects: Sequence[tuple[str, Pose]], cam: CameraIntrinsics,
                   extrinsic: Pose, registry: Mapping[str, ModelInfo], missing_penalty: float,
                   support: np.ndarray | None = None) -> float:
    """Reference path: full render of all objects, then :func:`distance`."""
    zbuf, mask = rasterize(SceneInstance(list(objects), extrinsic), cam, registry)
    return distance(observed, zbuf_to_depth(zbuf), mask, cam, missing_penalty, support)


def bbox_support(bboxes: Sequence[tuple[int, int, int, int]], shape: tuple[int, int]) -> np.ndarray:
    """Boolean image that is true inside any of the (x, y, w, h) boxes."""
    out = np.zeros(shape, dtype=bool)
    for x, y, w, h in bboxes:
        out[max(y, 0):y + h, max(x, 0):x + w] = True
    return out


# --------------------------------------------------------------------------
# particles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Particle:
    poses: tuple[Pose, ...]
    weight: float


@dataclass
class ParticleSet:
    """Particles as arrays: ``positions`` (N, K, 3), ``quats`` (N, K, 4), ``weights`` (N,)."""

    positions: np.ndarray
    quats: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def n_objects(self) -> int:
        return self.positions.shape[1]

    def pose(self, i: int, k: int) -> Pose:
        return Pose(self.positions[i, k], self.quats[i, k])

    def particle(self, i: int) -> Particle:
        return Particle(tuple(self.pose(i, k) for k in range(self.n_objects)), float(self.weights[i]))

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.positions.copy(), self.quats.copy(), self.weights.copy())


def _sample_object(cand, observed: DepthImage, cam: CameraIntrinsics, extrinsic: Pose,
                   cfg: FilterConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = cfg.n_particles
    x, y, w, h = cand.bbox
    u = rng.uniform(x, x + w, n)
    v = rng.uniform(y, y + h, n)
    patch = observed.data[y:y + h, x:x + w]
    valid = patch[patch > 0]
    lo, hi = (valid.min(), valid.max()) if valid.size else (cam.near, cam.far)
    d = rng.uniform(lo, hi, n)
    pc = np.column_stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d])
    positions = extrinsic.apply(pc)
    if cfg.upright_only:
        quats = quat_normalize(axis_angle_to_quat([0.0, 0.0, 1.0], rng.uniform(0, 2 * np.pi, n)))
    else:
        quats = random_unit_quats(rng, n)
    return positions, quats


def init_particles(hyp: SceneHypothesis, observed: DepthImage, cam: CameraIntrinsics, extrinsic: Pose,
                   cfg: FilterConfig, seed: int, hyp_index: int = 0) -> ParticleSet:
    """Uniform initialization inside each candidate's bounding-box frustum."""
    if len(hyp) == 0:
        raise DetectionError("empty hypothesis")
    n, k = cfg.n_particles, len(hyp)
    pos = np.empty((n, k, 3))
    quats = np.empty((n, k, 4))
    for j, cand in enumerate(hyp.candidates):
        pos[:, j], quats[:, j] = _sample_object(cand, observed, cam, extrinsic, cfg,
                                                stream(seed, hyp_index, _INIT, j))
    return ParticleSet(pos, quats, np.full(n, 1.0 / n))


def normalize_weights(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    total = w.sum()
    if not total > 0 or not np.isfinite(total):
        raise LikelihoodCollapse("all particle weights are zero")
    return w / total


def systematic_resample(weights: np.ndarray, offset: float) -> np.ndarray:
    """Indices drawn with one uniform ``offset`` in [0, 1) and N evenly spaced probes."""
    n = len(weights)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    probes = (np.arange(n) + offset) / n
    return np.minimum(np.searchsorted(cdf, probes, side="right"), n - 1)


def diffuse_rotations(quats: np.ndarray, sigma: float, upright: bool, rng: np.random.Generator) -> np.ndarray:
    n = len(quats)
    angles = rng.normal(0.0, sigma, n)
    if upright:
        axes = np.tile([0.0, 0.0, 1.0], (n, 1))
    else:
        axes = rng.standard_normal((n, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    return quat_normalize(quat_mul(axis_angle_to_quat(axes, angles), quats))


def resample_diffuse(ps: ParticleSet, active: int, cfg: FilterConfig,
                     rng: np.random.Generator | int) -> ParticleSet:
    """Normalize, systematically resample, and diffuse only the ``active`` object."""
    if not isinstance(rng, np.random.Generator):
        rng = stream(int(rng))
    w = normalize_weights(ps.weights)
    idx = systematic_resample(w, rng.random())
    n = len(idx)
    pos = ps.positions[idx].copy()
    quats = ps.quats[idx].copy()
    pos[:, active] += rng.normal(0.0, 1.0, (n, 3)) * cfg.sigma_pos
    quats[:, active] = diffuse_rotations(quats[:, active], cfg.sigma_rot, cfg.upright_only, rng)
    return ParticleSet(pos, quats, np.full(n, 1.0 / n))


def block_schedule(n_iterations: int, n_objects: int) -> list[tuple[int, int]]:
    """Contiguous iteration blocks, one per object; the last absorbs the remainder."""
    size = n_iterations // n_objects
    if size == 0:
        raise ValueError("fewer iterations than objects")
    bounds = [k * size for k in range(n_objects)] + [n_iterations]
    return [(bounds[k], bounds[k + 1]) for k in range(n_objects)]


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------

class Scorer:
    """Scores particles for one active object against a fixed background of frozen objects."""

    def __init__(self, observed: DepthImage, cam: CameraIntrinsics, extrinsic: Pose,
                 registry: Mapping[str, ModelInfo], cfg: FilterConfig, pool: ThreadPoolExecutor | None = None,
                 threads: int = 1):
        if observed.width != cam.width or observed.height != cam.height:
            raise ValueError("observed depth does not match camera size")
        self.observed = np.ascontiguousarray(observed.data)
        self.cam = cam
        self.extrinsic = extrinsic
        self.registry = registry
        self.cfg = cfg
        self.pool = pool
        self.threads = max(1, threads)
        self.ray_norm = cam.ray_norms()
        self.support = np.zeros((cam.height, cam.width), dtype=bool)
        cam_inv = extrinsic.inverse()
        self._r_cw = cam_inv.rotation
        self._t_cw = cam_inv.position
        self.set_background([])

    def set_background(self, objects: Sequence[tuple[str, Pose]], support: np.ndarray | None = None) -> None:
        """Freeze ``objects``; ``support`` marks pixels the active object should explain."""
        zbuf, mask = rasterize(SceneInstance(list(objects), self.extrinsic), self.cam, self.registry)
        sel = mask >= 0
        cost = np.where(self.observed > 0, np.abs(self.observed - np.where(sel, zbuf, 0.0)) * self.ray_norm,
                        self.cfg.missing_penalty)
        cost = np.where(sel, cost, 0.0)
        self.base_z = zbuf
        self.base_cost = cost
        self.base_sum = float(cost.sum())
        self.base_count = int(sel.sum())
        if support is not None:
            self.support = np.ascontiguousarray(support & ~sel & (self.observed > 0))
        else:
            self.support = np.zeros_like(sel)
        self.n_unexplained = int(self.support.sum())

    def distances(self, model_id: str, positions: np.ndarray, quats: np.ndarray) -> np.ndarray:
        info = self.registry[model_id]
        rots = np.ascontiguousarray(self._r_cw @ quat_to_matrix(quats))
        trans = np.ascontiguousarray(positions @ self._r_cw.T + self._t_cw)
        n = len(positions)
        out = np.empty(n)
        c = self.cam
        args = (info.mesh.vertices, info.mesh.triangles, rots, trans)
        tail = (c.fx, c.fy, c.cx, c.cy, c.near, c.far, self.base_z, self.base_cost, self.base_sum,
                self.base_count, self.observed, self.ray_norm, self.cfg.missing_penalty, self.support, self.n_unexplained, out)
        if self.pool is None or self.threads == 1:
            score_particles(*args, 0, n, *tail)
        else:
            edges = np.linspace(0, n, self.threads + 1).astype(int)
            futs = [self.pool.submit(score_particles, *args, int(a), int(b), *tail)
                    for a, b in zip(edges[:-1], edges[1:]) if b > a]
            for f in futs:
                f.result()
        return out


# --------------------------------------------------------------------------
# estimation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneEstimate:
    hypothesis: SceneHypothesis
    poses: tuple[Pose, ...]
    log_likelihood: float
    hyp_index: int = 0

    def __post_init__(self):
        if len(self.poses) != len(self.hypothesis):
            raise ValueError("one pose per hypothesis candidate required")

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.hypothesis.candidates]

    def instance_ids(self) -> list[str]:
        """Instance names derived from labels (``can``, ``can_2``, ...)."""
        seen: dict[str, int] = {}
        out = []
        for label in self.labels:
            seen[label] = seen.get(label, 0) + 1
            out.append(label if seen[label] == 1 else f"{label}_{seen[label]}")
        return out

    def objects(self) -> list[tuple[str, Pose]]:
        return list(zip(self.labels, self.poses))


def resolve_threads(threads: int | None) -> int:
    return max(1, threads if threads else (os.cpu_count() or 1))


def estimate_hypothesis(hyp: SceneHypothesis, observed: DepthImage, cam: CameraIntrinsics, extrinsic: Pose,
                        registry: Mapping[str, ModelInfo], cfg: FilterConfig, seed: int, hyp_index: int = 0,
                        threads: int | None = 1,
                        callback: Callable[[dict], None] | None = None) -> SceneEstimate:
    threads = resolve_threads(threads)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return _estimate(hyp, observed, cam, extrinsic, registry, cfg, seed, hyp_index,
                             Scorer(observed, cam, extrinsic, registry, cfg, pool, threads), callback)
    return _estimate(hyp, observed, cam, extrinsic, registry, cfg, seed, hyp_index,
                     Scorer(observed, cam, extrinsic, registry, cfg), callback)


def _estimate(hyp, observed, cam, extrinsic, registry, cfg, seed, hyp_index, scorer, callback):
    k_total = len(hyp)
    labels = [c.label for c in hyp.candidates]
    for label in labels:
        registry[label]  # fail early on unknown models
    initial = init_particles(hyp, observed, cam, extrinsic, cfg, seed, hyp_index)
    ps = initial.copy()
    frozen: list[Pose] = []
    for k, (start, stop) in enumerate(block_schedule(cfg.n_iterations, k_total)):
        scorer.set_background(list(zip(labels[:k], frozen)),
                              bbox_support([hyp.candidates[k].bbox], observed.data.shape))
        ps.positions[:, k] = initial.positions[:, k]
        ps.quats[:, k] = initial.quats[:, k]
        for t in range(start, stop):
            d = scorer.distances(labels[k], ps.positions[:, k], ps.quats[:, k])
            w = weight(d, cfg.lambda_r)
            if not w.sum() > 0:
                log.warning("likelihood collapse at iteration %d; re-initializing object %d", t, k)
                ps.positions[:, k], ps.quats[:, k] = _sample_object(
                    hyp.candidates[k], observed, cam, extrinsic, cfg, stream(seed, hyp_index, _RETRY, t))
                d = scorer.distances(labels[k], ps.positions[:, k], ps.quats[:, k])
                w = weight(d, cfg.lambda_r)
                if not w.sum() > 0:
                    raise LikelihoodCollapse(f"hypothesis {hyp_index}: collapse persists at iteration {t}")
            ps.weights = w
            if callback is not None:
                callback({"iteration": t, "object": k, "distances": d, "weights": normalize_weights(w)})
            if t == stop - 1:
                best = int(np.argmax(w))
                frozen.append(ps.pose(best, k))
                ps.positions[:, k] = ps.positions[best, k]
                ps.quats[:, k] = ps.quats[best, k]
            else:
                ps = resample_diffuse(ps, k, cfg, stream(seed, hyp_index, _RESAMPLE, t))
    support = bbox_support([c.bbox for c in hyp.candidates], observed.data.shape)
    d_joint = scene_distance(observed, list(zip(labels, frozen)), cam, extrinsic, registry, cfg.missing_penalty,
                             support)
    return SceneEstimate(hyp, tuple(frozen), -cfg.lambda_r * d_joint, hyp_index)


@dataclass
class DigestResult:
    best: SceneEstimate
    estimates: list[SceneEstimate]
    size_mismatch: bool
    timing_s: float = 0.0

    def table(self) -> list[dict]:
        return [
            {
                "index": e.hyp_index,
                "candidates": list(e.hypothesis.indices),
                "labels": e.labels,
                "size": len(e.hypothesis),
                "confidence_sum": e.hypothesis.confidence_sum,
                "log_likelihood": e.log_likelihood,
            }
            for e in self.estimates
        ]


def rank_estimates(estimates: Sequence[SceneEstimate]) -> SceneEstimate:
    return max(estimates, key=lambda e: (e.log_likelihood, e.hypothesis.confidence_sum, -e.hyp_index))


def digest(observed: DepthImage, detections: Sequence[Detection], n_objects: int, cam: CameraIntrinsics,
           extrinsic: Pose, registry: Mapping[str, ModelInfo], cfg: FilterConfig = FilterConfig(),
           seed: int = 0, threads: int | None = 1, max_hypotheses: int | None = None) -> DigestResult:
    """Estimate every scene hypothesis and return the most likely one."""
    if not detections:
        raise DetectionError("no detections")
    t0 = time.perf_counter()
    hyps = enumerate_hypotheses(make_candidates(detections), n_objects, max_hypotheses)
    threads = resolve_threads(threads)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        scorer_args = (observed, cam, extrinsic, registry, cfg, pool, threads)
        estimates = []
        for i, h in enumerate(hyps):
            log.info("hypothesis %d/%d: %s", i + 1, len(hyps), [c.label for c in h.candidates])
            estimates.append(_estimate(h, observed, cam, extrinsic, registry, cfg, seed, i,
                                       Scorer(*scorer_args), None))
    finally:
        if pool is not None:
            pool.shutdown()
    # hypotheses smaller than n_objects are still ranked on the same mean distance
    partial = any(len(h) != n_objects for h in hyps)
    return DigestResult(rank_estimates(estimates), estimates, partial, time.perf_counter() - t0)


def estimate_to_dict(result: DigestResult, scene_id: str = "scene") -> dict:
    best = result.best
    return {
        "scene_id": scene_id,
        "objects": [
            {"instance_id": i, "model_id": m, "pose": p.to_dict()}
            for i, m, p in zip(best.instance_ids(), best.labels, best.poses)
        ],
        "log_likelihood": best.log_likelihood,
        "hypothesis": best.hyp_index,
        "size_mismatch": result.size_mismatch,
        "hypotheses": result.table(),
    }


def save_estimate(path, result: DigestResult, scene_id: str = "scene") -> None:
    Path(path).write_text(json.dumps(estimate_to_dict(result, scene_id), indent=2) + "\n")


def load_estimate(path) -> tuple[str, dict[str, tuple[str, Pose]]]:
    """(scene_id, instance_id -> (model_id, pose)) from an estimate file."""
    doc = json.loads(Path(path).read_text())
    return doc.get("scene_id", "scene"), {
        o["instance_id"]: (o["model_id"], Pose.from_dict(o["pose"])) for o in doc["objects"]}
