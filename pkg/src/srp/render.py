"""Deterministic software depth rasterizer.

Triangles are clipped against the near plane, projected with the pinhole model
and scan-converted at pixel centers. Depth is interpolated perspective-correctly
(1/z is affine in screen space). Ties in the z-buffer keep the earlier object.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numba
import numpy as np

from .geometry import CameraIntrinsics, DepthImage, ModelInfo, Pose

NO_OBJECT = -1


@dataclass(frozen=True)
class SceneInstance:
    objects: Sequence[tuple[str, Pose]]
    camera: Pose  # camera pose in world frame


@numba.njit(cache=True, nogil=True)
def _raster_tri(ax, ay, az, bx, by, bz, qx, qy, qz, fx, fy, cx, cy, near, far, obj, zbuf, mask):
    u0 = fx * ax / az + cx
    v0 = fy * ay / az + cy
    u1 = fx * bx / bz + cx
    v1 = fy * by / bz + cy
    u2 = fx * qx / qz + cx
    v2 = fy * qy / qz + cy
    area = (u1 - u0) * (v2 - v0) - (v1 - v0) * (u2 - u0)
    if abs(area) < 1e-12:
        return
    h, w = zbuf.shape
    umin = max(0, int(np.ceil(min(u0, u1, u2))))
    umax = min(w - 1, int(np.floor(max(u0, u1, u2))))
    vmin = max(0, int(np.ceil(min(v0, v1, v2))))
    vmax = min(h - 1, int(np.floor(max(v0, v1, v2))))
    inv = 1.0 / area
    iz0 = 1.0 / az
    iz1 = 1.0 / bz
    iz2 = 1.0 / qz
    for v in range(vmin, vmax + 1):
        for u in range(umin, umax + 1):
            b0 = ((u1 - u) * (v2 - v) - (v1 - v) * (u2 - u)) * inv
            if b0 < 0.0:
                continue
            b1 = ((u2 - u) * (v0 - v) - (v2 - v) * (u0 - u)) * inv
            if b1 < 0.0:
                continue
            b2 = 1.0 - b0 - b1
            if b2 < 0.0:
                continue
            z = 1.0 / (b0 * iz0 + b1 * iz1 + b2 * iz2)
            if z < near or z > far:
                continue
            if z < zbuf[v, u]:
                zbuf[v, u] = z
                if obj >= 0:
                    mask[v, u] = obj


@numba.njit(cache=True, nogil=True)
def _raster_mesh(pts, tris, fx, fy, cx, cy, near, far, obj, zbuf, mask):
    """Rasterize camera-frame vertices ``pts`` into ``zbuf``/``mask``."""
    poly = np.empty((4, 3))
    for t in range(tris.shape[0]):
        i0 = tris[t, 0]
        i1 = tris[t, 1]
        i2 = tris[t, 2]
        n_in = (pts[i0, 2] >= near) + (pts[i1, 2] >= near) + (pts[i2, 2] >= near)
        if n_in == 3:
            _raster_tri(pts[i0, 0], pts[i0, 1], pts[i0, 2], pts[i1, 0], pts[i1, 1], pts[i1, 2],
                        pts[i2, 0], pts[i2, 1], pts[i2, 2], fx, fy, cx, cy, near, far, obj, zbuf, mask)
            continue
        if n_in == 0:
            continue
        # Sutherland-Hodgman against z = near
        k = 0
        idx = (i0, i1, i2)
        for e in range(3):
            a = idx[e]
            b = idx[(e + 1) % 3]
            a_in = pts[a, 2] >= near
            b_in = pts[b, 2] >= near
            if a_in:
                poly[k, 0] = pts[a, 0]
                poly[k, 1] = pts[a, 1]
                poly[k, 2] = pts[a, 2]
                k += 1
            if a_in != b_in:
                s = (near - pts[a, 2]) / (pts[b, 2] - pts[a, 2])
                poly[k, 0] = pts[a, 0] + s * (pts[b, 0] - pts[a, 0])
                poly[k, 1] = pts[a, 1] + s * (pts[b, 1] - pts[a, 1])
                poly[k, 2] = near
                k += 1
        for j in range(1, k - 1):
            _raster_tri(poly[0, 0], poly[0, 1], poly[0, 2], poly[j, 0], poly[j, 1], poly[j, 2],
                        poly[j + 1, 0], poly[j + 1, 1], poly[j + 1, 2],
                        fx, fy, cx, cy, near, far, obj, zbuf, mask)


def _camera_from(pose: Pose, camera: Pose) -> tuple[np.ndarray, np.ndarray]:
    cam_inv = camera.inverse()
    r = cam_inv.rotation @ pose.rotation
    t = cam_inv.rotation @ pose.position + cam_inv.position
    return r, t


def rasterize(scene: SceneInstance, cam: CameraIntrinsics, registry: Mapping[str, ModelInfo],
              zbuf: np.ndarray | None = None, mask: np.ndarray | None = None,
              first_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Raw z-buffer (inf where empty) and object-index mask for a scene."""
    infos = [registry[mid] for mid, _ in scene.objects]  # KeyError on unknown model
    if zbuf is None:
        zbuf = np.full((cam.height, cam.width), np.inf)
    if mask is None:
        mask = np.full((cam.height, cam.width), NO_OBJECT, dtype=np.int32)
    for k, (info, (_, pose)) in enumerate(zip(infos, scene.objects)):
        r, t = _camera_from(pose, scene.camera)
        pts = np.ascontiguousarray(info.mesh.vertices @ r.T + t)
        _raster_mesh(pts, info.mesh.triangles, cam.fx, cam.fy, cam.cx, cam.cy,
                     cam.near, cam.far, first_index + k, zbuf, mask)
    return zbuf, mask


def zbuf_to_depth(zbuf: np.ndarray) -> DepthImage:
    return DepthImage(np.where(np.isfinite(zbuf), zbuf, 0.0))


def render_depth(scene: SceneInstance, cam: CameraIntrinsics, registry: Mapping[str, ModelInfo]) -> DepthImage:
    zbuf, _ = rasterize(scene, cam, registry)
    return zbuf_to_depth(zbuf)


def render_object_mask(scene: SceneInstance, cam: CameraIntrinsics, registry: Mapping[str, ModelInfo]) -> np.ndarray:
    """Index of the nearest object per pixel, ``NO_OBJECT`` (-1) where nothing is hit."""
    _, mask = rasterize(scene, cam, registry)
    return mask


def render_with_mask(scene: SceneInstance, cam: CameraIntrinsics,
                     registry: Mapping[str, ModelInfo]) -> tuple[DepthImage, np.ndarray]:
    zbuf, mask = rasterize(scene, cam, registry)
    return zbuf_to_depth(zbuf), mask


# --------------------------------------------------------------------------
# batched scoring kernel for the particle filter
# --------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def score_particles(verts, tris, rots, trans, start, stop,
                    fx, fy, cx, cy, near, far,
                    base_z, base_cost, base_sum, base_count,
                    observed, ray_norm, penalty, support, n_unexplained, out):
    """Mean depth-point distance for particles ``start:stop``.

    Each particle places one mesh (``rots[i]``, ``trans[i]`` map model to camera
    frame) in front of a fixed background z-buffer ``base_z`` whose object pixels
    already contribute ``base_sum`` over ``base_count`` pixels. Only pixels where
    the particle's mesh wins the depth test change the sum. The ``n_unexplained``
    pixels flagged in ``support`` (observed, no background object) each cost
    ``penalty`` unless the mesh covers them.
    """
    h, w = base_z.shape
    nv = verts.shape[0]
    pts = np.empty((nv, 3))
    zloc = np.full((h, w), np.inf)
    dummy = np.empty((1, 1), dtype=np.int32)
    for i in range(start, stop):
        umin = w
        umax = -1
        vmin = h
        vmax = -1
        clipped = False
        for j in range(nv):
            x = rots[i, 0, 0] * verts[j, 0] + rots[i, 0, 1] * verts[j, 1] + rots[i, 0, 2] * verts[j, 2] + trans[i, 0]
            y = rots[i, 1, 0] * verts[j, 0] + rots[i, 1, 1] * verts[j, 1] + rots[i, 1, 2] * verts[j, 2] + trans[i, 1]
            z = rots[i, 2, 0] * verts[j, 0] + rots[i, 2, 1] * verts[j, 1] + rots[i, 2, 2] * verts[j, 2] + trans[i, 2]
            pts[j, 0] = x
            pts[j, 1] = y
            pts[j, 2] = z
            if z < near:
                clipped = True
            else:
                u = fx * x / z + cx
                v = fy * y / z + cy
                umin = min(umin, int(np.floor(u)))
                umax = max(umax, int(np.ceil(u)))
                vmin = min(vmin, int(np.floor(v)))
                vmax = max(vmax, int(np.ceil(v)))
        if clipped:
            umin, umax, vmin, vmax = 0, w - 1, 0, h - 1
        umin = max(umin, 0)
        vmin = max(vmin, 0)
        umax = min(umax, w - 1)
        vmax = min(vmax, h - 1)
        total = base_sum
        count = base_count
        covered = 0
        if umin <= umax and vmin <= vmax:
            for v in range(vmin, vmax + 1):
                for u in range(umin, umax + 1):
                    zloc[v, u] = np.inf
            _raster_mesh(pts, tris, fx, fy, cx, cy, near, far, -1, zloc, dummy)
            for v in range(vmin, vmax + 1):
                for u in range(umin, umax + 1):
                    zr = zloc[v, u]
                    if zr < base_z[v, u]:
                        zo = observed[v, u]
                        if zo > 0.0:
                            c = abs(zo - zr) * ray_norm[v, u]
                        else:
                            c = penalty
                        if np.isfinite(base_z[v, u]):
                            total += c - base_cost[v, u]
                        else:
                            total += c
                            count += 1
                            if support[v, u]:
                                covered += 1
        total += penalty * (n_unexplained - covered)
        count += n_unexplained - covered
        if count > 0:
            out[i] = total / count
        else:
            out[i] = penalty
