import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from srp.detect import Candidate, Detection, SceneHypothesis, detect_synthetic, NoiseConfig
from srp.digest import (FilterConfig, LikelihoodCollapse, ParticleSet, Scorer, block_schedule, digest, distance,
                        estimate_hypothesis, estimate_to_dict, init_particles, load_estimate, normalize_weights,
                        resample_diffuse, save_estimate, bbox_support, scene_distance, stream, systematic_resample, weight)
from srp.geometry import DepthImage, Pose, axis_angle_to_quat, pose_error
from srp.render import SceneInstance, render_depth, render_with_mask
from srp.scene import GroundTruthScene, PlacedObject


# ---- likelihood ----------------------------------------------------------

def test_weight_analytic_values():
    assert weight(0.0, 20.0) == 1.0
    assert abs(weight(math.log(2), 1.0) - 0.5) < 1e-12
    assert abs(weight(0.1, 20.0) - math.exp(-2)) < 1e-15


@given(st.floats(0.1, 500), st.floats(0, 1), st.floats(1e-6, 1))
def test_weight_strictly_decreasing(lam, d, step):
    assert weight(d + step, lam) < weight(d, lam)
    assert abs(weight(math.log(2) / lam, lam) - 0.5) < 1e-12


@given(st.floats(1e-3, 1), st.floats(0.1, 100), st.floats(1.01, 10))
def test_weight_decreases_with_lambda(d, lam, factor):
    assert weight(d, lam * factor) < weight(d, lam)


def test_distance_hand_example(cam):
    obs = np.zeros((cam.height, cam.width))
    ren = np.zeros_like(obs)
    mask = np.full(obs.shape, -1)
    c = (int(cam.cy), int(cam.cx))
    r = cam.ray_norms()
    obs[c], ren[c], mask[c] = 1.0, 1.25, 0
    obs[c[0], c[1] + 1], ren[c[0], c[1] + 1], mask[c[0], c[1] + 1] = 0.0, 1.0, 0  # missing reading
    d = distance(DepthImage(obs), DepthImage(ren), mask, cam, missing_penalty=0.1)
    assert np.isclose(d, (0.25 * r[c] + 0.1) / 2, rtol=0, atol=1e-15)


def test_distance_counts_unexplained_support_pixels(cam):
    obs = np.zeros((cam.height, cam.width))
    obs[10, 10:14] = 1.0
    ren = np.zeros_like(obs)
    mask = np.full(obs.shape, -1)
    ren[10, 10], mask[10, 10] = 1.0, 0
    support = bbox_support([(10, 10, 3, 1)], obs.shape)  # covers three observed pixels, one rendered
    d = distance(DepthImage(obs), DepthImage(ren), mask, cam, 0.1, support)
    assert np.isclose(d, (0.0 + 2 * 0.1) / 3)
    # nothing rendered: every observed pixel in the box is unexplained
    empty = np.full(obs.shape, -1)
    assert np.isclose(distance(DepthImage(obs), DepthImage(np.zeros_like(obs)), empty, cam, 0.1, support), 0.1)


def test_distance_empty_mask_and_size_check(cam):
    z = DepthImage.empty(cam)
    assert distance(z, z, np.full((cam.height, cam.width), -1), cam, 0.07) == 0.07
    with pytest.raises(ValueError):
        distance(z, DepthImage(np.zeros((3, 3))), np.full((3, 3), -1), cam)


def test_fast_scorer_matches_reference_render(registry, cam, extrinsic, rng):
    truth = [("mug", Pose([0.03, 0.02, 0.80], axis_angle_to_quat([0, 0, 1], 0.4))),
             ("can", Pose([-0.08, 0.06, 0.81]))]
    obs = render_depth(SceneInstance(truth, extrinsic), cam, registry)
    cfg = FilterConfig(n_particles=40)
    sc = Scorer(obs, cam, extrinsic, registry, cfg)
    background = [("block", Pose([0.1, -0.05, 0.775], axis_angle_to_quat([0, 0, 1], 1.0)))]
    support = bbox_support([(60, 40, 30, 30)], obs.data.shape)
    sc.set_background(background, support)
    pos = np.array([0.0, 0.0, 0.8]) + rng.normal(0, 0.05, (40, 3))
    q = axis_angle_to_quat(np.tile([0, 0, 1.0], (40, 1)), rng.uniform(0, 6, 40))
    q[::3] = rng.standard_normal((len(q[::3]), 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    fast = sc.distances("mug", pos, q)
    ref = [scene_distance(obs, background + [("mug", Pose(p, qq))], cam, extrinsic, registry, 0.1, support)
           for p, qq in zip(pos, q)]
    assert np.allclose(fast, ref, atol=1e-9)


# ---- particle machinery --------------------------------------------------

@given(st.lists(st.floats(0, 1), min_size=1, max_size=50).filter(lambda w: sum(w) > 0), st.floats(0, 0.999))
def test_systematic_resample_counts(w, offset):
    w = normalize_weights(np.array(w))
    idx = systematic_resample(w, offset)
    counts = np.bincount(idx, minlength=len(w))
    n = len(w)
    # each index is drawn floor(N w) or ceil(N w) times
    assert np.all(counts >= np.floor(n * w - 1e-9)) and np.all(counts <= np.ceil(n * w + 1e-9))
    assert counts.sum() == n


@given(st.lists(st.floats(1e-300, 1e3), min_size=1, max_size=100))
def test_normalized_weights_sum_to_one(w):
    assert abs(normalize_weights(np.array(w)).sum() - 1.0) <= 1e-9


def test_normalize_rejects_collapse():
    with pytest.raises(LikelihoodCollapse):
        normalize_weights(np.zeros(5))


@given(st.integers(1, 2000), st.integers(1, 12))
def test_block_schedule_partitions(t, k):
    if t < k:
        with pytest.raises(ValueError):
            block_schedule(t, k)
        return
    blocks = block_schedule(t, k)
    assert blocks[0][0] == 0 and blocks[-1][1] == t
    assert all(a[1] == b[0] for a, b in zip(blocks, blocks[1:]))
    assert all(stop - start == t // k for start, stop in blocks[:-1])


def test_block_schedule_four_objects():
    assert block_schedule(400, 4) == [(0, 100), (100, 200), (200, 300), (300, 400)]


def test_streams_are_reproducible_and_distinct():
    assert stream(1, 0, 1, 5).random() == stream(1, 0, 1, 5).random()
    assert stream(1, 0, 1, 5).random() != stream(1, 0, 1, 6).random()
    assert stream(1, 0, 1, 5).random() != stream(2, 0, 1, 5).random()


def test_resample_diffuse_only_moves_active_object(rng):
    n, k = 30, 3
    ps = ParticleSet(rng.normal(size=(n, k, 3)), axis_angle_to_quat(np.tile([0, 0, 1.0], (n, k, 1)),
                                                                      rng.uniform(0, 6, (n, k))),
                     rng.uniform(0.1, 1, n))
    out = resample_diffuse(ps, 1, FilterConfig(upright_only=True), 3)
    rows = {tuple(np.round(r, 12)) for r in ps.positions[:, 0]}
    assert all(tuple(np.round(r, 12)) in rows for r in out.positions[:, 0])
    assert not np.allclose(np.sort(out.positions[:, 1], 0), np.sort(ps.positions[:, 1], 0))
    # upright diffusion rotates about world z only
    assert np.allclose(out.quats[:, 1, 1:3], 0, atol=1e-12)
    assert np.allclose(out.weights, 1 / n)


def test_init_particles_project_into_bbox(cam, extrinsic, registry):
    obs = render_depth(SceneInstance([("can", Pose([0, 0, 0.81]))], extrinsic), cam, registry)
    hyp = SceneHypothesis((Candidate("can", 1.0, (70, 50, 15, 20), 0),))
    ps = init_particles(hyp, obs, cam, extrinsic, FilterConfig(n_particles=200), seed=3)
    pc = extrinsic.inverse().apply(ps.positions[:, 0])
    u = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
    v = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
    assert np.all((u >= 70 - 1e-9) & (u <= 85 + 1e-9) & (v >= 50 - 1e-9) & (v <= 70 + 1e-9))
    assert np.isclose(ps.weights.sum(), 1.0)


# ---- filtering -----------------------------------------------------------

@pytest.fixture(scope="module")
def two_object_scene(registry):
    from srp.geometry import CameraIntrinsics
    from srp.scene import default_camera
    objs = (PlacedObject("block", "block", Pose([0.05, 0.02, 0.775], axis_angle_to_quat([0, 0, 1], 0.7))),
            PlacedObject("can", "can", Pose([-0.1, 0.05, 0.81])))
    return GroundTruthScene(CameraIntrinsics.default(), default_camera(), 0.75, objs)


def _small_cfg(**kw):
    return FilterConfig(n_particles=48, n_iterations=12, upright_only=True, **kw)


def test_filter_weights_normalized_every_iteration(two_object_scene, registry):
    sc = two_object_scene
    obs = render_depth(sc.instance(), sc.intrinsics, registry)
    hyp = SceneHypothesis(tuple(Candidate(c.label, c.confidence, c.bbox, c.index) for c in
                                __import__("srp.detect", fromlist=["make_candidates"]).make_candidates(
                                    detect_synthetic(sc, registry))))
    seen = []
    estimate_hypothesis(hyp, obs, sc.intrinsics, sc.extrinsic, registry, _small_cfg(), seed=1,
                        callback=lambda info: seen.append(info))
    assert [s["iteration"] for s in seen] == list(range(12))
    assert [s["object"] for s in seen] == [0] * 6 + [1] * 6
    assert all(abs(s["weights"].sum() - 1.0) <= 1e-9 for s in seen)


def test_output_independent_of_thread_count(two_object_scene, registry):
    sc = two_object_scene
    obs = render_depth(sc.instance(), sc.intrinsics, registry)
    dets = detect_synthetic(sc, registry)
    runs = [digest(obs, dets, 2, sc.intrinsics, sc.extrinsic, registry, _small_cfg(), seed=5, threads=t)
            for t in (1, 2, 8)]
    ref = runs[0].best
    for r in runs[1:]:
        assert r.best.log_likelihood == ref.log_likelihood
        assert all(np.array_equal(a.position, b.position) and np.array_equal(a.orientation, b.orientation)
                   for a, b in zip(r.best.poses, ref.poses))


def test_same_seed_same_result_different_seed_differs(two_object_scene, registry):
    sc = two_object_scene
    obs = render_depth(sc.instance(), sc.intrinsics, registry)
    dets = detect_synthetic(sc, registry)
    a = digest(obs, dets, 2, sc.intrinsics, sc.extrinsic, registry, _small_cfg(), seed=5)
    b = digest(obs, dets, 2, sc.intrinsics, sc.extrinsic, registry, _small_cfg(), seed=5)
    c = digest(obs, dets, 2, sc.intrinsics, sc.extrinsic, registry, _small_cfg(), seed=6)
    assert a.best.log_likelihood == b.best.log_likelihood
    assert not np.array_equal(a.best.poses[0].position, c.best.poses[0].position)


def test_likelihood_collapse_is_reported(two_object_scene, registry):
    sc = two_object_scene
    obs = render_depth(sc.instance(), sc.intrinsics, registry)
    dets = detect_synthetic(sc, registry)
    with pytest.raises(LikelihoodCollapse):
        digest(obs, dets, 2, sc.intrinsics, sc.extrinsic, registry, _small_cfg(lambda_r=1e6), seed=5)


def test_wrong_label_hypothesis_loses(two_object_scene, registry):
    sc = two_object_scene
    obs = render_depth(sc.instance(), sc.intrinsics, registry)
    real = detect_synthetic(sc, registry)
    decoy = Detection((5, 5, 20, 20), {"mug": 0.99})  # confident box over empty space
    cfg = FilterConfig(n_particles=60, n_iterations=20, upright_only=True)
    res = digest(obs, [decoy, real[1]], 1, sc.intrinsics, sc.extrinsic, registry, cfg, seed=2)
    assert len(res.estimates) == 2 and res.best.labels == ["can"]
    other = [e for e in res.estimates if e is not res.best][0]
    assert other.labels == ["mug"] and other.log_likelihood < res.best.log_likelihood
    assert pose_error(res.best.poses[0], sc.objects[1].pose, registry["can"])[0] < 0.05


def test_size_mismatch_flag(two_object_scene, registry):
    sc = two_object_scene
    obs = render_depth(sc.instance(), sc.intrinsics, registry)
    dets = detect_synthetic(sc, registry)[:1]
    res = digest(obs, dets, 2, sc.intrinsics, sc.extrinsic, registry, _small_cfg(), seed=1)
    assert res.size_mismatch and len(res.best.poses) == 1


def test_estimate_file_round_trip(tmp_path, two_object_scene, registry):
    sc = two_object_scene
    obs = render_depth(sc.instance(), sc.intrinsics, registry)
    res = digest(obs, detect_synthetic(sc, registry), 2, sc.intrinsics, sc.extrinsic, registry, _small_cfg(), 1)
    save_estimate(tmp_path / "e.json", res, "s1")
    sid, world = load_estimate(tmp_path / "e.json")
    assert sid == "s1" and sorted(world) == sorted(res.best.instance_ids())
    for i, m, p in zip(res.best.instance_ids(), res.best.labels, res.best.poses):
        assert world[i][0] == m and world[i][1].allclose(p, atol=1e-12)


def test_filter_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(n_particles=1)
    with pytest.raises(ValueError):
        FilterConfig(lambda_r=0)
