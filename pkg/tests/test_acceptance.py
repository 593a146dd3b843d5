"""Acceptance criteria: one PASS/FAIL line per criterion, printed at the end of the run."""

import json
import time
from math import comb, log

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import oracle_plan_length, random_graphs, random_instance
from srp.bench import BenchConfig, generate_scene, generate_task, run_suite
from srp.cli import main
from srp.detect import Candidate, detect_synthetic, enumerate_hypotheses
from srp.digest import FilterConfig, block_schedule, digest, estimate_hypothesis, weight
from srp.pddl import parse_pddl
from srp.plan import emit_pddl, goal_atoms, grounded_state, plan_bfs, validate
from srp.render import render_depth
from srp.scenegraph import SceneGraph, check_invariants, derive_scene_graph
from srp.detect import SceneHypothesis, make_candidates

pytestmark = pytest.mark.slow

# Filter settings for the closed-loop runs. The generated scenes are all upright,
# so orientation is sampled about the vertical only; everything else is default
# (625 particles, 400 iterations, lambda_r = 20).
UPRIGHT = FilterConfig(upright_only=True)


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def test_1_hypothesis_count():
    t0 = time.perf_counter()
    bad = []
    for m in range(1, 9):
        cands = [Candidate("can", 1.0 - 0.01 * i, (0, 0, 1, 1), i) for i in range(m)]
        for n in range(1, m + 1):
            if len(enumerate_hypotheses(cands, n)) != comb(m, n):
                bad.append((m, n))
    fig3 = len(enumerate_hypotheses([Candidate("can", 0.9, (0, 0, 1, 1), i) for i in range(4)], 3))
    dt = time.perf_counter() - t0
    record(1, "hypothesis count", not bad and fig3 == 4 and dt < 1.0,
           f"C(m,N) exact for 1<=N<=m<=8 (mismatches {bad}), m=4,N=3 -> {fig3}, {dt * 1000:.1f} ms")


def test_2_likelihood_law():
    lam = 20.0
    ds = np.linspace(0, 1, 10001)
    w = weight(ds, lam)
    half = weight(log(2) / lam, lam)
    ok = weight(0.0, lam) == 1.0 and bool(np.all(np.diff(w) < 0)) and abs(half - 0.5) <= 1e-12
    record(2, "likelihood law", ok, f"weight(0)={weight(0.0, lam)}, strictly decreasing on 10001 points, "
                                    f"|weight(ln2/lambda)-0.5|={abs(half - 0.5):.1e}")


def test_3_filter_invariants(registry):
    scene, _ = generate_scene(registry, 4, 0.0, seed=21)
    obs = render_depth(scene.instance(), scene.intrinsics, registry)
    cands = make_candidates(detect_synthetic(scene, registry))
    hyp = SceneHypothesis(tuple(sorted(cands, key=lambda c: -c.confidence)))
    sums, objects = [], []

    def cb(info):
        sums.append(abs(info["weights"].sum() - 1.0))
        objects.append(info["object"])

    estimate_hypothesis(hyp, obs, scene.intrinsics, scene.extrinsic, registry, UPRIGHT, seed=5, callback=cb)
    blocks = [objects.count(k) for k in range(4)]
    partition = block_schedule(400, 4) == [(0, 100), (100, 200), (200, 300), (300, 400)]
    cfg = FilterConfig(upright_only=True, n_iterations=40)
    dets = detect_synthetic(scene, registry)
    runs = [digest(obs, dets, 4, scene.intrinsics, scene.extrinsic, registry, cfg, seed=9, threads=t).best
            for t in (1, 2, 8)]
    same = all(r.log_likelihood == runs[0].log_likelihood and
               all(np.array_equal(a.position, b.position) and np.array_equal(a.orientation, b.orientation)
                   for a, b in zip(r.poses, runs[0].poses)) for r in runs[1:])
    ok = len(sums) == 400 and max(sums) <= 1e-9 and blocks == [100] * 4 and partition and same
    record(3, "filter invariants", ok, f"max |sum w - 1| = {max(sums):.1e} over {len(sums)} iterations, "
                                       f"blocks {blocks}, threads 1/2/8 identical: {same}")


def test_4_closed_loop_recovery(registry):
    single = BenchConfig(n_scenes=20, n_objects=1, filter=UPRIGHT)
    rep1, _ = run_suite(single, seed=2024, registry=registry)
    acc1 = rep1.at(0.02, np.radians(15))
    triple = BenchConfig(n_scenes=10, n_objects=3, filter=UPRIGHT)
    rep3, _ = run_suite(triple, seed=2024, registry=registry)
    acc3 = rep3.at(0.04, np.radians(30))
    worst = max(list(rep1.timings.values()) + list(rep3.timings.values()))
    ok = acc1 >= 0.9 and acc3 >= 0.8 and worst <= 300
    record(4, "closed-loop recovery", ok,
           f"1-object {acc1:.2f} at (2 cm, 15 deg) [floor 0.90]; 3-object {acc3:.2f} at (4 cm, 30 deg) "
           f"[floor 0.80]; slowest scene {worst:.1f} s at 160x120 [limit 300 s]")


def test_5_scene_graph_closure(registry):
    equal = forest = 0
    n = 200
    for k in range(n):
        rng = np.random.default_rng(k)
        scene, intended = generate_scene(registry, int(rng.integers(2, 6)), 0.7, seed=k)
        g = derive_scene_graph(scene.poses(), registry, scene.table_height)
        equal += g.axioms == intended.axioms
        forest += not check_invariants(g)
    ok = equal >= 0.99 * n and forest == n
    record(5, "scene-graph closure", ok, f"derived == intended in {equal}/{n}; forest and clear duality hold "
                                         f"in {forest}/{n}")


def test_6_planner_optimality(registry):
    n = matched = valid = solved = 0
    seed = 0
    while n < 500:
        gi, gg = random_instance(seed)
        seed += 1
        state, goal = grounded_state(gi, gg, registry), goal_atoms(gg)
        expected = oracle_plan_length(state.objects, state.atoms, goal)
        if expected is None:
            continue
        n += 1
        r = plan_bfs(state, goal)
        solved += r.plan is not None
        matched += r.plan is not None and len(r.plan) == expected
        valid += r.plan is not None and validate(r.plan, state, goal).ok
    from test_plan import blocks_state
    inv = plan_bfs(blocks_state({"a": "b", "b": "table"}), {("on", "b", "a")})
    sus = plan_bfs(blocks_state({"c": "a", "a": "table", "b": "table"}), {("on", "a", "b"), ("on", "b", "c")})
    ok = matched == n and valid == n and len(inv.plan) == 4 and len(sus.plan) == 6
    record(6, "planner optimality", ok, f"BFS length == oracle optimum on {matched}/{n} solvable instances, "
                                        f"validate ok {valid}/{n}; inverted 2-stack {len(inv.plan)} actions, "
                                        f"Sussman {len(sus.plan)} actions")


def test_7_pddl_round_trip(registry):
    ok_count = 0
    errors = []
    for k in range(1000):
        rng = np.random.default_rng(10_000 + k)
        gi, gg = random_graphs(rng, int(rng.integers(1, 7)))
        domain, problem = emit_pddl(gi, gg, registry)
        try:
            _, prob = parse_pddl(domain, problem)
        except Exception as exc:  # any diagnostic is a failure
            errors.append(str(exc))
            continue
        ok_count += prob.state == grounded_state(gi, gg, registry) and prob.goal == goal_atoms(gg)
    record(7, "PDDL round trip", ok_count == 1000 and not errors,
           f"identity on {ok_count}/1000 random graph pairs, {len(errors)} diagnostics")


def test_8_end_to_end(registry, tmp_path):
    (tmp_path / "cfg.toml").write_text("[filter]\nupright_only = true\n")
    yes = {False: 0, True: 0}
    lengths = []
    true_goal = 0
    for k in range(10):
        task = generate_task(registry, 4 + k % 3, seed=100 + k)
        d = tmp_path / f"task{k}"
        d.mkdir()
        task.initial.save(d / "initial.json")
        task.goal.save(d / "goal.json")
        for bypass in (False, True):
            out = d / ("bypass" if bypass else "perceived")
            argv = ["run", "--config", str(tmp_path / "cfg.toml"), "--seed", str(k), "--threads", "1",
                    "--initial", str(d / "initial.json"), "--goal", str(d / "goal.json"), "--out-dir", str(out)]
            code = main(argv + (["--bypass-estimation"] if bypass else []))
            verdict = json.loads((out / "verdict.json").read_text()) if (out / "verdict.json").exists() else {}
            good = code == 0 and verdict.get("verdict") == "yes"
            yes[bypass] += good
            if not bypass:
                lengths.append(verdict.get("plan_length"))
                # informational: did the perceived run also reach the true goal relations?
                if (out / "final_graph.json").exists():
                    final = SceneGraph.load(out / "final_graph.json")
                    true_goal += goal_atoms(task.goal_graph) <= goal_atoms(final)
    ok = yes[False] >= 8 and yes[True] == 10
    record(8, "end-to-end srp run", ok, f"verdict yes {yes[False]}/10 with estimation [floor 8], "
                                        f"{yes[True]}/10 with ground-truth bypass [need 10]; "
                                        f"perceived runs reaching the ground-truth goal {true_goal}/10; "
                                        f"plan lengths {lengths}")
