"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line with the measured numbers; the
lines are repeated in the terminal summary of the pytest run.
"""

import glob
import os
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import oracles
from sceneflow import CameraIntrinsics, DepthMap, RigidTransform, evaluate, static_flow, unproject
from sceneflow.cli import main
from sceneflow.icp import icp_flow, icp_register
from sceneflow.losses import (
    chamfer, chamfer_frozen, chamfer_grad, depth_consistency, depth_consistency_grad, ds_consistency,
    ds_consistency_grad, idw_interpolate_many, laplacian_coords, laplacian_reg, laplacian_reg_grad,
    laplacian_structure,
)
from sceneflow.neighbors import SpatialIndex
from sceneflow.optimizer import estimate_flow
from sceneflow.preprocess import PreprocessConfig, crop_ground_sky, crop_range, preprocess
from sceneflow.synth import aligned_card_scene, moving_box_scene, render

pytestmark = pytest.mark.acceptance

FD_STEP = 1e-4


def rel_err(g, fd):
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))


def random_depth_instance(r, n=64):
    h, w = 30, 40
    K = CameraIntrinsics(r.uniform(30, 60), r.uniform(30, 60), (w - 1) / 2, (h - 1) / 2)
    v, u = np.mgrid[0:h, 0:w].astype(float)
    a, b, c = r.uniform(0.1, 0.6, 3)
    D = DepthMap(r.uniform(3, 6) + a * np.sin(u / r.uniform(3, 8)) + b * np.cos(v / r.uniform(3, 8)) + c * u / w)
    uu, vv = r.uniform(2, w - 3, n), r.uniform(2, h - 3, n)
    z = r.uniform(2.5, 7.0, n)
    return K.rays(uu, vv) * z[:, None], D, K


def test_c1_gradient_correctness(criterion):
    r = np.random.default_rng(1)
    worst = {"depth": 0.0, "ds": 0.0, "chamfer": 0.0, "laplacian": 0.0}
    t0 = time.perf_counter()
    for _ in range(20):
        pts, D, K = random_depth_instance(r)
        fp = depth_consistency(pts, D, K).footprint
        g = depth_consistency_grad(pts, D, K, fp)
        fd = oracles.central_difference(lambda x: depth_consistency(x, D, K, fp).loss, pts, FD_STEP)
        worst["depth"] = max(worst["depth"], rel_err(g, fd))

        o, s, d = r.normal(scale=0.3, size=(3, 64, 3))
        go, gd = ds_consistency_grad(o, s, d)
        fo = oracles.central_difference(lambda x: ds_consistency(x, s, d)[0], o, FD_STEP)
        fdd = oracles.central_difference(lambda x: ds_consistency(o, s, x)[0], d, FD_STEP)
        worst["ds"] = max(worst["ds"], rel_err(go, fo), rel_err(gd, fdd))

        a, b = r.normal(size=(64, 3)), r.normal(size=(64, 3))
        t = chamfer(a, b)
        g = chamfer_grad(a, b, t.a_to_b, t.b_to_a)
        fd = oracles.central_difference(lambda x: chamfer_frozen(x, b, t.a_to_b, t.b_to_a), a, FD_STEP)
        worst["chamfer"] = max(worst["chamfer"], rel_err(g, fd))

        target = r.normal(size=(64, 3))
        flowed = target[r.permutation(64)] + r.normal(scale=0.1, size=(64, 3))
        st = laplacian_structure(flowed, target)
        g = laplacian_reg_grad(flowed, target, st)
        fd = oracles.central_difference(lambda x: laplacian_reg(x, target, structure=st).loss, flowed, FD_STEP)
        worst["laplacian"] = max(worst["laplacian"], rel_err(g, fd))
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion(max(worst.values()) < 1e-5 and elapsed < 30, f"max relative error {detail}; {elapsed:.1f} s")


def test_c2_loss_oracles(criterion):
    scenes = {
        "card moves (4,0)px": aligned_card_scene(shift_px=(4, 0), object_moves=True),
        "card moves (-3,2)px @2.5m": aligned_card_scene(80, 60, shift_px=(-3, 2), depth=2.5, object_moves=True),
        "camera moves (4,0)px": aligned_card_scene(shift_px=(4, 0), object_moves=False),
        "camera moves (2,-3)px @4m": aligned_card_scene(80, 60, shift_px=(2, -3), depth=4.0, object_moves=False),
    }
    worst_depth = worst_chamfer = worst_ds = 0.0
    for spec in scenes.values():
        res = render(spec)
        pc1 = res.pc1_exact.points
        flowed = pc1 + res.gt_flow
        term = depth_consistency(flowed, res.depth2, spec.intrinsics)
        seen = ~res.occlusion_mask & term.valid
        assert seen.sum() > 0.9 * len(pc1)
        worst_depth = max(worst_depth, float(np.sum(term.residuals[seen] ** 2, axis=1).max()))
        pc2 = unproject(res.depth2, spec.intrinsics).points
        worst_chamfer = max(worst_chamfer, chamfer(flowed, pc2).loss / (len(flowed) + len(pc2)))
        static = static_flow(pc1, res.gt_pose)
        worst_ds = max(worst_ds, ds_consistency(res.gt_flow, static, res.gt_flow - static)[0])

    # Informational only: a generic scene, where samples do not reproject onto pixel sites.
    gen = moving_box_scene()
    gres = render(gen)
    gq = gres.pc1_exact.points + gres.gt_flow
    gterm = depth_consistency(gq, gres.depth2, gen.intrinsics)
    gseen = ~gres.occlusion_mask & gterm.valid
    gpp = np.sum(gterm.residuals[gseen] ** 2, axis=1)
    gpc2 = unproject(gres.depth2, gen.intrinsics).points
    gch = chamfer(gq, gpc2).loss / (len(gq) + len(gpc2))
    ok = worst_depth < 1e-6 and worst_chamfer < 1e-4 and worst_ds == 0.0
    criterion(ok, f"{len(scenes)} pixel-aligned scenes: max depth/pt {worst_depth:.1e}, chamfer/pt "
                  f"{worst_chamfer:.1e}, ds {worst_ds}; generic moving-box scene for reference: "
                  f"median depth/pt {np.median(gpp):.1e}, chamfer/pt {gch:.1e}")


def test_c3_brute_force_equivalence(criterion):
    r = np.random.default_rng(3)
    mismatches = {"chamfer": 0, "knn": 0, "laplacian": 0, "idw": 0, "metrics": 0}
    for inst in range(50):
        n, m = int(r.integers(12, 201)), int(r.integers(12, 201))
        a = r.normal(size=(n, 3))
        b = r.normal(size=(m, 3))
        if inst % 5 == 0:
            a, b = np.round(a, 1), np.round(b, 1)
        mismatches["chamfer"] += chamfer(a, b).loss != oracles.chamfer(a, b)
        k = int(r.integers(1, 12))
        q = r.normal(size=(10, 3))
        ids, d = SpatialIndex(b).query(q, k)
        mismatches["knn"] += any(list(zip(ids[i].tolist(), d[i].tolist())) != oracles.knn(b, q[i], k) for i in range(len(q)))
        mismatches["laplacian"] += not np.array_equal(laplacian_coords(a, k=9), oracles.laplacian(a, 9))
        vals = r.normal(size=(m, 3))
        got = idw_interpolate_many(q, b, vals, k=9)
        mismatches["idw"] += any(not np.array_equal(got[i], oracles.idw(q[i], b, vals, 9)) for i in range(len(q)))
        gt = r.normal(scale=0.4, size=(n, 3))
        gt[: n // 10] = 0
        pred = gt + r.normal(scale=r.uniform(0.01, 0.3), size=gt.shape)
        rep = evaluate(pred, gt)
        mismatches["metrics"] += (rep.epe3d, rep.acc3d_strict, rep.acc3d_relax, rep.outliers3d) != oracles.metrics(pred, gt)
    criterion(not any(mismatches.values()), f"50 instances, mismatches {mismatches}")


def test_c4_icp_recovery(criterion):
    r = np.random.default_rng(4)
    ok_trials, worst_r, worst_t, monotone = 0, 0.0, 0.0, True
    for _ in range(100):
        pts = r.uniform(-2, 2, (300, 3))
        axis = r.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = Rotation.from_rotvec(axis * np.deg2rad(r.uniform(0, 10))).as_matrix()
        t = r.uniform(-0.5, 0.5, 3)
        res = icp_register(pts, RigidTransform(R, t).apply(pts))
        er = float(np.linalg.norm(res.transform.rotation - R))
        et = float(np.linalg.norm(res.transform.translation - t))
        mono = all(b <= a for a, b in zip(res.rms_history, res.rms_history[1:]))
        monotone &= mono
        worst_r, worst_t = max(worst_r, er), max(worst_t, et)
        ok_trials += er < 1e-6 and et < 1e-6 and mono
    criterion(ok_trials == 100, f"{ok_trials}/100 recovered, worst rotation {worst_r:.1e}, "
                                f"translation {worst_t:.1e} m, rms non-increasing: {monotone}")


def test_c5_optimizer_efficacy(criterion):
    spec = moving_box_scene()
    res = render(spec)
    K = spec.intrinsics
    cfg = PreprocessConfig()
    pc1, kept1 = preprocess(res.pc1_exact, cfg, res.gt_pose, res.depth2, K)
    pc2_full = unproject(res.depth2, K)
    pc2, _ = crop_range(crop_ground_sky(pc2_full, cfg)[0], cfg)
    gt = res.gt_flow[kept1]
    moving = res.moving_mask[kept1]
    t0 = time.perf_counter()
    est = estimate_flow(pc1, pc2, res.depth2, K, res.gt_pose)
    elapsed = time.perf_counter() - t0
    base = evaluate(est.static[moving], gt[moving]).epe3d
    final = evaluate(est.overall[moving], gt[moving]).epe3d
    reduction = 1 - final / base
    trace = est.loss_trace
    monotone = all(b.breakdown.total <= a.breakdown.total for a, b in zip(trace, trace[1:]) if a.level == b.level)
    ok = len(res.gt_flow) >= 2048 and reduction >= 0.5 and monotone and elapsed < 300
    criterion(ok, f"{len(res.gt_flow)} rendered / {len(pc1)} kept points, {moving.sum()} moving; moving EPE3D "
                  f"{base:.4f} -> {final:.4f} ({100 * reduction:.0f}% lower); monotone {monotone}; {elapsed:.1f} s")


def test_c6_metric_definitions(criterion):
    checks = []
    r = evaluate([[1.2, 0, 0]], [[1.0, 0, 0]])
    checks.append((r.acc3d_strict, r.acc3d_relax, r.outliers3d) == (0.0, 0.0, 1.0))
    r = evaluate([[0, 0, 0], [0, 0, 0]], np.zeros((2, 3)))
    checks.append((r.epe3d, r.acc3d_strict, r.acc3d_relax, r.outliers3d) == (0.0, 1.0, 1.0, 0.0))
    r = evaluate([[0.2, 0, 0]], [[0, 0, 0]])
    checks.append((r.acc3d_strict, r.acc3d_relax, r.outliers3d) == (0.0, 0.0, 1.0))
    r = evaluate([[0.04, 0, 0]], [[0, 0, 0]])
    checks.append((r.acc3d_strict, r.acc3d_relax, r.outliers3d) == (1.0, 1.0, 1.0))
    r = evaluate([[100.3, 0, 0], [100.5, 0, 0]], [[100.0, 0, 0]] * 2)
    checks.append(r.outliers3d == 0.5 and r.acc3d_strict == 1.0)
    gt = np.random.default_rng(6).normal(size=(10, 3))
    r = evaluate(gt, gt)
    checks.append((r.epe3d, r.acc3d_strict, r.acc3d_relax, r.outliers3d) == (0.0, 1.0, 1.0, 0.0))
    criterion(all(checks), f"{sum(checks)}/{len(checks)} hand cases (20% relative, zero-gt guard, 0.3 m boundary)")


def test_c7_determinism(criterion, tmp_path, capsys):
    (tmp_path / "scene.txt").write_text("preset = aligned_card\nshift_px = 3 1\n")
    assert main(["synth", "--spec", str(tmp_path / "scene.txt"), "--out-dir", str(tmp_path / "s")]) == 0
    d = tmp_path / "s"
    args = ["--pc1", d / "pc1.ply", "--pc2", d / "pc2.ply", "--pose", d / "pose.txt",
            "--depth2", d / "depth2.png", "--intrinsics", d / "intrinsics.txt"]
    blobs = []
    for name in ("run1.sfl", "run2.sfl"):
        assert main(["estimate", *map(str, args), "--out-flow", str(tmp_path / name)]) == 0
        blobs.append((tmp_path / name).read_bytes())
    capsys.readouterr()
    criterion(blobs[0] == blobs[1], f"two estimate runs, {len(blobs[0])} bytes each, identical: {blobs[0] == blobs[1]}")


KITTI_ENV = "SCENEFLOW_KITTI_DIR"


@pytest.mark.skipif(not os.environ.get(KITTI_ENV), reason=f"set {KITTI_ENV} to a directory of KITTI .npz files")
def test_c8_kitti_icp_reference(criterion):
    # Files in the common preprocessed layout: arrays pos1, pos2 (N, 3) and gt (N, 3).
    files = sorted(glob.glob(os.path.join(os.environ[KITTI_ENV], "*.npz")))[:150]
    assert files, f"no .npz files under {os.environ[KITTI_ENV]}"
    epes = []
    for path in files:
        data = np.load(path)
        pos1, pos2, gt = data["pos1"], data["pos2"], data["gt"]
        res = icp_register(pos1, pos2)
        epes.append(evaluate(icp_flow(pos1, res.transform), gt).epe3d)
    epe = float(np.mean(epes))
    criterion(abs(epe - 0.5181) <= 0.15, f"{len(files)} frame pairs, ICP EPE3D {epe:.4f} vs 0.5181 +- 0.15")
