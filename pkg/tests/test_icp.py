import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from sceneflow import IcpConfig, InvalidInputError, RegistrationError, RigidTransform, evaluate, static_flow
from sceneflow.icp import best_rigid_transform, icp_flow, icp_register
from sceneflow.synth import render, static_scene


def small_motion(rng, max_deg=10.0, max_t=0.3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = Rotation.from_rotvec(axis * np.deg2rad(rng.uniform(0, max_deg))).as_matrix()
    return RigidTransform(R, rng.uniform(-max_t, max_t, 3))


def test_identity(rng):
    pts = rng.normal(size=(100, 3))
    res = icp_register(pts, pts)
    assert res.iterations == 1 and res.rms == 0.0
    np.testing.assert_allclose(res.transform.matrix, np.eye(4), atol=1e-9)
    T, rms, iters = res
    assert T is res.transform


def test_recovers_small_motion(rng):
    pts = rng.uniform(-2, 2, (400, 3))
    T = small_motion(rng)
    res = icp_register(pts, T.apply(pts))
    assert np.linalg.norm(res.transform.rotation - T.rotation) < 1e-6
    assert np.linalg.norm(res.transform.translation - T.translation) < 1e-6
    assert all(b <= a for a, b in zip(res.rms_history, res.rms_history[1:]))


def test_noise_monte_carlo():
    r = np.random.default_rng(7)
    sigma, n = 0.01, 300
    errors = []
    for _ in range(100):
        pts = r.uniform(-2, 2, (n, 3))
        T = small_motion(r, 5.0, 0.1)
        target = T.apply(pts) + r.normal(scale=sigma, size=pts.shape)
        est = icp_register(pts, target).transform
        errors.append(est.translation - T.translation)
    # Unbiased estimate: the mean error over trials shrinks like sigma / sqrt(N).
    mean_err = np.linalg.norm(np.mean(errors, axis=0))
    assert mean_err < 3 * sigma / np.sqrt(n)


def test_flow_is_static_flow(rng):
    pts = rng.normal(size=(20, 3))
    T = small_motion(rng)
    np.testing.assert_array_equal(icp_flow(pts, T), static_flow(pts, T))
    assert not icp_flow(pts, RigidTransform.identity()).any()


def test_static_scene_flow():
    # Motion well below the pixel-lattice spacing of the walls; larger
    # motions let point-to-point pairs alias onto the wrong lattice sites.
    cam = RigidTransform(Rotation.from_euler("y", 0.2, degrees=True).as_matrix(), (0.01, 0.0, -0.03))
    res = render(static_scene(64, 48, camera_motion=cam))
    pc1 = res.pc1_exact.points
    target = pc1 + res.gt_flow
    est = icp_register(pc1, target).transform
    assert evaluate(icp_flow(pc1, est), res.gt_flow).epe3d <= 1e-3


def test_degenerate():
    with pytest.raises(RegistrationError):
        icp_register(np.zeros((2, 3)), np.zeros((5, 3)))
    line = np.outer(np.arange(10.0), [1.0, 0, 0])
    with pytest.raises(RegistrationError):
        best_rigid_transform(line, line + 1)
    far = np.random.default_rng(0).normal(size=(10, 3))
    with pytest.raises(RegistrationError):
        icp_register(far, far + 100)


def test_reflection_corrected(rng):
    pts = rng.normal(size=(50, 3))
    mirrored = pts * [1, 1, -1]
    T = best_rigid_transform(pts, mirrored)
    assert np.linalg.det(T.rotation) == pytest.approx(1.0)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        IcpConfig(max_correspondence_distance=0)
