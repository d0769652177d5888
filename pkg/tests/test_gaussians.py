import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatfield.gaussians import (
    VARIANCE_FLOOR, Gaussian, GaussianSet, GaussianSetFormatError,
    covariance, covariance_graph, density3d, density3d_graph, disk_normal,
    disk_normal_graph, load_set, quat_to_rotation, save_set,
)
from splatfield.tape import grad_check

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def make(center=(0, 0, 0), scales=(1, 1, 1), quat=IDENTITY_Q, logit=0.0,
         color=(0.5, 0.5, 0.5)):
    return Gaussian(np.asarray(center, float), np.log(np.asarray(scales, float)),
                    np.asarray(quat, float), logit, np.asarray(color, float))


def rand_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def test_covariance_axis_aligned():
    g = make(scales=(1, 2, 3))
    np.testing.assert_allclose(covariance(g), np.diag([1.0, 4.0, 9.0]), atol=1e-14)


def test_covariance_rotated_permutes_axes():
    q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])  # 90 deg about z
    g = make(scales=(1, 2, 1), quat=q)
    np.testing.assert_allclose(covariance(g), np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_covariance_eigenvalues_rotation_invariant():
    rng = np.random.default_rng(3)
    g = make(scales=(1, 2, 3), quat=rand_quat(rng))
    eig = np.sort(np.linalg.eigvalsh(covariance(g)))
    np.testing.assert_allclose(eig, [1.0, 4.0, 9.0], atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_covariance_spd(seed):
    rng = np.random.default_rng(seed)
    g = Gaussian(rng.normal(size=3), rng.uniform(-3, 1, size=3), rand_quat(rng),
                 0.0, np.full(3, 0.5))
    np.linalg.cholesky(covariance(g))  # raises if not SPD


def test_density_at_center_is_one():
    g = make(center=(0.3, -0.2, 0.1), scales=(0.5, 1.0, 2.0))
    assert density3d(g, g.center) == pytest.approx(1.0)


def test_density_unit_mahalanobis():
    g = make(scales=(1, 1, 1))
    v = np.array([1.0, 0.0, 0.0])
    # variance floor shifts the exponent by ~5e-9 relative
    assert density3d(g, v) == pytest.approx(np.exp(-0.5), rel=1e-7)


def test_density_matches_dense_linear_algebra():
    rng = np.random.default_rng(11)
    g = make(center=rng.normal(size=3), scales=(0.3, 1.2, 2.5), quat=rand_quat(rng))
    q = rng.normal(size=3)
    cov = covariance(g) + VARIANCE_FLOOR * quat_to_rotation(g.rotation) @ quat_to_rotation(g.rotation).T
    d = q - g.center
    expected = np.exp(-0.5 * d @ np.linalg.solve(cov, d))
    assert density3d(g, q) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_density_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    g = make(scales=rng.uniform(0.2, 2, size=3), quat=rand_quat(rng))
    q = rng.normal(size=3)
    extra = quat_to_rotation(rand_quat(rng))
    # rotate both the offset and the Gaussian frame: density is unchanged
    r0 = quat_to_rotation(g.rotation)
    g2 = Gaussian(g.center, g.log_scales, _rotation_to_quat(extra @ r0), 0.0, g.color)
    q2 = g.center + extra @ (q - g.center)
    assert density3d(g2, q2) == pytest.approx(density3d(g, q), abs=1e-10)


def _rotation_to_quat(r):
    w = np.sqrt(max(0.0, 1.0 + r[0, 0] + r[1, 1] + r[2, 2])) / 2.0
    if w > 1e-6:
        x = (r[2, 1] - r[1, 2]) / (4 * w)
        y = (r[0, 2] - r[2, 0]) / (4 * w)
        z = (r[1, 0] - r[0, 1]) / (4 * w)
    else:  # fall back for near-pi rotations
        x, y, z = np.sqrt(np.maximum(0, (1 + np.diag(r) * 2 - np.trace(r)) / 4))
        x = np.copysign(x, r[2, 1] - r[1, 2])
        y = np.copysign(y, r[0, 2] - r[2, 0])
        z = np.copysign(z, r[1, 0] - r[0, 1])
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def test_disk_normal_axis_aligned():
    g = make(scales=(1, 1, 0.01))
    n = disk_normal(g)
    np.testing.assert_allclose(np.abs(n), [0, 0, 1], atol=1e-14)


def test_disk_normal_rotated():
    q = np.array([np.cos(np.pi / 4), np.sin(np.pi / 4), 0.0, 0.0])  # 90 deg about x
    g = make(scales=(1, 1, 0.01), quat=q)
    n = disk_normal(g)
    np.testing.assert_allclose(np.abs(n), [0, 1, 0], atol=1e-12)
    assert n[1] == pytest.approx(-1.0, abs=1e-12)


def test_disk_normal_tie_breaks_to_first_axis():
    g = make(scales=(0.5, 0.5, 0.5))
    np.testing.assert_allclose(disk_normal(g), [1, 0, 0], atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_disk_normal_orthogonal_to_larger_axes(seed):
    rng = np.random.default_rng(seed)
    scales = np.sort(rng.uniform(0.2, 2, size=3))[::-1]
    scales[2] = scales[2] * 0.1
    g = make(scales=scales, quat=rand_quat(rng))
    n = disk_normal(g)
    w, v = np.linalg.eigh(covariance(g))
    # two largest principal axes are the last two eigenvectors
    assert abs(n @ v[:, 1]) < 1e-10 and abs(n @ v[:, 2]) < 1e-10


def test_gradients_pass_grad_check():
    rng = np.random.default_rng(5)
    weights = rng.normal(size=(3, 3))
    q_world = rng.normal(size=3)
    params = {
        "center": rng.normal(size=3),
        "log_scales": rng.uniform(-1, 0.5, size=3),
        "quat": rand_quat(rng) * 1.3,  # raw, normalized on tape
    }

    def build_cov(t, v):
        return (covariance_graph(t, v["log_scales"], v["quat"]) * weights).sum()

    def build_density(t, v):
        return density3d_graph(t, v["center"], v["log_scales"], v["quat"], q_world)

    def build_normal(t, v):
        return t.dot(disk_normal_graph(t, v["log_scales"], v["quat"]),
                     t.constant(q_world))

    assert grad_check(build_cov, params, step=1e-6) < 1e-5
    assert grad_check(build_density, params, step=1e-6) < 1e-5
    assert grad_check(build_normal, params, step=1e-6) < 1e-5


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    gs = GaussianSet(rng.normal(size=(100, 3)), rng.normal(size=(100, 3)),
                     rng.normal(size=(100, 4)), rng.normal(size=100),
                     rng.uniform(size=(100, 3)))
    path = tmp_path / "set.gsplat"
    save_set(gs, path)
    back = load_set(path)
    np.testing.assert_array_equal(back.centers, gs.centers)
    np.testing.assert_array_equal(back.log_scales, gs.log_scales)
    np.testing.assert_array_equal(back.rotations, gs.rotations)
    np.testing.assert_array_equal(back.opacity_logits, gs.opacity_logits)
    np.testing.assert_array_equal(back.colors, gs.colors)


def test_empty_set_round_trip(tmp_path):
    path = tmp_path / "empty.gsplat"
    save_set(GaussianSet.empty(), path)
    assert len(load_set(path)) == 0


def test_truncated_file_rejected(tmp_path):
    rng = np.random.default_rng(2)
    gs = GaussianSet(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)),
                     rng.normal(size=(5, 4)), rng.normal(size=5),
                     rng.uniform(size=(5, 3)))
    path = tmp_path / "set.gsplat"
    save_set(gs, path)
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(GaussianSetFormatError, match="byte"):
        load_set(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.gsplat"
    path.write_bytes(b"NOTAMAGIC" + b"\x00" * 32)
    with pytest.raises(GaussianSetFormatError, match="byte 0"):
        load_set(path)
