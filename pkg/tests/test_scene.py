import numpy as np
import pytest

from thermsplat.geometry import (
    backprop_through_normalization,
    look_at_rotation,
    matrix_to_quat,
    normalize_quats,
    quat_to_matrix,
    quat_to_matrix_jacobian,
)
from thermsplat.imaging import Frame, Sequence
from thermsplat.scene import (
    Camera,
    DegradationSpec,
    GaussianScene,
    SceneError,
    degrade_sequence,
    generate_synthetic_scene,
    init_from_points,
    load_cameras,
    load_points,
    ring_cameras,
    save_cameras,
)


class TestGeometry:
    def test_quat_matrix_orthonormal(self):
        rng = np.random.default_rng(0)
        q = normalize_quats(rng.standard_normal((10, 4)))
        mats = quat_to_matrix(q)
        eye = np.einsum("nij,nkj->nik", mats, mats)
        assert np.allclose(eye, np.eye(3))
        assert np.allclose(np.linalg.det(mats), 1.0)

    def test_matrix_quat_round_trip(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            q = normalize_quats(rng.standard_normal(4))
            back = matrix_to_quat(quat_to_matrix(q))
            # q and -q encode the same rotation
            assert np.allclose(back, q) or np.allclose(back, -q)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        q = normalize_quats(rng.standard_normal((4, 4)))
        jac = quat_to_matrix_jacobian(q)
        eps = 1e-6
        for k in range(4):
            qp, qm = q.copy(), q.copy()
            qp[:, k] += eps
            qm[:, k] -= eps
            fd = (quat_to_matrix(qp) - quat_to_matrix(qm)) / (2 * eps)
            assert np.abs(fd - jac[:, k]).max() < 1e-6

    def test_normalization_backprop(self):
        rng = np.random.default_rng(3)
        q = 2.0 * rng.standard_normal(4)
        g_unit = rng.standard_normal(4)
        grad = backprop_through_normalization(q, g_unit)
        eps = 1e-7
        for k in range(4):
            qp, qm = q.copy(), q.copy()
            qp[k] += eps
            qm[k] -= eps
            fd = (g_unit @ (qp / np.linalg.norm(qp))
                  - g_unit @ (qm / np.linalg.norm(qm))) / (2 * eps)
            assert grad[k] == pytest.approx(fd, abs=1e-6)

    def test_look_at_points_forward(self):
        pos = np.array([2.0, 1.0, 0.5])
        rot = look_at_rotation(pos, np.zeros(3))
        fwd = rot[2]
        expect = -pos / np.linalg.norm(pos)
        assert np.allclose(fwd, expect)
        assert np.linalg.det(rot) == pytest.approx(1.0)


class TestScene:
    def test_normalizes_rotations(self):
        scene = GaussianScene(
            means=np.zeros((2, 3)), log_scales=np.zeros((2, 3)),
            rotations=np.array([[2.0, 0, 0, 0], [0, 3.0, 0, 0]]),
            opacity_logits=np.zeros(2), embeddings=np.zeros((2, 4)))
        assert np.allclose(np.linalg.norm(scene.rotations, axis=1), 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(SceneError):
            GaussianScene(np.zeros((2, 3)), np.zeros((3, 3)),
                          np.array([[1.0, 0, 0, 0]] * 2), np.zeros(2),
                          np.zeros((2, 4)))

    def test_subset(self):
        scene, _ = generate_synthetic_scene(10, 4, seed=0)
        sub = scene.subset(np.arange(10) < 3)
        assert len(sub) == 3
        assert sub.gt_emissions.shape == (3,)

    def test_opacities_in_range(self):
        scene, _ = generate_synthetic_scene(50, 4, seed=1)
        op = scene.opacities()
        assert np.all((op > 0.55) & (op < 0.96))


class TestCamera:
    def test_validation(self):
        with pytest.raises(SceneError):
            Camera(fx=-1, fy=1, cx=0, cy=0, width=4, height=4,
                   rotation=np.array([1.0, 0, 0, 0]), translation=np.zeros(3))
        with pytest.raises(SceneError):
            Camera(fx=1, fy=1, cx=9, cy=0, width=4, height=4,
                   rotation=np.array([1.0, 0, 0, 0]), translation=np.zeros(3))

    def test_ring_looks_at_origin(self):
        from thermsplat.render import project_gaussians
        scene = GaussianScene(
            means=np.zeros((1, 3)), log_scales=np.full((1, 3), -2.5),
            rotations=np.array([[1.0, 0, 0, 0]]), opacity_logits=np.zeros(1),
            embeddings=np.zeros((1, 2)))
        for cam in ring_cameras(6, width=33, height=33):
            proj = project_gaussians(scene, cam)
            assert np.allclose(proj.mean2d[0], [cam.cx, cam.cy], atol=1e-9)

    def test_round_trip_file(self, tmp_path):
        cams = ring_cameras(5, width=48, height=32)
        path = tmp_path / "cameras.txt"
        save_cameras(cams, path)
        back = load_cameras(path)
        assert len(back) == 5
        for a, b in zip(cams, back):
            assert np.allclose(a.rotation, b.rotation)
            assert np.allclose(a.translation, b.translation)
            assert (a.width, a.height) == (b.width, b.height)

    def test_malformed_camera_line(self, tmp_path):
        path = tmp_path / "cameras.txt"
        path.write_text("0 1 2 3\n")
        with pytest.raises(SceneError, match="14 fields"):
            load_cameras(path)


class TestDegrade:
    def _seq(self, n=6, seed=0):
        rng = np.random.default_rng(seed)
        base = rng.random((32, 32)) * 0.5 + 0.2
        return Sequence([Frame(base, 8, t) for t in range(n)])

    def test_zero_spec_is_identity(self):
        seq = self._seq()
        out = degrade_sequence(seq, DegradationSpec())
        for a, b in zip(seq, out):
            assert np.array_equal(a.pixels, b.pixels)

    def test_gain_modulates_mean(self):
        seq = self._seq(n=8)
        out = degrade_sequence(seq, DegradationSpec(gain_amp=0.2))
        means = np.array([f.mean() for f in out])
        assert means[2] > means[0]  # sin positive quarter
        assert means[6] < means[0]  # sin negative quarter

    def test_vignette_darkens_corners_not_center(self):
        seq = self._seq(n=1)
        out = degrade_sequence(seq, DegradationSpec(vignette_strength=0.5))
        assert out[0].pixels[0, 0] < seq[0].pixels[0, 0]
        h, w = 16, 16
        assert out[0].pixels[h, w] == pytest.approx(seq[0].pixels[h, w], abs=1e-3)

    def test_column_fpn_constant_per_column(self):
        seq = self._seq(n=1)
        out = degrade_sequence(seq, DegradationSpec(fpn_sigma=0.02,
                                                    fpn_column=True, seed=3))
        diff = out[0].pixels - seq[0].pixels
        assert np.allclose(diff, diff[0:1, :], atol=1e-12)

    def test_seeded_determinism(self):
        seq = self._seq()
        spec = DegradationSpec(gain_amp=0.1, offset_walk_sigma=0.01,
                               fpn_sigma=0.01, blur_sigma=0.5, seed=7)
        a = degrade_sequence(seq, spec)
        b = degrade_sequence(seq, spec)
        for fa, fb in zip(a, b):
            assert np.array_equal(fa.pixels, fb.pixels)

    def test_validation(self):
        with pytest.raises(SceneError):
            DegradationSpec(gain_amp=-0.1)
        with pytest.raises(SceneError):
            DegradationSpec(vignette_strength=1.5)


class TestInit:
    def test_from_points_scales(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
        scene = init_from_points(pts, k=2)
        assert len(scene) == 4
        # first point's 2 nearest neighbors are at distance 1
        assert scene.log_scales[0, 0] == pytest.approx(np.log(1.0))
        assert np.allclose(scene.opacities(), 0.1)

    def test_too_few_points(self):
        with pytest.raises(SceneError):
            init_from_points(np.zeros((2, 3)), k=3)

    def test_load_points(self, tmp_path):
        path = tmp_path / "points.txt"
        path.write_text("# header\n0 0 0\n1 2 3\n")
        pts = load_points(path)
        assert pts.shape == (2, 3)
        assert pts[1].tolist() == [1.0, 2.0, 3.0]

    def test_synthetic_scene_validation(self):
        with pytest.raises(SceneError):
            generate_synthetic_scene(0, 4, seed=0)
        with pytest.raises(SceneError):
            generate_synthetic_scene(5, 1, seed=0)
