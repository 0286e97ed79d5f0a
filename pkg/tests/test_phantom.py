"""Phantom generation and ground-truth projection tests."""

import math

import numpy as np
import pytest

from nodf.phantom import (
    CROSSING,
    SINGLE_X,
    SINGLE_Y,
    cylinder_tensor,
    ground_truth_coeffs,
    grid_coords,
    make_caduceus_3d,
    make_crossing_2d,
    multi_tensor_signal,
    sample_b0,
    sample_noisy,
)
from nodf.sphere import basis_size, fibonacci_sphere, sh_index, sh_matrix
from nodf.util import InvalidArgument


class TestMultiTensorSignal:
    def test_b_zero_gives_one(self):
        d = cylinder_tensor([1, 0, 0], None)
        assert multi_tensor_signal([d], np.array([0.0, 0.0, 1.0]), 0.0) == 1.0

    def test_principal_axis_value(self):
        d = cylinder_tensor([0, 0, 1], (2e-3, 1e-4, 1e-4))
        got = multi_tensor_signal([d], np.array([0.0, 0.0, 1.0]), 1000.0)
        assert abs(got - math.exp(-2.0)) < 1e-12

    def test_duplicate_tensor_mixture(self):
        d = cylinder_tensor([1, 1, 0], None)
        p = np.array([0.0, 1.0, 0.0])
        assert abs(
            multi_tensor_signal([d, d], p, 3000.0) - multi_tensor_signal([d], p, 3000.0)
        ) < 1e-15

    def test_range(self):
        d1 = cylinder_tensor([1, 0, 0], None)
        d2 = cylinder_tensor([0, 1, 0], None)
        vals = multi_tensor_signal([d1, d2], fibonacci_sphere(64), 3000.0)
        assert np.all(vals > 0) and np.all(vals <= 1)

    def test_empty_errors(self):
        with pytest.raises(InvalidArgument):
            multi_tensor_signal(np.zeros((0, 3, 3)), np.array([0, 0, 1.0]), 3000.0)


class TestCrossing2D:
    def test_regions(self):
        ph = make_crossing_2d(16, 16)
        counts = ph.label_counts()
        assert counts["single-fiber-x"] > 0
        assert counts["single-fiber-y"] > 0
        assert counts["crossing"] > 0
        assert sum(counts.values()) == 256

    def test_crossing_voxels_hold_both_axes(self):
        ph = make_crossing_2d(16, 16)
        idx = np.nonzero(ph.labels == CROSSING)[0]
        for i in idx[:5]:
            ts = np.asarray(ph.tensors[i])
            assert ts.shape == (2, 3, 3)
            axes = []
            for t in ts:
                w, v = np.linalg.eigh(t)
                axes.append(np.abs(v[:, np.argmax(w)]))
            assert np.allclose(sorted(np.argmax(a) for a in axes), [0, 1])

    def test_single_fiber_axis(self):
        ph = make_crossing_2d(16, 16)
        i = int(np.nonzero(ph.labels == SINGLE_X)[0][0])
        ts = np.asarray(ph.tensors[i])
        assert ts.shape == (1, 3, 3)
        w, v = np.linalg.eigh(ts[0])
        assert np.allclose(np.abs(v[:, np.argmax(w)]), [1, 0, 0], atol=1e-12)

    def test_coords_normalized_unique(self):
        ph = make_crossing_2d(12, 12)
        assert np.all(np.abs(ph.coords) < 1)
        assert len({tuple(c) for c in ph.coords}) == ph.n_voxels

    def test_min_size(self):
        with pytest.raises(InvalidArgument):
            make_crossing_2d(3, 16)


class TestCaduceus3D:
    def test_tangents_unit_and_overlap(self):
        ph = make_caduceus_3d(16, 16, 16)
        counts = ph.label_counts()
        assert counts["crossing"] > 0
        assert counts["single-fiber-x"] > 0 and counts["single-fiber-y"] > 0
        for i in np.nonzero(ph.labels != 0)[0][:10]:
            for t in np.asarray(ph.tensors[i]):
                w = np.linalg.eigvalsh(t)
                assert np.all(w > 0)

    def test_crossing_angle_varies_along_z(self):
        ph = make_caduceus_3d(16, 16, 24)
        idx = np.nonzero(ph.labels == CROSSING)[0]
        angles, zs = [], []
        for i in idx:
            ts = np.asarray(ph.tensors[i])
            axes = []
            for t in ts:
                w, v = np.linalg.eigh(t)
                axes.append(v[:, np.argmax(w)])
            c = abs(float(axes[0] @ axes[1]))
            angles.append(math.degrees(math.acos(min(1.0, c))))
            zs.append(ph.coords[i, 2])
        angles = np.array(angles)
        assert angles.max() - angles.min() > 10.0

    def test_min_dims(self):
        with pytest.raises(InvalidArgument):
            make_caduceus_3d(6, 16, 16)


class TestGroundTruth:
    def test_exact_recovery_of_in_span_signal(self):
        # a signal that is already a basis polynomial projects to itself
        class FakePhantom:
            pass

        rng = np.random.default_rng(4)
        c_true = rng.standard_normal(basis_size(8)) * 0.1

        ph = make_crossing_2d(4, 4)
        gt = ground_truth_coeffs(ph, l_max=8, n_dense=256)
        dirs = fibonacci_sphere(256)
        phi = sh_matrix(dirs, 8)
        vals = phi @ c_true
        recovered, *_ = np.linalg.lstsq(phi, vals, rcond=None)
        np.testing.assert_allclose(recovered, c_true, atol=1e-10)
        assert gt.signal_coeffs.shape == (16, 45)

    def test_isotropic_voxel_constant_only(self):
        ph = make_crossing_2d(8, 8)
        gt = ground_truth_coeffs(ph, l_max=8, n_dense=256)
        bg = np.nonzero(ph.labels == 0)[0]
        coeffs = gt.signal_coeffs[bg[0]]
        assert abs(coeffs[0]) > 1e-6
        np.testing.assert_allclose(coeffs[1:], 0.0, atol=1e-10)

    def test_residual_decreases_with_order(self):
        ph = make_crossing_2d(6, 6)
        i = int(np.nonzero(ph.labels == CROSSING)[0][0])
        dirs = fibonacci_sphere(512)
        vals = multi_tensor_signal(ph.tensors[i], dirs, ph.b)
        res = []
        for l_max in (4, 6, 8):
            phi = sh_matrix(dirs, l_max)
            c, *_ = np.linalg.lstsq(phi, vals, rcond=None)
            res.append(float(np.linalg.norm(vals - phi @ c)))
        assert res[0] >= res[1] >= res[2]

    def test_odf_is_forward_spectrum_times_signal(self):
        from nodf.sphere import funk_radon_spectrum

        ph = make_crossing_2d(6, 6)
        gt = ground_truth_coeffs(ph, l_max=8, n_dense=256)
        fwd = funk_radon_spectrum(8).forward
        np.testing.assert_allclose(gt.odf_coeffs, gt.signal_coeffs * fwd[None, :], atol=1e-14)
        # isotropic channel of the ODF is strictly positive everywhere
        assert np.all(gt.odf_coeffs[:, 0] > 0)

    def test_n_dense_floor(self):
        ph = make_crossing_2d(4, 4)
        with pytest.raises(InvalidArgument):
            ground_truth_coeffs(ph, l_max=8, n_dense=100)


class TestNoise:
    def test_sigma_zero_exact(self):
        ph = make_crossing_2d(4, 4)
        gt = ground_truth_coeffs(ph)
        dirs = fibonacci_sphere(12)
        y0 = sample_noisy(gt, dirs, 0.0, seed=1)
        y1 = sample_noisy(gt, dirs, 0.0, seed=2)
        np.testing.assert_array_equal(y0, y1)
        phi = sh_matrix(dirs, 8)
        np.testing.assert_allclose(y0, phi @ gt.signal_coeffs.T, atol=1e-14)

    def test_mean_converges_to_clean(self):
        # CLT bound: mean over 10^4 draws within 3 sigma_e / 100 of clean
        ph = make_crossing_2d(4, 4)
        gt = ground_truth_coeffs(ph)
        dirs = fibonacci_sphere(3)
        clean = sample_noisy(gt, dirs, 0.0, seed=0)
        sigma = 0.05
        acc = np.zeros_like(clean)
        reps = 10000
        for s in range(reps):
            acc += sample_noisy(gt, dirs, sigma, seed=s)
        np.testing.assert_allclose(acc / reps, clean, atol=3 * sigma / 100)

    def test_seeded(self):
        ph = make_crossing_2d(4, 4)
        gt = ground_truth_coeffs(ph)
        dirs = fibonacci_sphere(6)
        np.testing.assert_array_equal(
            sample_noisy(gt, dirs, 0.1, seed=7), sample_noisy(gt, dirs, 0.1, seed=7)
        )

    def test_b0(self):
        assert np.all(sample_b0(5, 4, 0.0, seed=0) == 1.0)
        big = sample_b0(2000, 8, 0.2, seed=3)
        assert abs(np.var(big, ddof=1) - 0.04) < 0.002
        np.testing.assert_array_equal(sample_b0(3, 3, 0.1, 5), sample_b0(3, 3, 0.1, 5))
        with pytest.raises(InvalidArgument):
            sample_b0(5, 1, 0.1, seed=0)


class TestGridCoords:
    def test_cell_centers(self):
        c = grid_coords((4,))
        np.testing.assert_allclose(c.ravel(), [-0.75, -0.25, 0.25, 0.75])

    def test_crossing_signal_positive(self):
        ph = make_crossing_2d(8, 8)
        gt = ground_truth_coeffs(ph)
        dirs = fibonacci_sphere(50)
        phi = sh_matrix(dirs, 8)
        vals = phi @ gt.signal_coeffs.T
        assert np.all(vals > 0)
