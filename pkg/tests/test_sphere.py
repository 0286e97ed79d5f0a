"""Basis, spectrum, and point-set tests.

The explicit low-order cartesian forms used as oracles here are the standard
real spherical harmonic table (no Condon-Shortley phase); the module's pinned
convention maps positive phases to sine terms, so column (k, +m) matches the
table's sin form and (k, -m) the cos form.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodf.sphere import (
    HarmonicBasis,
    basis_size,
    degree_table,
    electrostatic_directions,
    fibonacci_sphere,
    funk_radon_spectrum,
    icosphere,
    read_bvec,
    sh_index,
    sh_matrix,
    write_bvec,
)
from nodf.util import InvalidArgument

C0 = 1.0 / (2.0 * math.sqrt(math.pi))


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@st.composite
def unit_vectors(draw):
    v = draw(
        st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3).filter(
            lambda u: 0.1 < np.linalg.norm(u) <= 1.8
        )
    )
    return unit(v)


class TestIndexing:
    def test_pinned_examples(self):
        assert sh_index(0, 0) == 0
        assert sh_index(2, -2) == 1
        assert sh_index(8, 8) == 44

    def test_bijection(self):
        seen = [sh_index(k, m) for k in range(0, 9, 2) for m in range(-k, k + 1)]
        assert sorted(seen) == list(range(45))
        assert basis_size(8) == 45

    def test_invalid(self):
        with pytest.raises(InvalidArgument):
            sh_index(3, 0)
        with pytest.raises(InvalidArgument):
            sh_index(2, 3)
        with pytest.raises(InvalidArgument):
            basis_size(5)

    def test_degree_table(self):
        degs = degree_table(8)
        assert degs[0] == 0
        assert list(degs[1:6]) == [2] * 5
        assert list(degs[-17:]) == [8] * 17


class TestEvaluation:
    def test_constant_column(self):
        pts = fibonacci_sphere(17)
        phi = sh_matrix(pts, 8)
        assert np.allclose(phi[:, 0], 0.2820948, atol=1e-6)
        assert np.allclose(phi[:, 0], C0, atol=1e-15)

    def test_north_pole_nonzero_phases_vanish(self):
        phi = sh_matrix(np.array([[0.0, 0.0, 1.0]]), 8)[0]
        for k in range(0, 9, 2):
            for m in range(-k, k + 1):
                if m != 0:
                    assert phi[sh_index(k, m)] == 0.0

    def test_degree2_cartesian_oracle(self):
        # standard table: Y_{2,0} = (1/4) sqrt(5/pi) (3z^2 - 1),
        # cos forms: sqrt(15/4pi) xz and (1/4) sqrt(15/pi)(x^2 - y^2),
        # sin forms: sqrt(15/4pi) yz and (1/2) sqrt(15/pi) xy
        rng = np.random.default_rng(7)
        pts = rng.standard_normal((40, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        x, y, z = pts.T
        phi = sh_matrix(pts, 2)
        np.testing.assert_allclose(
            phi[:, sh_index(2, 0)], 0.25 * math.sqrt(5 / math.pi) * (3 * z * z - 1), atol=1e-13
        )
        np.testing.assert_allclose(
            phi[:, sh_index(2, -1)], math.sqrt(15 / (4 * math.pi)) * x * z, atol=1e-13
        )
        np.testing.assert_allclose(
            phi[:, sh_index(2, 1)], math.sqrt(15 / (4 * math.pi)) * y * z, atol=1e-13
        )
        np.testing.assert_allclose(
            phi[:, sh_index(2, -2)],
            0.25 * math.sqrt(15 / math.pi) * (x * x - y * y),
            atol=1e-13,
        )
        np.testing.assert_allclose(
            phi[:, sh_index(2, 2)], 0.5 * math.sqrt(15 / math.pi) * x * y, atol=1e-13
        )

    def test_degree4_zonal_oracle(self):
        rng = np.random.default_rng(8)
        pts = rng.standard_normal((25, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        z = pts[:, 2]
        phi = sh_matrix(pts, 4)
        expect = (3.0 / 16.0) * math.sqrt(1 / math.pi) * (35 * z**4 - 30 * z**2 + 3)
        np.testing.assert_allclose(phi[:, sh_index(4, 0)], expect, atol=1e-12)

    def test_gram_near_identity(self):
        pts = fibonacci_sphere(10000)
        phi = sh_matrix(pts, 8)
        gram = phi.T @ phi * (4.0 * math.pi / pts.shape[0])
        assert np.max(np.abs(gram - np.eye(45))) < 1e-2

    @settings(max_examples=60, deadline=None)
    @given(unit_vectors())
    def test_antipodal_symmetry_bitwise(self, p):
        a = sh_matrix(p[None, :], 8)
        b = sh_matrix(-p[None, :], 8)
        np.testing.assert_array_equal(a, b)

    def test_rejects_non_unit(self):
        with pytest.raises(InvalidArgument):
            sh_matrix(np.array([[0.0, 0.0, 2.0]]), 4)

    def test_basis_class(self):
        b = HarmonicBasis(8)
        assert b.size == 45
        assert b.index(2, -2) == 1
        assert b.evaluate(fibonacci_sphere(5)).shape == (5, 45)


class TestFunkRadon:
    def test_pinned_eigenvalues(self):
        s = funk_radon_spectrum(8)
        assert abs(s.forward[sh_index(0, 0)] - 2 * math.pi) < 1e-12
        assert abs(s.forward[sh_index(2, 0)] - (-math.pi)) < 1e-12
        assert abs(s.forward[sh_index(4, 0)] - 3 * math.pi / 4) < 1e-12
        assert abs(s.forward[sh_index(6, 0)] - (-5 * math.pi / 8)) < 1e-12
        assert abs(s.forward[sh_index(8, 0)] - 35 * math.pi / 64) < 1e-12

    def test_signs_alternate(self):
        s = funk_radon_spectrum(8)
        for k in range(0, 9, 2):
            assert math.copysign(1, s.forward[sh_index(k, 0)]) == (-1) ** (k // 2)

    def test_round_trip(self):
        s = funk_radon_spectrum(8)
        rng = np.random.default_rng(3)
        c = rng.standard_normal(45)
        np.testing.assert_allclose(c * s.forward * s.inverse, c, atol=1e-12)

    def test_equal_within_degree(self):
        s = funk_radon_spectrum(8)
        for k in range(0, 9, 2):
            vals = [s.forward[sh_index(k, m)] for m in range(-k, k + 1)]
            assert len(set(vals)) == 1


class TestPointSets:
    def test_fibonacci_basics(self):
        assert fibonacci_sphere(1).shape == (1, 3)
        pts = fibonacci_sphere(200)
        norms = np.linalg.norm(pts, axis=1)
        assert np.max(np.abs(norms - 1)) < 1e-12
        dots = np.clip(pts @ pts.T, -1, 1)
        np.fill_diagonal(dots, -1)
        min_angle = math.degrees(math.acos(float(np.max(dots))))
        assert min_angle > 6.0
        with pytest.raises(InvalidArgument):
            fibonacci_sphere(0)

    def test_electrostatic_two_points_orthogonal(self):
        # oracle: for two antipodal charge pairs the variable part of the
        # energy is f(c) = 1/sqrt(2-2c) + 1/sqrt(2+2c); a grid sweep shows the
        # minimum sits at c = 0, i.e. 90 degrees
        grid = np.linspace(-0.999, 0.999, 4001)
        f = 1 / np.sqrt(2 - 2 * grid) + 1 / np.sqrt(2 + 2 * grid)
        assert abs(grid[np.argmin(f)]) < 1e-3
        p = electrostatic_directions(2, iterations=2000, seed=11)
        angle = math.degrees(math.acos(min(1.0, abs(float(p[0] @ p[1])))))
        assert abs(angle - 90.0) < 1.0

    def test_electrostatic_energy_decreases(self):
        _, trace = electrostatic_directions(12, iterations=200, seed=5, return_trace=True)
        diffs = np.diff(np.asarray(trace))
        assert np.all(diffs <= 0)

    def test_electrostatic_deterministic(self):
        a = electrostatic_directions(6, iterations=100, seed=9)
        b = electrostatic_directions(6, iterations=100, seed=9)
        np.testing.assert_array_equal(a, b)

    def test_icosphere_counts(self):
        pts0, adj0 = icosphere(0)
        assert pts0.shape == (12, 3)
        assert all(len(a) == 5 for a in adj0)
        pts4, adj4 = icosphere(4)
        assert pts4.shape == (2562, 3)
        assert set(len(a) for a in adj4) == {5, 6}

    def test_icosphere_unit_and_antipodal(self):
        pts, _ = icosphere(2)
        assert np.max(np.abs(np.linalg.norm(pts, axis=1) - 1)) < 1e-12
        # the vertex set is exactly centrally symmetric
        rows = {tuple(v) for v in pts}
        for v in pts:
            assert tuple(-v) in rows


class TestBvecIO:
    def test_round_trip(self, tmp_path):
        d = fibonacci_sphere(14)
        path = tmp_path / "dirs.bvec"
        write_bvec(path, d)
        back = read_bvec(path)
        np.testing.assert_array_equal(back, d)

    def test_shape_errors(self, tmp_path):
        path = tmp_path / "bad.bvec"
        path.write_text("1 2\n3 4\n")
        with pytest.raises(InvalidArgument):
            read_bvec(path)
