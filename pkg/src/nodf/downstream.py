"""Quantities derived from ODF fields: anisotropy, peaks, tracing, curve stats.

Coefficient fields are duck-typed: anything with a coeffs(x) method returning
a length-(K_total) vector inside its domain and None outside works. Concrete
implementations cover ground-truth grids (trilinear interpolation), the
posterior mean, single posterior draws, and constants.

Tangent handling throughout is sign-free: directions enter through outer
products or absolute dot products, so antipodally flipped tangents agree.
"""

from dataclasses import dataclass
from functools import lru_cache

import warnings

import numpy as np
import scipy.linalg
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from . import estimator, field as field_mod, sphere
from .util import InvalidArgument, substream


def gfa(values):
    """Generalized fractional anisotropy of sampled function values, in [0, 1]."""
    h = np.asarray(values, dtype=float)
    if h.ndim != 1 or h.size < 2:
        raise InvalidArgument("need a 1-d sample of at least 2 values")
    denom = np.sum(h * h)
    if denom == 0.0:
        raise InvalidArgument("gfa undefined for all-zero values")
    n = h.size
    num = n * np.sum((h - h.mean()) ** 2)
    return float(min(max(np.sqrt(num / ((n - 1) * denom)), 0.0), 1.0))


def cv_gfa(gfa_samples):
    """Coefficient of variation: sample sd over sample mean."""
    g = np.asarray(gfa_samples, dtype=float)
    if g.size < 2:
        raise InvalidArgument("need at least 2 samples")
    mean = g.mean()
    if mean <= 0:
        raise InvalidArgument(f"cv undefined for non-positive mean {mean}")
    return float(g.std(ddof=1) / mean)


@lru_cache(maxsize=8)
def _neighbor_matrix(adjacency):
    """Adjacency tuples padded to a rectangular index array (self-padded)."""
    width = max(len(a) for a in adjacency)
    out = np.empty((len(adjacency), width), dtype=int)
    for i, nbrs in enumerate(adjacency):
        row = list(nbrs) + [i] * (width - len(nbrs))
        out[i] = row
    return out


def _canonical(p):
    for c in (2, 0, 1):
        if p[c] > 1e-12:
            return p
        if p[c] < -1e-12:
            return -p
    return p


def detect_peaks(points, adjacency, values, rel_threshold=0.5):
    """Local ODF maxima over a triangulated sphere, one per antipodal pair.

    Returns (directions, peak values) sorted by value descending. A vertex
    qualifies when it dominates its 1-ring and reaches rel_threshold times
    the global maximum.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] != len(points):
        raise InvalidArgument("values must align with the sphere points")
    nbr = _neighbor_matrix(adjacency)
    gmax = values.max()
    cand = np.flatnonzero(
        (values >= values[nbr].max(axis=1)) & (values >= rel_threshold * gmax)
    )
    order = cand[np.lexsort((cand, -values[cand]))]
    kept_dirs = []
    kept_vals = []
    for i in order:
        q = _canonical(points[i])
        if any(q @ d > 1.0 - 1e-9 for d in kept_dirs):
            continue
        kept_dirs.append(q)
        kept_vals.append(values[i])
    if not kept_dirs:
        return np.empty((0, 3)), np.empty(0)
    return np.array(kept_dirs), np.array(kept_vals)


# coefficient fields


class ConstantCoeffField:
    """Same coefficient vector everywhere inside an axis-aligned box."""

    def __init__(self, coeffs, lo=-1.0, hi=1.0, dim=3):
        self._coeffs = np.asarray(coeffs, dtype=float)
        self.lo = np.broadcast_to(np.asarray(lo, dtype=float), (dim,))
        self.hi = np.broadcast_to(np.asarray(hi, dtype=float), (dim,))

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def coeffs(self, x):
        return self._coeffs if self.contains(x) else None


class InterpCoeffField:
    """Trilinear interpolation of a coefficient field sampled on a grid."""

    def __init__(self, axes, grid_values):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.lo = np.array([a[0] for a in self.axes])
        self.hi = np.array([a[-1] for a in self.axes])
        self._interp = RegularGridInterpolator(
            tuple(self.axes), np.asarray(grid_values, dtype=float), method="linear"
        )

    @classmethod
    def from_ground_truth(cls, truth_field):
        coords = np.asarray(truth_field.coords, dtype=float)
        vals = np.asarray(truth_field.odf_coeffs, dtype=float)
        axes = [np.unique(coords[:, d]) for d in range(coords.shape[1])]
        shape = tuple(len(a) for a in axes)
        if int(np.prod(shape)) != coords.shape[0]:
            raise InvalidArgument("ground-truth coordinates do not form a full grid")
        grid = np.empty(shape + (vals.shape[1],))
        idx = tuple(
            np.searchsorted(axes[d], coords[:, d]) for d in range(coords.shape[1])
        )
        grid[idx] = vals
        return cls(axes, grid)

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def coeffs(self, x):
        if not self.contains(x):
            return None
        return self._interp(np.asarray(x, dtype=float)[None])[0]


class PosteriorMeanField:
    """Posterior mean coefficients of a conditioned model, queried anywhere."""

    def __init__(self, state, lo=None, hi=None):
        self.state = state
        self.lo = np.asarray(lo, dtype=float) if lo is not None else state.coords.min(axis=0)
        self.hi = np.asarray(hi, dtype=float) if hi is not None else state.coords.max(axis=0)

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def coeffs(self, x):
        if not self.contains(x):
            return None
        st = self.state
        xi = field_mod.features(st.params, np.asarray(x, dtype=float)[None])[:, 0]
        out = np.empty(st.K + 1)
        out[0] = estimator.ODF_COEFF_SCALE * float(st.params.mu @ xi)
        out[1:] = st.W_mean @ xi
        return out


class PosteriorSampleField:
    """One joint draw of the coefficient head, frozen into a queryable field."""

    def __init__(self, state, seed=0, lo=None, hi=None):
        self.state = state
        self.lo = np.asarray(lo, dtype=float) if lo is not None else state.coords.min(axis=0)
        self.hi = np.asarray(hi, dtype=float) if hi is not None else state.coords.max(axis=0)
        rng = substream(seed, "field-sample")
        z = rng.standard_normal(state.r * state.K)
        dev = scipy.linalg.solve_triangular(state.chol_L, z, lower=True, trans="T")
        self.W_draw = state.W_mean + dev.reshape(state.K, state.r, order="F")
        self.mu_offset = float(
            np.sqrt(state.variances.sigma_mu2) * rng.standard_normal()
        )

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def coeffs(self, x):
        if not self.contains(x):
            return None
        st = self.state
        xi = field_mod.features(st.params, np.asarray(x, dtype=float)[None])[:, 0]
        out = np.empty(st.K + 1)
        out[0] = estimator.ODF_COEFF_SCALE * (float(st.params.mu @ xi) + self.mu_offset)
        out[1:] = self.W_draw @ xi
        return out


# streamline tracing


@dataclass
class Streamline:
    points: np.ndarray
    step: float
    reason: str


@lru_cache(maxsize=8)
def _ico_design(level, l_max):
    pts, adjacency = sphere.icosphere(level)
    return pts, adjacency, sphere.sh_matrix(pts, l_max)


def _l_max_of(n_coeffs):
    for l in range(0, 100, 2):
        if sphere.basis_size(l) == n_coeffs:
            return l
    raise InvalidArgument(f"{n_coeffs} is not a full even-degree basis size")


def trace_streamline(field, x0, step=0.05, gfa_threshold=0.25, max_steps=200, level=4):
    """Euler tracing along ODF peak directions.

    At each point the peak most aligned with the previous direction continues
    the path (sign chosen for forward motion); the first step takes the
    strongest peak. Stops on domain exit, sub-threshold anisotropy, or the
    step cap.
    """
    x = np.asarray(x0, dtype=float).copy()
    points = [x.copy()]
    prev = None
    design = None
    reason = "max-steps"
    for _ in range(max_steps):
        c = field.coeffs(x)
        if c is None:
            reason = "domain-exit"
            break
        if design is None:
            design = _ico_design(level, _l_max_of(len(c)))
        pts, adjacency, Phi = design
        vals = Phi @ c
        if gfa(vals) < gfa_threshold:
            reason = "low-anisotropy"
            break
        dirs, _ = detect_peaks(pts, adjacency, vals)
        if len(dirs) == 0:
            reason = "low-anisotropy"
            break
        if prev is None:
            u = dirs[0]
        else:
            u = dirs[int(np.argmax(np.abs(dirs @ prev)))]
            if u @ prev < 0:
                u = -u
        prev = u
        if len(x) < 3:
            # planar field: step within the plane along the projected peak
            v = u[: len(x)]
            norm = np.linalg.norm(v)
            if norm == 0:
                reason = "low-anisotropy"
                break
            x = x + step * (v / norm)
        else:
            x = x + step * u
        points.append(x.copy())
    return Streamline(points=np.array(points), step=step, reason=reason)


def resample_curve(curve, n=100):
    """Arc-length-uniform spline resampling; endpoints kept exactly."""
    curve = np.atleast_2d(np.asarray(curve, dtype=float))
    if curve.shape[0] < 2:
        raise InvalidArgument("need at least 2 points to resample")
    deltas = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    keep = np.concatenate([[True], deltas > 0])
    curve = curve[keep]
    if curve.shape[0] < 2:
        raise InvalidArgument("curve has zero length")
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(curve, axis=0), axis=1))])
    sq = np.linspace(0.0, s[-1], n)
    if curve.shape[0] >= 4:
        spline = CubicSpline(s, curve, axis=0)
        out = spline(sq)
    elif curve.shape[0] == 3:
        spline = CubicSpline(s, curve, axis=0, bc_type="natural")
        out = spline(sq)
    else:
        out = np.column_stack(
            [np.interp(sq, s, curve[:, d]) for d in range(curve.shape[1])]
        )
    out[0] = curve[0]
    out[-1] = curve[-1]
    return out


@dataclass
class TractSample:
    curves: np.ndarray   # (n, T, 3)
    A: np.ndarray        # (T, 3, 3) mean tangent outer products
    AD: np.ndarray       # (T,)
    depths: np.ndarray   # (n,)


def _unit_tangents(curves):
    tans = np.gradient(curves, axis=1)
    norms = np.linalg.norm(tans, axis=2)
    ok = norms > 0
    tans = np.where(ok[:, :, None], tans / np.where(ok, norms, 1.0)[:, :, None], 0.0)
    return tans, ok


def angular_dispersion(curves):
    """Cross-sectional angular dispersion AD(t) of a curve bundle."""
    curves = np.asarray(curves, dtype=float)
    if curves.ndim != 3 or curves.shape[0] < 2:
        raise InvalidArgument("need a (n >= 2, T, 3) curve stack")
    tans, ok = _unit_tangents(curves)
    n, T, _ = curves.shape
    if not ok.all():
        warnings.warn(f"excluded {int((~ok).sum())} zero-length tangents")
    A = np.einsum("nti,ntj->tij", tans, tans)
    counts = ok.sum(axis=0)
    if np.any(counts == 0):
        raise InvalidArgument("no valid tangents at some t")
    A = A / counts[:, None, None]
    lam_max = np.linalg.eigvalsh(A)[:, -1]
    ad = np.arcsin(np.sqrt(np.clip(1.0 - lam_max, 0.0, 1.0)))
    return A, ad


def curve_depth(curves):
    """Modified band depth with pair bands, per coordinate, averaged over t."""
    curves = np.asarray(curves, dtype=float)
    if curves.ndim != 3 or curves.shape[0] < 3:
        raise InvalidArgument("need a (n >= 3, T, d) curve stack")
    n = curves.shape[0]
    depth = np.zeros(n)
    n_pairs = 0
    for a in range(n):
        for b in range(a + 1, n):
            lo = np.minimum(curves[a], curves[b])
            hi = np.maximum(curves[a], curves[b])
            inside = (curves >= lo[None]) & (curves <= hi[None])
            depth += inside.mean(axis=(1, 2))
            n_pairs += 1
    return depth / n_pairs


def curve_l2_distance(x1, x2):
    """Root mean squared pointwise distance between two aligned curves."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape:
        raise InvalidArgument(f"curve shapes differ: {x1.shape} vs {x2.shape}")
    return float(np.sqrt(np.mean(np.sum((x1 - x2) ** 2, axis=1))))


def deepest_min_distance(gt_curve, sample, k=10):
    """Distance from the truth to the closest of the k deepest sampled curves."""
    sample = np.asarray(sample, dtype=float)
    n = sample.shape[0]
    if n < k:
        warnings.warn(f"sample has {n} curves < k={k}; using all")
        k = n
    depths = curve_depth(sample) if n >= 3 else np.zeros(n)
    order = np.lexsort((np.arange(n), -depths))[:k]
    return min(curve_l2_distance(gt_curve, sample[i]) for i in order)


def summarize_tract(curves):
    A, ad = angular_dispersion(curves)
    return TractSample(curves=np.asarray(curves, dtype=float), A=A, AD=ad,
                       depths=curve_depth(curves))


def propagate_qoi(state, v, T, n_samples, seed=0, directions=None):
    """Push posterior draws at voxel v through a functional T.

    With directions given, T receives the ODF values on that grid; with
    directions=None it receives the raw coefficient draw. Failed evaluations
    are skipped; returns (array of outputs, failure count).
    """
    draws = estimator.sample_odf(state, v, n_samples, seed=seed)
    if directions is not None:
        Phi = sphere.sh_matrix(directions, _l_max_of(draws.shape[1]))
        inputs = draws @ Phi.T
    else:
        inputs = draws
    outputs = []
    failed = 0
    for row in inputs:
        try:
            outputs.append(T(row))
        except Exception as exc:
            failed += 1
            warnings.warn(f"functional failed on a draw: {exc}")
    if failed:
        warnings.warn(f"{failed}/{n_samples} draws failed")
    return np.array(outputs), failed


def gfa_exceedance_test(gfa_samples, mu_gfa, alpha=0.05):
    """One-sided t-test of mean anisotropy exceeding mu_gfa."""
    from scipy.stats import t as t_dist

    g = np.asarray(gfa_samples, dtype=float)
    if g.size < 2:
        raise InvalidArgument("need at least 2 samples")
    n = g.size
    sd = g.std(ddof=1)
    if sd == 0.0:
        warnings.warn("degenerate zero-variance sample; deciding by mean comparison")
        t_stat = np.inf if g.mean() > mu_gfa else -np.inf
        return bool(g.mean() > mu_gfa), float(t_stat)
    t_stat = (g.mean() - mu_gfa) / (sd / np.sqrt(n))
    p = t_dist.sf(t_stat, df=n - 1)
    return bool(p < alpha), float(t_stat)
