"""Synthetic tensor-field phantoms, ground-truth coefficients, noise injection.

Signals follow the multi-tensor model S(p) = (1/T) sum_t exp(-b p^T D_t p)
on a single shell. Ground truth per voxel is the least-squares projection of
the dense signal onto the harmonic basis; the ground-truth ODF coefficients
are the forward Funk-Radon eigenvalues applied to the signal coefficients,
isotropic channel included.

Voxel grids are cell-centered and normalized to [-1, 1]^D. The default
cylinder eigenvalues are the desk-scale (1.5, 0.03, 0.03) x 10^-3 mm^2/s;
the historically quoted (15, 0.3, 0.3) x 10^-2 values are selectable via
`eigs="literal"` but drive the axial signal to numerical zero at b=3000.
"""

import numpy as np

from .sphere import basis_size, fibonacci_sphere, funk_radon_spectrum, sh_matrix
from .util import InvalidArgument, substream

LABELS = ("background", "single-fiber-x", "single-fiber-y", "crossing")
BACKGROUND, SINGLE_X, SINGLE_Y, CROSSING = range(4)

EIGS_DESK = (1.5e-3, 3.0e-5, 3.0e-5)
EIGS_LITERAL = (0.15, 3.0e-3, 3.0e-3)


def _resolve_eigs(eigs):
    if eigs is None:
        return np.array(EIGS_DESK)
    if isinstance(eigs, str):
        if eigs == "desk":
            return np.array(EIGS_DESK)
        if eigs == "literal":
            return np.array(EIGS_LITERAL)
        raise InvalidArgument(f"unknown eigenvalue preset {eigs!r}")
    e = np.asarray(eigs, dtype=float)
    if e.shape != (3,) or np.any(e <= 0):
        raise InvalidArgument(f"eigs must be 3 positive values, got {eigs!r}")
    return e


def cylinder_tensor(axis, eigs):
    """SPD tensor with principal axis `axis` and eigenvalues (l1, l2, l2)."""
    u = np.asarray(axis, dtype=float)
    u = u / np.linalg.norm(u)
    l1, l2, _ = _resolve_eigs(eigs)
    return l2 * np.eye(3) + (l1 - l2) * np.outer(u, u)


class TensorPhantom:
    """Spatial field of per-voxel tensor mixtures with region labels.

    coords: (N, D) cell-centered grid in [-1, 1]^D
    tensors: length-N list of (T_i, 3, 3) arrays, every tensor SPD
    labels: (N,) ints indexing LABELS
    grid_shape: the generating grid dims, e.g. (16, 16) or (24, 24, 24)
    """

    def __init__(self, coords, tensors, labels, b, grid_shape):
        self.coords = np.asarray(coords, dtype=float)
        self.tensors = tensors
        self.labels = np.asarray(labels, dtype=np.int8)
        self.b = float(b)
        self.grid_shape = tuple(grid_shape)
        for t in tensors:
            arr = np.asarray(t)
            if arr.ndim != 3 or arr.shape[1:] != (3, 3):
                raise InvalidArgument("each voxel needs a (T, 3, 3) tensor stack")

    @property
    def n_voxels(self):
        return self.coords.shape[0]

    def label_counts(self):
        return {LABELS[i]: int(np.sum(self.labels == i)) for i in range(len(LABELS))}


def multi_tensor_signal(tensors, p, b):
    """Signal (1/T) sum_t exp(-b p^T D_t p) for one direction or many.

    `p` may be a single unit 3-vector or an (n, 3) stack; returns a scalar or
    an (n,) array. Values lie in (0, 1].
    """
    ts = np.asarray(tensors, dtype=float)
    if ts.ndim == 2:
        ts = ts[None]
    if ts.shape[0] == 0:
        raise InvalidArgument("tensor list must be non-empty")
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    norms = np.linalg.norm(pts, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise InvalidArgument("directions must be unit vectors")
    quad = np.einsum("ni,tij,nj->tn", pts, ts, pts)
    vals = np.exp(-b * quad).mean(axis=0)
    return float(vals[0]) if single else vals


def grid_coords(shape):
    """Cell-centered coordinates in [-1, 1]^D for a rectangular grid."""
    axes = [(2.0 * np.arange(n) + 1.0) / n - 1.0 for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def make_crossing_2d(nx, ny, bundle_width=0.4, eigs=None, b=3000.0):
    """Two perpendicular bundles crossing at 90 degrees in a 2D slice.

    A horizontal band carries x-aligned tensors, a vertical band y-aligned
    ones; their intersection holds both (T=2); the rest is isotropic
    background with the cylinder's mean diffusivity.
    """
    if nx < 4 or ny < 4:
        raise InvalidArgument(f"grid must be at least 4x4, got {nx}x{ny}")
    e = _resolve_eigs(eigs)
    coords = grid_coords((nx, ny))
    dx = cylinder_tensor([1.0, 0.0, 0.0], e)
    dy = cylinder_tensor([0.0, 1.0, 0.0], e)
    iso = (e.sum() / 3.0) * np.eye(3)
    half = bundle_width
    tensors, labels = [], []
    for x, y in coords:
        in_h = abs(y) < half
        in_v = abs(x) < half
        if in_h and in_v:
            tensors.append(np.stack([dx, dy]))
            labels.append(CROSSING)
        elif in_h:
            tensors.append(dx[None])
            labels.append(SINGLE_X)
        elif in_v:
            tensors.append(dy[None])
            labels.append(SINGLE_Y)
        else:
            tensors.append(iso[None])
            labels.append(BACKGROUND)
    return TensorPhantom(coords, tensors, labels, b, (nx, ny))


def helix_point(t, sign, radius, rate, chirp=0.0, phase=0.0):
    ang = sign * (rate * t + 0.5 * chirp * t * t) + phase
    return np.array([radius * np.cos(ang), radius * np.sin(ang), t])


def helix_tangent(t, sign, radius, rate, chirp=0.0, phase=0.0):
    ang = sign * (rate * t + 0.5 * chirp * t * t) + phase
    v = sign * (rate + chirp * t)
    d = np.array([-radius * v * np.sin(ang), radius * v * np.cos(ang), 1.0])
    return d / np.linalg.norm(d)


def make_caduceus_3d(
    nx, ny, nz, radius=0.4, tube=0.2, rate=3.5, chirp=1.0, eigs=None, b=3000.0
):
    """Two counter-rotating helical tubes with tensors along the tangents.

    The strands wind around the z axis with opposite handedness and a chirped
    angular rate, so they intersect repeatedly and meet at a different angle
    at each crossing; overlap voxels carry both tangent tensors. The default
    geometry keeps crossing angles in the 60-90 degree range, wide enough for
    the band-limited ODF to resolve both lobes.
    """
    if min(nx, ny, nz) < 8:
        raise InvalidArgument(f"grid dims must be >= 8, got {(nx, ny, nz)}")
    e = _resolve_eigs(eigs)
    coords = grid_coords((nx, ny, nz))
    iso = (e.sum() / 3.0) * np.eye(3)

    tdense = np.linspace(-1.2, 1.2, 1201)
    curves, tangents = [], []
    for sign in (+1.0, -1.0):
        pts = np.stack([helix_point(t, sign, radius, rate, chirp) for t in tdense])
        tan = np.stack([helix_tangent(t, sign, radius, rate, chirp) for t in tdense])
        curves.append(pts)
        tangents.append(tan)

    tensors, labels = [], []
    chunk = 2048
    memberships = np.zeros((coords.shape[0], 2), dtype=bool)
    nearest = np.zeros((coords.shape[0], 2), dtype=int)
    for s in range(2):
        for lo in range(0, coords.shape[0], chunk):
            block = coords[lo : lo + chunk]
            d2 = ((block[:, None, :] - curves[s][None, :, :]) ** 2).sum(axis=2)
            idx = np.argmin(d2, axis=1)
            dist = np.sqrt(d2[np.arange(block.shape[0]), idx])
            memberships[lo : lo + chunk, s] = dist < tube
            nearest[lo : lo + chunk, s] = idx
    for i in range(coords.shape[0]):
        in_a, in_b = memberships[i]
        if in_a and in_b:
            ta = tangents[0][nearest[i, 0]]
            tb = tangents[1][nearest[i, 1]]
            tensors.append(
                np.stack([cylinder_tensor(ta, e), cylinder_tensor(tb, e)])
            )
            labels.append(CROSSING)
        elif in_a:
            tensors.append(cylinder_tensor(tangents[0][nearest[i, 0]], e)[None])
            labels.append(SINGLE_X)
        elif in_b:
            tensors.append(cylinder_tensor(tangents[1][nearest[i, 1]], e)[None])
            labels.append(SINGLE_Y)
        else:
            tensors.append(iso[None])
            labels.append(BACKGROUND)
    return TensorPhantom(coords, tensors, labels, b, (nx, ny, nz))


class GroundTruthField:
    """Per-voxel signal and ODF coefficient vectors in the harmonic basis."""

    def __init__(self, signal_coeffs, odf_coeffs, l_max, coords, b):
        self.signal_coeffs = np.asarray(signal_coeffs, dtype=float)
        self.odf_coeffs = np.asarray(odf_coeffs, dtype=float)
        self.l_max = int(l_max)
        self.coords = np.asarray(coords, dtype=float)
        self.b = float(b)


def ground_truth_coeffs(phantom, l_max=8, n_dense=256):
    """Least-squares projection of every voxel's signal onto the basis.

    Uses n_dense quasi-uniform directions (must be >= 4 K_total for a stable
    design). ODF coefficients are the forward Funk-Radon eigenvalues times
    the signal coefficients.
    """
    K = basis_size(l_max)
    if n_dense < 4 * K:
        raise InvalidArgument(f"n_dense must be >= {4 * K}, got {n_dense}")
    dirs = fibonacci_sphere(n_dense)
    phi = sh_matrix(dirs, l_max)
    # one factorization serves every voxel
    solver = np.linalg.pinv(phi)
    rank = np.linalg.matrix_rank(phi)
    if rank < K:
        raise np.linalg.LinAlgError(f"dense design rank {rank} < {K}")
    signals = np.stack([multi_tensor_signal(phantom.tensors[i], dirs, phantom.b) for i in range(phantom.n_voxels)])
    coeffs = signals @ solver.T
    fwd = funk_radon_spectrum(l_max).forward
    return GroundTruthField(coeffs, coeffs * fwd[None, :], l_max, phantom.coords, phantom.b)


def sample_noisy(field, directions, sigma_e, seed):
    """Noisy signal matrix Y (M x N) from the band-limited ground truth.

    Y = Phi(directions) @ signal_coeffs^T + iid N(0, sigma_e^2).
    """
    if sigma_e < 0:
        raise InvalidArgument(f"sigma_e must be >= 0, got {sigma_e}")
    phi = sh_matrix(directions, field.l_max)
    clean = phi @ field.signal_coeffs.T
    if sigma_e == 0:
        return clean
    rng = substream(seed, "signal-noise")
    return clean + sigma_e * rng.standard_normal(clean.shape)


def sample_b0(N, p, sigma_e, seed):
    """Unit-mean Gaussian b0 volumes, shape (N, p), for noise estimation."""
    if p < 2:
        raise InvalidArgument(f"p must be >= 2, got {p}")
    rng = substream(seed, "b0-noise")
    return 1.0 + sigma_e * rng.standard_normal((N, p))
