"""Even-degree real spherical harmonics, the Funk-Radon spectrum, and point sets.

Basis convention (pinned here and relied on by tests): harmonics are the fully
normalized real basis without the Condon-Shortley phase. Within degree k the
flat index is j = (k^2 + k + 2)/2 + m - 1 for m = -k..k; negative m are the
cos(|m| alpha2) forms, positive m the sin(m alpha2) forms, and m = 0 is the
plain normalized Legendre term. Column 0 is the positive constant
1/(2 sqrt(pi)). Only even degrees appear, so every basis function is
antipodally symmetric, and the azimuthal factors are built by exact
multiplication recurrences in (x, y) so that phi_j(-p) == phi_j(p) holds
bitwise.
"""

import math
from functools import lru_cache

import numpy as np

from .util import InvalidArgument, substream


def basis_size(l_max):
    """Number of even-degree harmonics up to order l_max (45 at l_max=8)."""
    if l_max < 0 or l_max % 2 != 0:
        raise InvalidArgument(f"l_max must be even and >= 0, got {l_max}")
    return (l_max + 1) * (l_max + 2) // 2


def sh_index(k, m):
    """Flat index of the (degree k, phase m) harmonic."""
    if k < 0 or k % 2 != 0:
        raise InvalidArgument(f"degree must be even and >= 0, got {k}")
    if abs(m) > k:
        raise InvalidArgument(f"|m| must be <= k, got m={m}, k={k}")
    return (k * k + k + 2) // 2 + m - 1


def degree_table(l_max):
    """Degree l_j of every basis column, shape (K,)."""
    out = np.empty(basis_size(l_max), dtype=int)
    for k in range(0, l_max + 1, 2):
        for m in range(-k, k + 1):
            out[sh_index(k, m)] = k
    return out


class HarmonicBasis:
    """Index bookkeeping for the even-degree basis at a fixed max order."""

    def __init__(self, l_max):
        self.l_max = l_max
        self.size = basis_size(l_max)
        self.degrees = degree_table(l_max)
        self.degrees.setflags(write=False)

    def index(self, k, m):
        return sh_index(k, m)

    def evaluate(self, points):
        return sh_matrix(points, self.l_max)


def _check_unit(pts):
    norms = np.linalg.norm(pts, axis=-1)
    if not np.all(np.abs(norms - 1.0) < 1e-9):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise InvalidArgument(f"points must be unit vectors (max |norm-1| = {worst:.3g})")


def _legendre_normalized(l_max, z, s):
    """Fully normalized associated Legendre terms, no Condon-Shortley phase.

    z = cos(alpha1), s = sin(alpha1) >= 0. Returns array P[l, m, i] for
    0 <= m <= l <= l_max. Stable three-term recurrence; no factorials.
    """
    n = z.shape[0]
    P = np.zeros((l_max + 1, l_max + 1, n))
    P[0, 0] = 1.0 / (2.0 * math.sqrt(math.pi))
    for m in range(1, l_max + 1):
        P[m, m] = math.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * P[m - 1, m - 1]
    for m in range(0, l_max):
        P[m + 1, m] = math.sqrt(2.0 * m + 3.0) * z * P[m, m]
        for l in range(m + 2, l_max + 1):
            a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = math.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            P[l, m] = a * (z * P[l - 1, m] - b * P[l - 2, m])
    return P


def sh_matrix(points, l_max):
    """Basis evaluation matrix, shape (n_points, K).

    Column j holds phi_j at each point; column 0 is the constant
    1/(2 sqrt(pi)).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[-1] != 3:
        raise InvalidArgument(f"points must be 3-vectors, got shape {pts.shape}")
    _check_unit(pts)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rho = np.hypot(x, y)
    # sin(alpha1) taken from (x, y) so the m-th azimuthal factor pairs with
    # the same rho that feeds the Legendre diagonal; exact under p -> -p.
    P = _legendre_normalized(l_max, z, rho)
    n = pts.shape[0]
    # cos/sin of m*alpha2 by multiplication recurrence (no transcendentals
    # past the division), keeping antipodal symmetry bitwise.
    safe = np.where(rho > 0.0, rho, 1.0)
    c1 = np.where(rho > 0.0, x / safe, 1.0)
    s1 = np.where(rho > 0.0, y / safe, 0.0)
    cm = np.empty((l_max + 1, n))
    sm = np.empty((l_max + 1, n))
    cm[0], sm[0] = 1.0, 0.0
    for m in range(1, l_max + 1):
        cm[m] = cm[m - 1] * c1 - sm[m - 1] * s1
        sm[m] = sm[m - 1] * c1 + cm[m - 1] * s1
    root2 = math.sqrt(2.0)
    out = np.empty((n, basis_size(l_max)))
    for k in range(0, l_max + 1, 2):
        out[:, sh_index(k, 0)] = P[k, 0]
        for m in range(1, k + 1):
            out[:, sh_index(k, -m)] = root2 * P[k, m] * cm[m]
            out[:, sh_index(k, m)] = root2 * P[k, m] * sm[m]
    return out


def legendre_at_zero(l):
    """P_l(0) for even l: (-1)^(l/2) (l-1)!! / l!!."""
    v = 1.0
    for i in range(2, l + 1, 2):
        v *= -(i - 1.0) / i
    return v


class FunkRadonSpectrum:
    """Forward eigenvalues 2 pi P_l(0) and their reciprocals, per basis column."""

    def __init__(self, l_max):
        degs = degree_table(l_max)
        by_degree = {k: 2.0 * math.pi * legendre_at_zero(k) for k in range(0, l_max + 1, 2)}
        self.l_max = l_max
        self.forward = np.array([by_degree[k] for k in degs])
        self.inverse = 1.0 / self.forward
        self.forward.setflags(write=False)
        self.inverse.setflags(write=False)


def funk_radon_spectrum(l_max):
    if l_max < 0 or l_max % 2 != 0:
        raise InvalidArgument(f"l_max must be even and >= 0, got {l_max}")
    return FunkRadonSpectrum(l_max)


def fibonacci_sphere(n):
    """n quasi-uniform unit vectors (golden-angle spiral)."""
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    i = np.arange(n, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = i * (math.pi * (3.0 - math.sqrt(5.0)))
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _coulomb_energy(p):
    # charge set {+-p_i}; constant self/antipode terms excluded
    d = p[:, None, :] - p[None, :, :]
    a = p[:, None, :] + p[None, :, :]
    dn = np.linalg.norm(d, axis=2)
    an = np.linalg.norm(a, axis=2)
    iu = np.triu_indices(p.shape[0], k=1)
    return float(np.sum(1.0 / dn[iu]) + np.sum(1.0 / an[iu]))


def _coulomb_grad(p):
    d = p[:, None, :] - p[None, :, :]
    a = p[:, None, :] + p[None, :, :]
    dn = np.linalg.norm(d, axis=2)
    an = np.linalg.norm(a, axis=2)
    np.fill_diagonal(dn, np.inf)
    np.fill_diagonal(an, np.inf)
    g = -(d / dn[:, :, None] ** 3).sum(axis=1) - (a / an[:, :, None] ** 3).sum(axis=1)
    return g


def electrostatic_directions(M, iterations=1000, seed=0, return_trace=False):
    """M directions by projected gradient descent on antipodal Coulomb energy.

    Descent steps are accepted only if the energy decreases (with backtracking),
    so the energy trace is non-increasing. Deterministic for a given seed.
    """
    if M < 2:
        raise InvalidArgument(f"M must be >= 2, got {M}")
    rng = substream(seed, "electrostatic", M)
    p = rng.standard_normal((M, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    energy = _coulomb_energy(p)
    trace = [energy]
    step = 0.1
    for _ in range(iterations):
        g = _coulomb_grad(p)
        # project gradient onto the tangent spaces
        g -= (g * p).sum(axis=1, keepdims=True) * p
        gn = np.linalg.norm(g)
        if gn < 1e-14:
            break
        accepted = False
        for _ in range(20):
            q = p - step * g / gn
            q /= np.linalg.norm(q, axis=1, keepdims=True)
            e = _coulomb_energy(q)
            if e < energy:
                p, energy = q, e
                accepted = True
                step *= 1.2
                break
            step *= 0.5
        trace.append(energy)
        if not accepted and step < 1e-15:
            break
    if return_trace:
        return p, trace
    return p


_ICO_T = (1.0 + math.sqrt(5.0)) / 2.0

_ICO_VERTS = [
    (-1.0, _ICO_T, 0.0), (1.0, _ICO_T, 0.0), (-1.0, -_ICO_T, 0.0), (1.0, -_ICO_T, 0.0),
    (0.0, -1.0, _ICO_T), (0.0, 1.0, _ICO_T), (0.0, -1.0, -_ICO_T), (0.0, 1.0, -_ICO_T),
    (_ICO_T, 0.0, -1.0), (_ICO_T, 0.0, 1.0), (-_ICO_T, 0.0, -1.0), (-_ICO_T, 0.0, 1.0),
]

_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


@lru_cache(maxsize=8)
def icosphere(level):
    """Subdivided icosahedron on the unit sphere with 1-ring adjacency.

    Returns (points, adjacency): points is (V, 3) with V = 10*4^level + 2,
    adjacency a tuple of sorted neighbor index tuples. Vertex order is
    deterministic. The vertex set is antipodally symmetric.
    """
    if level < 0:
        raise InvalidArgument(f"level must be >= 0, got {level}")
    verts = [np.array(v) / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = list(_ICO_FACES)
    for _ in range(level):
        midpoint = {}
        new_faces = []

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                v = verts[i] + verts[j]
                verts.append(v / np.linalg.norm(v))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        for (a, b, c) in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = new_faces
    pts = np.array(verts)
    nbrs = [set() for _ in range(len(verts))]
    for (a, b, c) in faces:
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
    adjacency = tuple(tuple(sorted(s)) for s in nbrs)
    pts.setflags(write=False)
    return pts, adjacency


def write_bvec(path, directions):
    """FSL-style bvec text: 3 rows of M whitespace-separated floats."""
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    with open(path, "w") as f:
        for row in d.T:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_bvec(path):
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split()])
    if len(rows) != 3:
        raise InvalidArgument(f"bvec file must have 3 rows, got {len(rows)}")
    m = len(rows[0])
    if any(len(r) != m for r in rows):
        raise InvalidArgument("bvec rows have unequal lengths")
    return np.array(rows).T
