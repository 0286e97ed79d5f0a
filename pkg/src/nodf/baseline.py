"""Voxel-independent harmonic ridge baseline with residual bootstrap intervals.

Each voxel's signal is fit separately by penalized least squares,

    chat = argmin ||y - Phi c||^2 + lam c^T L c,

where L = diag(l^2 (l+1)^2) is the spectral form of the squared
Laplace-Beltrami operator on the harmonic basis. The ridge penalty is selected
by generalized cross validation. Uncertainty comes from a leverage-adjusted
residual bootstrap: residuals are rescaled by 1/sqrt(d_m) with
d_m = [(I-H)(I-H)]_mm, resampled with replacement within each voxel, and the
fit is repeated on each synthetic signal set.
"""

from dataclasses import dataclass

import json
import os

import numpy as np
import scipy.linalg

from . import sphere
from .util import IllConditioned, InvalidArgument, substream


def laplace_penalty(l_max):
    """Diagonal of the roughness penalty matrix over all basis columns."""
    degs = sphere.degree_table(l_max)
    return (degs * (degs + 1.0)) ** 2


@dataclass
class ShlsFit:
    coeffs: np.ndarray    # (N, K_total)
    lam: float
    leverage: np.ndarray  # (M,) diagonal of (I-H)^2
    solver: np.ndarray    # (K_total, M), maps a signal vector to coefficients
    fitted: np.ndarray    # (M, N)


def _solver_and_hat(Phi, lam):
    Phi = np.asarray(Phi, dtype=float)
    M, K = Phi.shape
    if lam < 0:
        raise InvalidArgument(f"lam must be >= 0, got {lam}")
    l_max = _l_max_for_total(K)
    A = Phi.T @ Phi + lam * np.diag(laplace_penalty(l_max))
    try:
        cf = scipy.linalg.cho_factor(A)
    except scipy.linalg.LinAlgError as exc:
        raise IllConditioned(
            f"normal matrix is rank deficient (M={M}, K={K}, lam={lam}); "
            "need M >= K or lam > 0"
        ) from exc
    solver = scipy.linalg.cho_solve(cf, Phi.T)
    H = Phi @ solver
    return solver, H


def _l_max_for_total(K_total):
    for l in range(0, 100, 2):
        if sphere.basis_size(l) == K_total:
            return l
    raise InvalidArgument(f"{K_total} columns is not a full even-degree basis")


def shls_fit(Y, Phi, lam):
    """Per-voxel ridge fit of the signal matrix Y (M x N)."""
    Y = np.asarray(Y, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    if Y.shape[0] != Phi.shape[0]:
        raise InvalidArgument(f"Y has {Y.shape[0]} rows but Phi has {Phi.shape[0]}")
    solver, H = _solver_and_hat(Phi, lam)
    coeffs = (solver @ Y).T
    resid_op = np.eye(H.shape[0]) - H
    leverage = np.sum(resid_op * resid_op, axis=1)
    return ShlsFit(coeffs=coeffs, lam=float(lam), leverage=leverage,
                   solver=solver, fitted=Phi @ coeffs.T)


def hat_matrix(Phi, lam):
    """Smoothing matrix H mapping observed to fitted signal values."""
    return _solver_and_hat(Phi, lam)[1]


def gcv_select(Y, Phi, lam_grid):
    """Grid minimizer of summed per-voxel generalized cross validation."""
    grid = np.sort(np.asarray(lam_grid, dtype=float))
    if grid.size == 0:
        raise InvalidArgument("lam_grid must be non-empty")
    Y = np.asarray(Y, dtype=float)
    M = Y.shape[0]
    scores = np.empty(grid.size)
    for g, lam in enumerate(grid):
        H = hat_matrix(Phi, lam)
        resid = Y - H @ Y
        denom = (np.trace(np.eye(M) - H) / M) ** 2
        scores[g] = np.sum(resid * resid) / M / denom
    return float(grid[int(np.argmin(scores))])


def default_lambda_grid():
    return np.logspace(-6, -1, 21)


def residual_bootstrap(Y, Phi, lam, B, seed=0):
    """Leverage-adjusted within-voxel residual bootstrap.

    Returns coefficient replicates of shape (B, N, K_total). Residuals are
    not recentered; replicate b resamples each voxel's adjusted residuals
    with replacement and refits through the precomputed solver.
    """
    if B < 1:
        raise InvalidArgument(f"B must be >= 1, got {B}")
    fit = shls_fit(Y, Phi, lam)
    Y = np.asarray(Y, dtype=float)
    M, N = Y.shape
    adj = (Y - fit.fitted) / np.sqrt(fit.leverage)[:, None]
    rng = substream(seed, "shls-bootstrap")
    out = np.empty((B, N, fit.coeffs.shape[1]))
    cols = np.arange(N)[None, :]
    for b in range(B):
        idx = rng.integers(0, M, size=(M, N))
        Ystar = fit.fitted + adj[idx, cols]
        out[b] = (fit.solver @ Ystar).T
    return out


def bootstrap_intervals(replicates, directions, alpha=0.05):
    """Per-direction empirical interval of replicate ODF values at one voxel.

    replicates: (B, K_total) signal coefficient vectors. The forward transform
    spectrum maps them to ODF values before taking quantiles; quantiles use
    the interpolated inverted-CDF convention (order statistic at B*q).
    """
    replicates = np.asarray(replicates, dtype=float)
    if replicates.ndim != 2 or replicates.shape[0] < 2:
        raise InvalidArgument("need a (B >= 2, K_total) replicate matrix")
    if not 0 < alpha < 1:
        raise InvalidArgument(f"alpha must be in (0, 1), got {alpha}")
    K = replicates.shape[1]
    l_max = _l_max_for_total(K)
    spec = sphere.funk_radon_spectrum(l_max)
    Phi_d = sphere.sh_matrix(directions, l_max)
    vals = (Phi_d * spec.forward[None, :]) @ replicates.T
    lo = np.quantile(vals, alpha / 2.0, axis=1, method="interpolated_inverted_cdf")
    hi = np.quantile(vals, 1.0 - alpha / 2.0, axis=1, method="interpolated_inverted_cdf")
    return lo, hi


def odf_values(coeffs, directions):
    """ODF values for signal coefficient vectors (..., K_total)."""
    coeffs = np.asarray(coeffs, dtype=float)
    l_max = _l_max_for_total(coeffs.shape[-1])
    spec = sphere.funk_radon_spectrum(l_max)
    Phi_d = sphere.sh_matrix(directions, l_max)
    return coeffs @ (Phi_d * spec.forward[None, :]).T


def save_replicates(replicates, dirpath):
    """Binary replicate tensor [B, N, K_total] plus a JSON manifest."""
    os.makedirs(dirpath, exist_ok=True)
    arr = np.ascontiguousarray(replicates, dtype="<f8")
    with open(os.path.join(dirpath, "replicates.bin"), "wb") as f:
        f.write(arr.tobytes())
    with open(os.path.join(dirpath, "manifest.json"), "w") as f:
        json.dump({"shape": list(arr.shape), "dtype": "<f8", "order": "C"}, f)


def load_replicates(dirpath):
    with open(os.path.join(dirpath, "manifest.json")) as f:
        manifest = json.load(f)
    with open(os.path.join(dirpath, "replicates.bin"), "rb") as f:
        arr = np.frombuffer(f.read(), dtype=manifest["dtype"])
    return arr.reshape(manifest["shape"]).astype(float)
