"""Angular Matern prior: spectral density, diagonal precision, penalty form.

The prior on the coefficient field lives on the non-constant harmonics only;
the isotropic channel is handled by the network's mean head. The precision is
diagonal in the harmonic basis with entry 1/s(sqrt(l(l+1))) for a column of
degree l, so it grows rapidly with degree and the penalty acts as an angular
smoothness prior.
"""

import math

import numpy as np
from scipy.special import gammaln

from .sphere import degree_table
from .util import InvalidArgument


def matern_spectral_density(omega, nu, rho):
    """Spectral density of the spherical Matern kernel at frequency omega.

    s(omega) = 8 pi^(3/2) Gamma(nu + 3/2) (2 nu)^nu / (Gamma(nu) rho^(2 nu))
               * (2 nu / rho^2 + 4 pi^2 omega^2)^(-(nu + 3/2))
    Strictly positive and strictly decreasing in omega.
    """
    if nu <= 0 or rho <= 0:
        raise InvalidArgument(f"nu and rho must be positive, got nu={nu}, rho={rho}")
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0):
        raise InvalidArgument("omega must be >= 0")
    log_front = (
        math.log(8.0)
        + 1.5 * math.log(math.pi)
        + gammaln(nu + 1.5)
        + nu * math.log(2.0 * nu)
        - gammaln(nu)
        - 2.0 * nu * math.log(rho)
    )
    base = 2.0 * nu / rho**2 + 4.0 * math.pi**2 * omega**2
    out = np.exp(log_front - (nu + 1.5) * np.log(base))
    return float(out) if out.ndim == 0 else out


def prior_precision(l_max, nu, rho):
    """Diagonal precision over the non-constant harmonics, shape (K_total - 1,).

    Entry for a column of degree l is 1/s(sqrt(l(l+1))). Entries are equal
    within a degree and strictly increase with degree.
    """
    degs = degree_table(l_max)[1:]
    omega = np.sqrt(degs * (degs + 1.0))
    return 1.0 / matern_spectral_density(omega, nu, rho)


def penalty_quadform(W, Xi, R):
    """Mean over feature columns of xi^T W^T diag(R) W xi.

    Monte-Carlo estimate of the integrated angular roughness of the
    coefficient field c(v) = W xi(v); non-negative, zero iff W Xi == 0.
    """
    W = np.asarray(W, dtype=float)
    Xi = np.asarray(Xi, dtype=float)
    R = np.asarray(R, dtype=float)
    if W.ndim != 2 or Xi.ndim != 2 or W.shape[1] != Xi.shape[0]:
        raise InvalidArgument(f"shape mismatch: W {W.shape} vs Xi {Xi.shape}")
    if R.shape != (W.shape[0],):
        raise InvalidArgument(f"R must have length {W.shape[0]}, got {R.shape}")
    C = W @ Xi
    return float(np.mean(np.sum(R[:, None] * C * C, axis=0)))
