"""Training driver, variance estimation, and the closed-form posterior field.

The generative model, conditional on the trained coordinate network, is a
Bayesian linear regression in the coefficient head W with a diagonal spectral
prior: rows of W see prior precision R / sigma_w^2, the data see i.i.d.
Gaussian noise sigma_e^2. Conjugacy gives vec(W) | Y ~ N(m, Lambda^{-1}) with

    Lambda = (1/sigma_e^2) ((sigma_e^2/sigma_w^2) I_r (x) diag(R)
                            + Xi Xi^T (x) Phi_G^T Phi_G)
    m = (1/sigma_e^2) Lambda^{-1} vec(Phi_G^T Y_c Xi^T)

where (x) is the Kronecker product, vec stacks columns, Xi is the r x N
feature matrix of the training voxels, Phi_G maps non-constant coefficients
to signal values, and Y_c = Y - 1_M mu^T Xi removes the isotropic channel.

Unit convention: mu^T xi(v) is the isotropic level of the SIGNAL. All
orientation-space outputs map it through the constant-harmonic transform
eigenvalue 2*pi, so the returned function values and coefficient vectors are
consistent with coefficient fields produced by the phantom module (where the
constant channel is included in the forward transform).
"""

from dataclasses import dataclass

import json
import warnings

import numpy as np
import scipy.linalg

from . import field as field_mod
from . import prior as prior_mod
from . import sphere
from .util import IllConditioned, InvalidArgument, substream

PHI0 = 1.0 / (2.0 * np.sqrt(np.pi))
ODF_MEAN_SCALE = 2.0 * np.pi
# constant-channel coefficient per unit of signal isotropic level
ODF_COEFF_SCALE = ODF_MEAN_SCALE / PHI0

STATE_VERSION = 1


@dataclass
class VarianceParams:
    sigma_e2: float
    sigma_w2: float
    sigma_mu2: float

    def __post_init__(self):
        for name in ("sigma_e2", "sigma_w2", "sigma_mu2"):
            val = float(getattr(self, name))
            if not np.isfinite(val) or val < 0:
                raise InvalidArgument(f"{name} must be finite and >= 0, got {val}")
            setattr(self, name, val)


def estimate_sigma_e(b0):
    """Noise floor from repeated baseline volumes: mean per-voxel sample variance."""
    b0 = np.atleast_2d(np.asarray(b0, dtype=float))
    if b0.shape[1] < 2:
        raise InvalidArgument(f"need >= 2 baseline volumes per voxel, got {b0.shape[1]}")
    return float(np.mean(np.var(b0, axis=1, ddof=1)))


def train(params, coords, Y, Phi_G, R, lam_c, n_iters=500, lr=1e-4):
    """Full-batch Adam on the penalized least-squares objective.

    Mutates params in place; returns (params, loss_history).
    """
    if n_iters < 1:
        raise InvalidArgument(f"n_iters must be >= 1, got {n_iters}")
    state = field_mod.OptimizerState(params, lr=lr)
    losses = np.empty(n_iters)
    for t in range(n_iters):
        loss, grads = field_mod.loss_and_grad(params, coords, Y, Phi_G, R, lam_c)
        losses[t] = loss
        field_mod.adam_step(state, params, grads)
    return params, losses


def build_precision(XiXiT, PhiTPhi, R, sigma_e2, sigma_w2):
    """Dense posterior precision over vec(W), column-major vec convention."""
    r = XiXiT.shape[0]
    K = PhiTPhi.shape[0]
    Lam = np.kron(XiXiT, PhiTPhi) / sigma_e2
    idx = np.arange(r * K)
    Lam[idx, idx] += np.tile(R, r) / sigma_w2
    return Lam


def _factor(Lam, context=""):
    """Lower Cholesky with a single logged jitter retry."""
    try:
        return scipy.linalg.cholesky(Lam, lower=True)
    except scipy.linalg.LinAlgError:
        n = Lam.shape[0]
        jitter = 1e-10 * np.trace(Lam) / n
        warnings.warn(f"adding diagonal jitter {jitter:.3e} to the posterior precision {context}")
        try:
            return scipy.linalg.cholesky(Lam + jitter * np.eye(n), lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise IllConditioned(
                f"posterior precision not positive definite (size {n}, "
                f"trace {np.trace(Lam):.3e}, jitter {jitter:.3e}) {context}"
            ) from exc


class PosteriorState:
    """Conditioned model: trained field plus the Gaussian over the coefficient head.

    Immutable once assembled; safe for concurrent queries. The inverse
    precision is materialized lazily on first variance query.
    """

    def __init__(self, params, coords, Xi, Phi_G, R, chol_L, rhs, projection, W_mean,
                 variances, gamma, l_max, info=None):
        self.params = params
        self.coords = coords
        self.Xi = Xi
        self.Phi_G = Phi_G
        self.R = R
        self.chol_L = chol_L
        self.rhs = rhs
        self.projection = projection
        self.W_mean = W_mean
        self.variances = variances
        self.gamma = gamma
        self.l_max = l_max
        self.info = dict(info) if info else {}
        self.XiXiT = Xi @ Xi.T
        self.PhiTPhi = Phi_G.T @ Phi_G
        self._minv4 = None

    @property
    def r(self):
        return self.Xi.shape[0]

    @property
    def K(self):
        return self.Phi_G.shape[1]

    def _inv4(self):
        # Lambda^{-1} reshaped so [j, k, j2, k2] indexes (row k + K j, col k2 + K j2)
        if self._minv4 is None:
            rK = self.r * self.K
            inv = scipy.linalg.cho_solve((self.chol_L, True), np.eye(rK))
            self._minv4 = inv.reshape(self.r, self.K, self.r, self.K)
        return self._minv4


def _l_max_for(n_nonconstant):
    # None when the head width is not a full even-degree basis (synthetic tests)
    for l in range(0, 100, 2):
        if sphere.basis_size(l) == n_nonconstant + 1:
            return l
    return None


def assemble_posterior(params, coords, Y, Phi_G, R, variances, gamma=(1.0, 0.5), info=None):
    """Condition the coefficient head on the voxel data (coords, Y)."""
    if variances.sigma_e2 <= 0 or variances.sigma_w2 <= 0:
        raise InvalidArgument("sigma_e2 and sigma_w2 must be > 0 for posterior assembly")
    Y = np.asarray(Y, dtype=float)
    Phi_G = np.asarray(Phi_G, dtype=float)
    R = np.asarray(R, dtype=float)
    Xi = field_mod.features(params, coords)
    if Y.shape != (Phi_G.shape[0], Xi.shape[1]):
        raise InvalidArgument(
            f"Y must be (M={Phi_G.shape[0]}, N={Xi.shape[1]}), got {Y.shape}"
        )
    K = Phi_G.shape[1]
    l_max = _l_max_for(K)

    Lam = build_precision(Xi @ Xi.T, Phi_G.T @ Phi_G, R, variances.sigma_e2, variances.sigma_w2)
    chol_L = _factor(Lam, context=f"(N={Xi.shape[1]})")
    Yc = Y - (params.mu @ Xi)[None, :]
    rhs = (Phi_G.T @ Yc @ Xi.T).ravel(order="F")
    projection = scipy.linalg.cho_solve((chol_L, True), rhs)
    W_mean = (projection / variances.sigma_e2).reshape(K, Xi.shape[0], order="F")
    return PosteriorState(
        params, np.atleast_2d(np.asarray(coords, dtype=float)), Xi, Phi_G, R,
        chol_L, rhs, projection, W_mean, variances, gamma, l_max, info,
    )


def _query_features(state, coords):
    V = np.asarray(coords, dtype=float)
    single = V.ndim == 1
    Xi = field_mod.features(state.params, np.atleast_2d(V))
    return Xi, single


def _coeff_cov_batch(state, Xi_q):
    """C(v) for each feature column: (n, K, K) posterior coefficient covariances."""
    inv4 = state._inv4()
    A = np.tensordot(Xi_q.T, inv4, axes=([1], [0]))
    return np.einsum("nkjl,jn->nkl", A, Xi_q)


def posterior_odf(state, coords, directions):
    """Pointwise posterior mean and variance of the orientation density.

    coords may be one coordinate (D,) or a batch (n, D); returns arrays of
    shape (M,) or (n, M) over the given unit directions.
    """
    if state.l_max is None:
        raise InvalidArgument("head width is not a full even-degree basis; no direction queries")
    Xi_q, single = _query_features(state, coords)
    Phi_d = sphere.sh_matrix(directions, state.l_max)[:, 1:]
    iso = ODF_MEAN_SCALE * (state.params.mu @ Xi_q)
    mean = iso[:, None] + (Phi_d @ (state.W_mean @ Xi_q)).T
    C = _coeff_cov_batch(state, Xi_q)
    var = np.einsum("mk,nkl,ml->nm", Phi_d, C, Phi_d)
    var = var + ODF_MEAN_SCALE**2 * state.variances.sigma_mu2
    if single:
        return mean[0], var[0]
    return mean, var


def posterior_coeffs(state, v):
    """Posterior mean and covariance of the full coefficient vector at one voxel.

    Slot 0 is the constant channel mapped to orientation space; the isotropic
    signal level contributes with variance sigma_mu2 scaled accordingly.
    """
    Xi_q, _ = _query_features(state, v)
    xi = Xi_q[:, 0]
    K = state.K
    mean = np.empty(K + 1)
    mean[0] = ODF_COEFF_SCALE * float(state.params.mu @ xi)
    mean[1:] = state.W_mean @ xi
    cov = np.zeros((K + 1, K + 1))
    cov[0, 0] = ODF_COEFF_SCALE**2 * state.variances.sigma_mu2
    C = _coeff_cov_batch(state, Xi_q)[0]
    cov[1:, 1:] = 0.5 * (C + C.T)
    return mean, cov


def credible_interval(state, v, directions, alpha=0.05):
    """Symmetric central interval with miscoverage alpha per direction."""
    if not 0 < alpha < 1:
        raise InvalidArgument(f"alpha must be in (0, 1), got {alpha}")
    from scipy.stats import norm

    mean, var = posterior_odf(state, v, directions)
    half = norm.ppf(1.0 - alpha / 2.0) * np.sqrt(var)
    return mean - half, mean + half


def sample_odf(state, v, n_samples, seed=0):
    """Joint coefficient draws at one voxel, shape (n_samples, K+1).

    Column 0 carries the constant channel including its own mean-level draw;
    the rest are exact draws from the coefficient head posterior.
    """
    if n_samples < 1:
        raise InvalidArgument(f"n_samples must be >= 1, got {n_samples}")
    Xi_q, _ = _query_features(state, v)
    xi = Xi_q[:, 0]
    r, K = state.r, state.K
    rng = substream(seed, "odf-sample")
    Z = rng.standard_normal((r * K, n_samples))
    dev = scipy.linalg.solve_triangular(state.chol_L, Z, lower=True, trans="T")
    vecs = state.W_mean.ravel(order="F")[:, None] + dev
    cube = vecs.reshape(K, r, n_samples, order="F")
    coeffs_nc = np.einsum("kjs,j->ks", cube, xi)
    iso = float(state.params.mu @ xi)
    z0 = rng.standard_normal(n_samples)
    out = np.empty((n_samples, K + 1))
    out[:, 0] = ODF_COEFF_SCALE * (iso + np.sqrt(state.variances.sigma_mu2) * z0)
    out[:, 1:] = coeffs_nc.T
    return out


def _gaussian_loglik(y, mean, cov):
    L = scipy.linalg.cholesky(cov, lower=True)
    a = scipy.linalg.solve_triangular(L, y - mean, lower=True)
    return float(
        -0.5 * (a @ a) - np.log(np.diag(L)).sum() - 0.5 * len(y) * np.log(2.0 * np.pi)
    )


def _signal_rhs_block(xi, Phi_G):
    # (rK, M) matrix mapping signal directions into the vec(W) domain:
    # row k + K j, column m holds xi[j] * Phi_G[m, k]
    return np.kron(xi[:, None], Phi_G.T)


def predictive_loglik(state, y, v, sigma_w2=None, sigma_mu2=None):
    """Log density of a new signal vector y at coordinate v.

    The covariance adds a fully correlated mean-channel term, the projected
    coefficient uncertainty, and the noise floor. The state must already be
    assembled at the requested sigma_w2.
    """
    if sigma_w2 is not None and not np.isclose(sigma_w2, state.variances.sigma_w2):
        raise InvalidArgument(
            "state was assembled at a different sigma_w2; reassemble before scoring"
        )
    smu2 = state.variances.sigma_mu2 if sigma_mu2 is None else float(sigma_mu2)
    y = np.asarray(y, dtype=float)
    M = state.Phi_G.shape[0]
    if y.shape != (M,):
        raise InvalidArgument(f"y must have shape ({M},), got {y.shape}")
    Xi_q, _ = _query_features(state, v)
    xi = Xi_q[:, 0]
    mean = float(state.params.mu @ xi) + state.Phi_G @ (state.W_mean @ xi)
    Z = _signal_rhs_block(xi, state.Phi_G)
    mid = Z.T @ scipy.linalg.cho_solve((state.chol_L, True), Z)
    cov = 0.5 * (mid + mid.T) + smu2 + state.variances.sigma_e2 * np.eye(M)
    return _gaussian_loglik(y, mean, cov)


def calibrate(state, coords_calib, Y_calib, sigma_w2_grid, sigma_mu2_grid):
    """Grid maximum of the summed held-out predictive log-likelihood.

    Reassembles the precision once per sigma_w2 value, reusing the state's
    cached Gram matrices and right-hand side. Returns (sigma_w2, sigma_mu2,
    table) where table[i, j] sums the log-likelihoods at grid cell (i, j).
    """
    sw_grid = np.asarray(sigma_w2_grid, dtype=float)
    smu_grid = np.asarray(sigma_mu2_grid, dtype=float)
    if sw_grid.size == 0 or smu_grid.size == 0:
        raise InvalidArgument("calibration grids must be non-empty")
    coords_calib = np.atleast_2d(np.asarray(coords_calib, dtype=float))
    Y_calib = np.asarray(Y_calib, dtype=float)
    n_c = coords_calib.shape[0]
    M = state.Phi_G.shape[0]
    if n_c == 0:
        raise InvalidArgument("calibration set is empty")
    if Y_calib.shape != (M, n_c):
        raise InvalidArgument(f"Y_calib must be (M={M}, {n_c}), got {Y_calib.shape}")

    se2 = state.variances.sigma_e2
    Xi_c = field_mod.features(state.params, coords_calib)
    r, K = state.r, state.K
    Zstack = np.einsum("ji,mk->jkim", Xi_c, state.Phi_G).reshape(r * K, n_c * M)
    iso = state.params.mu @ Xi_c

    table = np.empty((sw_grid.size, smu_grid.size))
    eye = np.eye(M)
    for a, sw2 in enumerate(sw_grid):
        Lam = build_precision(state.XiXiT, state.PhiTPhi, state.R, se2, sw2)
        chol_L = _factor(Lam, context=f"(calibration sigma_w2={sw2:.3e})")
        Wm = (scipy.linalg.cho_solve((chol_L, True), state.rhs) / se2).reshape(
            K, r, order="F"
        )
        solved = scipy.linalg.cho_solve((chol_L, True), Zstack)
        means = iso[None, :] + state.Phi_G @ (Wm @ Xi_c)
        for b in range(smu_grid.size):
            total = 0.0
            for i in range(n_c):
                sl = slice(i * M, (i + 1) * M)
                mid = Zstack[:, sl].T @ solved[:, sl]
                cov = 0.5 * (mid + mid.T) + smu_grid[b] + se2 * eye
                total += _gaussian_loglik(Y_calib[:, i], means[:, i], cov)
            table[a, b] = total
    best = np.unravel_index(int(np.argmax(table)), table.shape)
    return float(sw_grid[best[0]]), float(smu_grid[best[1]]), table


def data_loglik(params, coords, Y, Phi_G, sigma_e2):
    """I.i.d. Gaussian log-likelihood of the voxel signals at the fitted field."""
    if sigma_e2 <= 0:
        raise InvalidArgument(f"sigma_e2 must be > 0, got {sigma_e2}")
    Y = np.asarray(Y, dtype=float)
    P = field_mod.predict_signals(params, coords, Phi_G)
    resid = float(np.sum((Y - P) ** 2))
    MN = Y.size
    return -0.5 * resid / sigma_e2 - 0.5 * MN * np.log(2.0 * np.pi * sigma_e2)


DEFAULT_CONFIG = {
    "l_max": 8,
    "nu": 1.0,
    "rho": 0.5,
    "encoding_width": 64,
    "layers": 3,
    "width": 64,
    "omega0": 30.0,
    "encoding_scale": 1.0,
    "lr": 1e-4,
    "iters": 500,
    "seed": 0,
    "n_calib": 64,
    "lambda_mode": "bo",
    "lambda_c": 1e-3,
    "bo": {"box": [[-6.0, 2.0]], "n0": 5, "max_trials": 20, "p": 0.9},
    "sigma_w2_grid": list(np.logspace(-1, 3, 5)),
    "sigma_mu2_grid": list(np.logspace(-8, -4, 5)),
    "sigma_e2": None,
}


def resolve_config(config=None):
    """Overlay a partial config dict onto the defaults (one level deep for 'bo')."""
    out = {k: v for k, v in DEFAULT_CONFIG.items()}
    out["bo"] = dict(DEFAULT_CONFIG["bo"])
    for k, v in (config or {}).items():
        if k == "bo":
            out["bo"].update(v)
        elif k in out:
            out[k] = v
        else:
            raise InvalidArgument(f"unknown config key {k!r}")
    return out


def design_matrices(directions, l_max):
    """Signal design matrix for the non-constant channels (inverse spectrum applied)."""
    Phi = sphere.sh_matrix(directions, l_max)
    spec = sphere.funk_radon_spectrum(l_max)
    return Phi[:, 1:] * spec.inverse[None, 1:]


def fit_pipeline(dataset, config=None):
    """Full estimation pass: split, select lambda_c, train, calibrate, condition.

    dataset must expose coords (N, D), signals (M, N), directions (M, 3), and,
    unless config['sigma_e2'] is set, b0 (N, p). Returns a PosteriorState
    conditioned on all voxels, with diagnostics in state.info.
    """
    cfg = resolve_config(config)
    coords = np.asarray(dataset.coords, dtype=float)
    Y = np.asarray(dataset.signals, dtype=float)
    dirs = np.asarray(dataset.directions, dtype=float)
    N, D = coords.shape
    if Y.shape != (dirs.shape[0], N):
        raise InvalidArgument(f"signals must be (M, N) = ({dirs.shape[0]}, {N}), got {Y.shape}")

    n_calib = int(cfg["n_calib"])
    if N <= n_calib:
        raise InvalidArgument(f"need more than n_calib={n_calib} voxels, got {N}")
    l_max = cfg["l_max"]
    Phi_G = design_matrices(dirs, l_max)
    R = prior_mod.prior_precision(l_max, nu=cfg["nu"], rho=cfg["rho"])
    K = Phi_G.shape[1]
    seed = int(cfg["seed"])

    rng = substream(seed, "calib-split")
    calib_idx = np.sort(rng.choice(N, size=n_calib, replace=False))
    mask = np.ones(N, dtype=bool)
    mask[calib_idx] = False
    train_idx = np.flatnonzero(mask)
    coords_tr, Y_tr = coords[train_idx], Y[:, train_idx]

    if cfg["lambda_mode"] == "fixed":
        lam_c = float(cfg["lambda_c"])
        trials = None
    elif cfg["lambda_mode"] == "bo":
        from . import hyperopt

        best, trials = hyperopt.bo_loop(
            box=cfg["bo"]["box"],
            max_trials=cfg["bo"]["max_trials"],
            n0=cfg["bo"]["n0"],
            seed=seed,
            objective=hyperopt.dataset_objective(
                coords_tr, Y_tr, Phi_G, R, cfg, b0=getattr(dataset, "b0", None)
            ),
        )
        lam_c = 10.0 ** best[0]
    else:
        raise InvalidArgument(f"unknown lambda_mode {cfg['lambda_mode']!r}")

    params = field_mod.init_params(
        D=D,
        d0=cfg["encoding_width"],
        L=cfg["layers"],
        r=cfg["width"],
        K=K,
        omega0=cfg["omega0"],
        seed=seed,
        encoding_scale=cfg["encoding_scale"],
    )
    params, losses = train(
        params, coords_tr, Y_tr, Phi_G, R, lam_c, n_iters=cfg["iters"], lr=cfg["lr"]
    )

    if cfg["sigma_e2"] is not None:
        sigma_e2 = float(cfg["sigma_e2"])
    else:
        b0 = getattr(dataset, "b0", None)
        if b0 is None:
            raise InvalidArgument("config sigma_e2 not set and dataset has no b0 volumes")
        sigma_e2 = estimate_sigma_e(b0)

    sw_grid = np.asarray(cfg["sigma_w2_grid"], dtype=float)
    smu_grid = np.asarray(cfg["sigma_mu2_grid"], dtype=float)
    gamma = (cfg["nu"], cfg["rho"])
    state_tr = assemble_posterior(
        params, coords_tr, Y_tr, Phi_G, R,
        VarianceParams(sigma_e2, sw_grid[0], smu_grid[0]), gamma,
    )
    sw2, smu2, table = calibrate(state_tr, coords[calib_idx], Y[:, calib_idx], sw_grid, smu_grid)

    info = {
        "lambda_c": lam_c,
        "train_loss": losses,
        "calib_idx": calib_idx,
        "sigma_e2": sigma_e2,
        "calib_table": table,
        "bo_trials": trials,
    }
    return assemble_posterior(
        params, coords, Y, Phi_G, R, VarianceParams(sigma_e2, sw2, smu2), gamma, info=info
    )


def save_state(state, dirpath):
    """Checkpoint directory: field weights, factor blobs, JSON metadata."""
    import os

    os.makedirs(dirpath, exist_ok=True)
    field_mod.save_params(state.params, os.path.join(dirpath, "field.ckpt"))
    arrays = {
        "coords": state.coords,
        "Xi": state.Xi,
        "Phi_G": state.Phi_G,
        "R": state.R,
        "chol_L": state.chol_L,
        "rhs": state.rhs,
        "projection": state.projection,
        "W_mean": state.W_mean,
    }
    for name, arr in arrays.items():
        np.save(os.path.join(dirpath, name + ".npy"), np.asarray(arr, dtype="<f8"))
    meta = {
        "version": STATE_VERSION,
        "l_max": state.l_max,
        "gamma": [float(g) for g in state.gamma],
        "variances": {
            "sigma_e2": state.variances.sigma_e2,
            "sigma_w2": state.variances.sigma_w2,
            "sigma_mu2": state.variances.sigma_mu2,
        },
    }
    with open(os.path.join(dirpath, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_state(dirpath):
    import os

    with open(os.path.join(dirpath, "meta.json")) as f:
        meta = json.load(f)
    if meta.get("version") != STATE_VERSION:
        raise InvalidArgument(f"unsupported checkpoint version {meta.get('version')}")
    params = field_mod.load_params(os.path.join(dirpath, "field.ckpt"))
    arrays = {}
    for name in ("coords", "Xi", "Phi_G", "R", "chol_L", "rhs", "projection", "W_mean"):
        arrays[name] = np.load(os.path.join(dirpath, name + ".npy"))
    v = meta["variances"]
    return PosteriorState(
        params,
        arrays["coords"],
        arrays["Xi"],
        arrays["Phi_G"],
        arrays["R"],
        arrays["chol_L"],
        arrays["rhs"],
        arrays["projection"],
        arrays["W_mean"],
        VarianceParams(v["sigma_e2"], v["sigma_w2"], v["sigma_mu2"]),
        tuple(meta["gamma"]),
        meta["l_max"],
    )
