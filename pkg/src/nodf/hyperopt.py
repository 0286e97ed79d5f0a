"""Hyper-parameter search for the angular penalty weight (and optionally gamma).

A scrambled Sobol design seeds the search; a small Gaussian-process surrogate
(constant mean, ARD Matern-5/2 kernel, hyper-parameters picked by marginal
likelihood over a coarse grid) proposes new candidates by maximizing expected
improvement over a fresh low-discrepancy cloud. The objective is the held-out
data log-likelihood of a model trained at the candidate configuration.
"""

import json
import time
import warnings

import numpy as np
import scipy.linalg
from scipy.stats import norm, qmc

from . import estimator, field, prior
from .util import Diverged, InvalidArgument, substream

LENGTHSCALE_MULTIPLIERS = (0.05, 0.1, 0.25, 0.5, 1.0)
NOISE_LEVELS = (1e-6, 1e-4, 1e-2)


def partition(n, p, seed):
    """Disjoint (train, test) index split of range(n) with train fraction p."""
    if not 0 < p < 1:
        raise InvalidArgument(f"p must be in (0, 1), got {p}")
    n_train = int(round(p * n))
    n_train = min(max(n_train, 1), n - 1)
    perm = substream(seed, "split").permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _sobol(dims, n, rng):
    eng = qmc.Sobol(d=dims, scramble=True, seed=rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return eng.random(n)


def _scale(unit, box):
    box = np.asarray(box, dtype=float)
    return box[:, 0] + unit * (box[:, 1] - box[:, 0])


def resolve_candidate(x):
    """Map a search point to model hyper-parameters.

    One coordinate: log10 of the penalty weight. Three coordinates add the
    spectral-prior smoothness and length-scale.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lam_c = 10.0 ** x[0]
    if x.size == 1:
        return lam_c, None, None
    if x.size == 3:
        return lam_c, float(x[1]), float(x[2])
    raise InvalidArgument(f"candidate must have 1 or 3 coordinates, got {x.size}")


def evaluate_config(x, coords, Y, Phi_G, R, cfg, sigma_e2, split):
    """Train at candidate x on the train split, score the test split.

    Returns the i.i.d. Gaussian log-likelihood of the held-out voxels at the
    fitted parameters, or -inf when training diverges.
    """
    lam_c, nu, rho = resolve_candidate(x)
    if nu is not None:
        R = prior.prior_precision(estimator._l_max_for(Phi_G.shape[1]), nu=nu, rho=rho)
    tr, te = split
    iters = cfg["bo"].get("iters") or cfg["iters"]
    params = field.init_params(
        D=coords.shape[1],
        d0=cfg["encoding_width"],
        L=cfg["layers"],
        r=cfg["width"],
        K=Phi_G.shape[1],
        omega0=cfg["omega0"],
        seed=cfg["seed"],
        encoding_scale=cfg["encoding_scale"],
    )
    try:
        estimator.train(
            params, coords[tr], Y[:, tr], Phi_G, R, lam_c, n_iters=iters, lr=cfg["lr"]
        )
    except Diverged as exc:
        warnings.warn(f"training diverged at x={np.asarray(x).tolist()}: {exc}")
        return -np.inf
    return estimator.data_loglik(params, coords[te], Y[:, te], Phi_G, sigma_e2)


def dataset_objective(coords, Y, Phi_G, R, cfg, b0=None):
    """Bind a deterministic objective closure over one voxel set."""
    coords = np.asarray(coords, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if cfg["sigma_e2"] is not None:
        sigma_e2 = float(cfg["sigma_e2"])
    elif b0 is not None:
        sigma_e2 = estimator.estimate_sigma_e(b0)
    else:
        raise InvalidArgument("objective needs sigma_e2 in config or b0 volumes")
    split = partition(coords.shape[0], cfg["bo"]["p"], cfg["seed"])

    def objective(x):
        return evaluate_config(x, coords, Y, Phi_G, R, cfg, sigma_e2, split)

    return objective


class Surrogate:
    """Zero-mean (after standardization) GP on the scaled box."""

    def __init__(self, X, y, box, lengthscales, noise, y_mean, y_std):
        self.X = X
        self.y = y
        self.box = np.asarray(box, dtype=float)
        self.lengthscales = lengthscales
        self.noise = noise
        self.y_mean = y_mean
        self.y_std = y_std
        K = _matern52(X, X, lengthscales) + (noise + 1e-10) * np.eye(len(y))
        self.chol_L = scipy.linalg.cholesky(K, lower=True)
        self.alpha = scipy.linalg.cho_solve((self.chol_L, True), y)

    def predict(self, Xq):
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        Ks = _matern52(Xq, self.X, self.lengthscales)
        mean = Ks @ self.alpha
        v = scipy.linalg.solve_triangular(self.chol_L, Ks.T, lower=True)
        var = 1.0 - np.sum(v * v, axis=0)
        sd = np.sqrt(np.clip(var, 0.0, None))
        return self.y_mean + self.y_std * mean, self.y_std * sd


def _matern52(A, B, lengthscales):
    diff = (A[:, None, :] - B[None, :, :]) / lengthscales[None, None, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    s = np.sqrt(5.0) * d
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


def _finite_fill(y):
    """Replace -inf sentinels with a value clearly below the finite range."""
    y = np.asarray(y, dtype=float)
    finite = np.isfinite(y)
    if finite.all():
        return y
    if not finite.any():
        raise Diverged("all hyper-parameter evaluations diverged")
    good = y[finite]
    spread = good.max() - good.min()
    fill = good.min() - 2.0 * (spread if spread > 0 else max(abs(good.min()), 1.0))
    out = y.copy()
    out[~finite] = fill
    return out


def surrogate_fit(X, y, box):
    """Fit kernel hyper-parameters by marginal likelihood over a coarse grid."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = _finite_fill(y)
    if len(y) < 2:
        raise InvalidArgument("surrogate needs at least 2 observations")
    y_mean = float(y.mean())
    y_std = float(y.std())
    if y_std == 0.0:
        y_std = 1.0
    ys = (y - y_mean) / y_std
    box = np.asarray(box, dtype=float)
    widths = box[:, 1] - box[:, 0]
    n = len(ys)

    best = (None, -np.inf)
    for mult in LENGTHSCALE_MULTIPLIERS:
        ls = mult * widths
        K0 = _matern52(X, X, ls)
        for nz in NOISE_LEVELS:
            K = K0 + (nz + 1e-10) * np.eye(n)
            try:
                L = scipy.linalg.cholesky(K, lower=True)
            except scipy.linalg.LinAlgError:
                continue
            a = scipy.linalg.solve_triangular(L, ys, lower=True)
            mll = -0.5 * (a @ a) - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi)
            if mll > best[1]:
                best = ((ls, nz), mll)
    if best[0] is None:
        raise Diverged("no surrogate hyper-parameters gave a valid kernel")
    ls, nz = best[0]
    return Surrogate(X, ys, box, ls, nz, y_mean, y_std)


def expected_improvement(surrogate, Xq, best):
    """Closed-form EI for maximization; zero where sd=0 and mean <= best."""
    mean, sd = surrogate.predict(Xq)
    out = np.maximum(mean - best, 0.0)
    pos = sd > 0
    z = (mean[pos] - best) / sd[pos]
    out[pos] = (mean[pos] - best) * norm.cdf(z) + sd[pos] * norm.pdf(z)
    return out


def bo_loop(box, max_trials, n0, seed, objective, ledger_path=None):
    """Sequential model-based search; returns (best_x, trials).

    trials is a list of dicts with keys x, value, kind ("init" or "ei").
    When ledger_path is given, one JSON line per trial is appended.
    """
    box = np.asarray(box, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2 or np.any(box[:, 1] <= box[:, 0]):
        raise InvalidArgument("box must be a list of [lo, hi] pairs with lo < hi")
    if not max_trials >= n0 >= 2:
        raise InvalidArgument(f"need max_trials >= n0 >= 2, got {max_trials}, {n0}")
    dims = box.shape[0]
    X0 = _scale(_sobol(dims, n0, substream(seed, "bo-init")), box)

    trials = []

    def run(x, kind):
        t0 = time.perf_counter()
        val = float(objective(x))
        trials.append({"x": x.tolist(), "value": val, "kind": kind})
        if ledger_path is not None:
            with open(ledger_path, "a") as f:
                f.write(
                    json.dumps(
                        {
                            "x": x.tolist(),
                            "value": val,
                            "seed": seed,
                            "wall_time": time.perf_counter() - t0,
                        }
                    )
                    + "\n"
                )
        return val

    for i in range(n0):
        run(X0[i], "init")

    t = n0
    while t < max_trials:
        values = np.array([tr["value"] for tr in trials])
        if np.isfinite(values).any():
            X = np.array([tr["x"] for tr in trials])
            sur = surrogate_fit(X, values, box)
            best_val = float(np.max(values[np.isfinite(values)]))
            cand = _scale(_sobol(dims, 1024, substream(seed, "bo-cand", t)), box)
            ei = expected_improvement(sur, cand, best_val)
            x_next = cand[int(np.argmax(ei))]
        else:
            x_next = _scale(_sobol(dims, 1, substream(seed, "bo-retry", t)), box)[0]
        run(x_next, "ei")
        t += 1

    values = np.array([tr["value"] for tr in trials])
    if not np.isfinite(values).any():
        raise Diverged("all hyper-parameter evaluations diverged")
    best_i = int(np.argmax(np.where(np.isfinite(values), values, -np.inf)))
    return np.array(trials[best_i]["x"]), trials
