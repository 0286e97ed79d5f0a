"""Sinusoidal coordinate network with linear heads, exact gradients, and Adam.

The network maps a voxel coordinate v in [-1, 1]^D to a feature vector
xi(v) in [-1, 1]^r:

    x0 = sin(W0 v + b0)
    xl = sin(omega0 (Wl x(l-1) + bl)),  l = 1..L
    xi = xL

Two linear heads sit on top: the coefficient matrix W (K x r) producing the
non-constant harmonic coefficients c(v) = W xi(v), and the mean vector mu (r)
producing the isotropic signal level mu^T xi(v). The training objective is

    (1/(M n)) ||Y - 1_M mu^T Xi - Phi_G W Xi||_F^2
        + lambda_c (1/n) sum_i xi_i^T W^T diag(R) W xi_i

with gradients written out by hand (no autodiff framework). All math is f64.
"""

import json
import struct
import warnings

import numpy as np

from .util import Diverged, InvalidArgument, substream

CHECKPOINT_VERSION = 1


class NeuralFieldParams:
    """Weights of the coordinate network plus the two heads."""

    def __init__(self, W0, b0, Ws, bs, W, mu, omega0):
        self.W0 = np.asarray(W0, dtype=float)
        self.b0 = np.asarray(b0, dtype=float)
        self.Ws = [np.asarray(w, dtype=float) for w in Ws]
        self.bs = [np.asarray(b, dtype=float) for b in bs]
        self.W = np.asarray(W, dtype=float)
        self.mu = np.asarray(mu, dtype=float)
        self.omega0 = float(omega0)
        self._check()

    def _check(self):
        d0 = self.W0.shape[0]
        if self.b0.shape != (d0,):
            raise InvalidArgument("b0 shape does not match W0")
        prev = d0
        for w, b in zip(self.Ws, self.bs):
            if w.shape[1] != prev or b.shape != (w.shape[0],):
                raise InvalidArgument("hidden layer shapes do not chain")
            prev = w.shape[0]
        if self.W.shape[1] != prev or self.mu.shape != (prev,):
            raise InvalidArgument("head shapes do not match feature width")
        for t in self.tensors().values():
            if not np.all(np.isfinite(t)):
                raise InvalidArgument("parameters must be finite")

    @property
    def width(self):
        return self.Ws[-1].shape[0] if self.Ws else self.W0.shape[0]

    @property
    def in_dim(self):
        return self.W0.shape[1]

    def tensors(self):
        out = {"W0": self.W0, "b0": self.b0, "W": self.W, "mu": self.mu}
        for i, (w, b) in enumerate(zip(self.Ws, self.bs)):
            out[f"Ws.{i}"] = w
            out[f"bs.{i}"] = b
        return out

    def copy(self):
        return NeuralFieldParams(
            self.W0.copy(),
            self.b0.copy(),
            [w.copy() for w in self.Ws],
            [b.copy() for b in self.bs],
            self.W.copy(),
            self.mu.copy(),
            self.omega0,
        )


def init_params(D, d0, L, r, K, omega0=30.0, seed=0, encoding_scale=1.0):
    """Seeded parameter draw.

    Encoding row weights are uniform in +-encoding_scale/D with uniform random
    phases; hidden and head weights are uniform in +-sqrt(6/fan_in)/omega0.
    """
    if min(D, d0, L, r, K) < 1:
        raise InvalidArgument("all dimensions must be >= 1")
    rng = substream(seed, "field-init")
    W0 = rng.uniform(-1.0, 1.0, size=(d0, D)) * (encoding_scale / D)
    b0 = rng.uniform(-np.pi, np.pi, size=d0)
    Ws, bs = [], []
    prev = d0
    for _ in range(L):
        bound = np.sqrt(6.0 / prev) / omega0
        Ws.append(rng.uniform(-bound, bound, size=(r, prev)))
        bs.append(rng.uniform(-bound, bound, size=r))
        prev = r
    bound = np.sqrt(6.0 / r) / omega0
    W = rng.uniform(-bound, bound, size=(K, r))
    mu = rng.uniform(-bound, bound, size=r)
    return NeuralFieldParams(W0, b0, Ws, bs, W, mu, omega0)


def _forward(params, coords):
    """Activations for a coordinate batch. Returns (Xi, cache)."""
    V = np.atleast_2d(np.asarray(coords, dtype=float))
    if V.shape[1] != params.in_dim:
        raise InvalidArgument(f"coords must be (n, {params.in_dim}), got {V.shape}")
    if np.any(np.abs(V) > 1.0 + 1e-12):
        warnings.warn("coordinates outside [-1, 1]^D; field evaluated anyway", stacklevel=3)
    A = [params.W0 @ V.T + params.b0[:, None]]
    X = [np.sin(A[0])]
    for w, b in zip(params.Ws, params.bs):
        A.append(params.omega0 * (w @ X[-1] + b[:, None]))
        X.append(np.sin(A[-1]))
    return X[-1], (V, A, X)


def features(params, coords):
    """Feature matrix Xi, shape (r, n)."""
    Xi, _ = _forward(params, coords)
    return Xi


def features_jacobian(params, v):
    """Analytic Jacobian d xi / d v at one coordinate, shape (r, D)."""
    v = np.asarray(v, dtype=float).reshape(1, -1)
    _, (V, A, X) = _forward(params, v)
    J = np.cos(A[0][:, 0])[:, None] * params.W0
    for w, a in zip(params.Ws, A[1:]):
        J = params.omega0 * np.cos(a[:, 0])[:, None] * (w @ J)
    return J


def predict_signals(params, coords, Phi_G):
    """Model signal matrix, column i = mu^T xi(v_i) 1_M + Phi_G W xi(v_i)."""
    Phi_G = np.asarray(Phi_G, dtype=float)
    if Phi_G.shape[1] != params.W.shape[0]:
        raise InvalidArgument(
            f"Phi_G has {Phi_G.shape[1]} columns but W has {params.W.shape[0]} rows"
        )
    Xi = features(params, coords)
    return params.mu @ Xi + Phi_G @ (params.W @ Xi)


def loss_and_grad(params, coords, Y, Phi_G, R, lam_c):
    """Penalized mean-squared objective and exact gradients.

    Returns (loss, grads) with grads keyed like params.tensors(). R is the
    diagonal prior precision over W's rows; lam_c >= 0 scales the penalty.
    """
    if lam_c < 0:
        raise InvalidArgument(f"lam_c must be >= 0, got {lam_c}")
    Y = np.asarray(Y, dtype=float)
    Phi_G = np.asarray(Phi_G, dtype=float)
    R = np.asarray(R, dtype=float)
    Xi, (V, A, X) = _forward(params, coords)
    n = Xi.shape[1]
    M = Y.shape[0]
    if Y.shape[1] != n:
        raise InvalidArgument(f"Y must have {n} columns, got {Y.shape[1]}")

    C = params.W @ Xi
    E = params.mu @ Xi + Phi_G @ C - Y
    mse = float(np.sum(E * E)) / (M * n)
    RC = R[:, None] * C
    pen = float(np.sum(C * RC)) / n
    loss = mse + lam_c * pen
    if not np.isfinite(loss):
        raise Diverged(f"non-finite loss (mse={mse}, penalty={pen})")

    dE = (2.0 / (M * n)) * E
    grads = {}
    grads["mu"] = Xi @ dE.sum(axis=0)
    grads["W"] = Phi_G.T @ dE @ Xi.T + (2.0 * lam_c / n) * (RC @ Xi.T)
    dXi = np.outer(params.mu, dE.sum(axis=0)) + (Phi_G @ params.W).T @ dE
    dXi += (2.0 * lam_c / n) * (params.W.T @ RC)

    dX = dXi
    for l in range(len(params.Ws) - 1, -1, -1):
        dA = dX * np.cos(A[l + 1])
        grads[f"Ws.{l}"] = params.omega0 * (dA @ X[l].T)
        grads[f"bs.{l}"] = params.omega0 * dA.sum(axis=1)
        dX = params.omega0 * (params.Ws[l].T @ dA)
    dA0 = dX * np.cos(A[0])
    grads["W0"] = dA0 @ V
    grads["b0"] = dA0.sum(axis=1)
    return loss, grads


class OptimizerState:
    """Adam accumulators for one parameter set."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = {k: np.zeros_like(t) for k, t in params.tensors().items()}
        self.v = {k: np.zeros_like(t) for k, t in params.tensors().items()}


def adam_step(state, params, grads):
    """One bias-corrected Adam update, applied in place. Returns (state, params)."""
    state.step += 1
    t = state.step
    for key, tensor in params.tensors().items():
        g = grads[key]
        if g.shape != tensor.shape:
            raise InvalidArgument(f"gradient shape mismatch on {key}")
        state.m[key] = state.beta1 * state.m[key] + (1 - state.beta1) * g
        state.v[key] = state.beta2 * state.v[key] + (1 - state.beta2) * g * g
        mhat = state.m[key] / (1 - state.beta1**t)
        vhat = state.v[key] / (1 - state.beta2**t)
        tensor -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state, params


def save_params(params, path):
    """Versioned checkpoint: little-endian f64 blob + JSON shape manifest."""
    tensors = params.tensors()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "omega0": params.omega0,
        "n_hidden": len(params.Ws),
        "tensors": [],
    }
    blob = bytearray()
    for key in sorted(tensors):
        t = np.ascontiguousarray(tensors[key], dtype="<f8")
        manifest["tensors"].append({"name": key, "shape": list(t.shape), "offset": len(blob)})
        blob += t.tobytes()
    header = json.dumps(manifest, sort_keys=True).encode("utf8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(bytes(blob))


def load_params(path):
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(hlen).decode("utf8"))
        blob = f.read()
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise InvalidArgument(f"unsupported checkpoint version {manifest.get('version')}")
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).astype(float)
    n_hidden = manifest["n_hidden"]
    return NeuralFieldParams(
        tensors["W0"],
        tensors["b0"],
        [tensors[f"Ws.{i}"] for i in range(n_hidden)],
        [tensors[f"bs.{i}"] for i in range(n_hidden)],
        tensors["W"],
        tensors["mu"],
        manifest["omega0"],
    )
