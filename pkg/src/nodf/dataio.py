"""Dataset container, on-disk layout, and evaluation metrics.

A dataset directory holds meta.json plus flat little-endian binary arrays:
signals.f32 ([N, M] row-major), optional b0.f32 ([N, p]) and truth.f32
([N, K_total], ODF coefficients). Voxel coordinates are reconstructed from
the grid dims recorded in the metadata, so round trips are bitwise lossless.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import phantom, sphere
from .util import InvalidArgument, substream

SCHEMA_VERSION = 1


@dataclass
class Dataset:
    coords: np.ndarray       # (N, D) in [-1, 1]^D
    signals: np.ndarray      # (M, N)
    directions: np.ndarray   # (M, 3)
    b: float
    b0: np.ndarray = None          # (N, p) repeated baseline volumes
    truth: np.ndarray = None       # (N, K_total) ODF coefficients
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.signals = np.asarray(self.signals, dtype=float)
        self.directions = np.asarray(self.directions, dtype=float)
        N = self.coords.shape[0]
        M = self.directions.shape[0]
        if self.signals.shape != (M, N):
            raise InvalidArgument(
                f"signals must be (M, N) = ({M}, {N}), got {self.signals.shape}"
            )
        if np.unique(self.coords, axis=0).shape[0] != N:
            raise InvalidArgument("voxel coordinates must be unique")
        if np.any(np.abs(self.coords) > 1.0 + 1e-12):
            raise InvalidArgument("coordinates must lie in [-1, 1]^D")
        if self.b0 is not None:
            self.b0 = np.asarray(self.b0, dtype=float)
            if self.b0.ndim != 2 or self.b0.shape[0] != N:
                raise InvalidArgument(f"b0 must be (N, p), got {self.b0.shape}")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=float)
            if self.truth.ndim != 2 or self.truth.shape[0] != N:
                raise InvalidArgument(f"truth must be (N, K), got {self.truth.shape}")


def _write_array(path, arr):
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(path, shape):
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    expect = int(np.prod(shape))
    if data.size != expect:
        raise InvalidArgument(f"{path}: expected {expect} values, found {data.size}")
    return data.reshape(shape).copy()


def write_dataset(dirpath, ds):
    """Persist a grid dataset; dims in metadata reconstruct the coordinates."""
    dims = ds.meta.get("dims")
    if dims is None:
        raise InvalidArgument("dataset meta must record grid dims")
    if int(np.prod(dims)) != ds.coords.shape[0]:
        raise InvalidArgument(f"dims {dims} do not match {ds.coords.shape[0]} voxels")
    out = Path(dirpath)
    out.mkdir(parents=True, exist_ok=True)
    meta = dict(ds.meta)
    meta.update(
        schema_version=SCHEMA_VERSION,
        dims=[int(d) for d in dims],
        b=float(ds.b),
        m=int(ds.directions.shape[0]),
        p=0 if ds.b0 is None else int(ds.b0.shape[1]),
        k_truth=0 if ds.truth is None else int(ds.truth.shape[1]),
        directions=[[float(v) for v in row] for row in ds.directions],
    )
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    _write_array(out / "signals.f32", ds.signals.T)  # [N, M] on disk
    if ds.b0 is not None:
        _write_array(out / "b0.f32", ds.b0)
    if ds.truth is not None:
        _write_array(out / "truth.f32", ds.truth)
    sphere.write_bvec(out / "bvec.txt", ds.directions)
    (out / "bval.txt").write_text(" ".join([repr(float(ds.b))] * ds.directions.shape[0]) + "\n")


def read_dataset(dirpath):
    src = Path(dirpath)
    meta_path = src / "meta.json"
    if not meta_path.exists():
        raise InvalidArgument(f"missing dataset component: {meta_path}")
    meta = json.loads(meta_path.read_text())
    version = meta.get("schema_version")
    if version != SCHEMA_VERSION:
        raise InvalidArgument(
            f"unsupported dataset schema version {version!r}, expected {SCHEMA_VERSION}"
        )
    dims = tuple(int(d) for d in meta["dims"])
    coords = phantom.grid_coords(dims)
    N = coords.shape[0]
    M = int(meta["m"])
    directions = np.asarray(meta["directions"], dtype=float)
    sig_path = src / "signals.f32"
    if not sig_path.exists():
        raise InvalidArgument(f"missing dataset component: {sig_path}")
    signals = _read_array(sig_path, (N, M)).T
    b0 = None
    if meta.get("p", 0):
        b0 = _read_array(src / "b0.f32", (N, int(meta["p"])))
    truth = None
    if meta.get("k_truth", 0):
        truth = _read_array(src / "truth.f32", (N, int(meta["k_truth"])))
    keep = {k: v for k, v in meta.items() if k not in ("directions",)}
    return Dataset(
        coords=coords, signals=signals, directions=directions, b=float(meta["b"]),
        b0=b0, truth=truth, meta=keep,
    )


def make_dataset(kind, dims, M, snr, seed=0, b=3000.0, n_b0=6, l_max=8, **phantom_kwargs):
    """Generate a noisy phantom dataset with ground truth attached.

    Noise scale is sigma_e = S0 / snr with baseline signal S0 = 1, applied to
    both the diffusion-weighted signals and the repeated b0 volumes.
    """
    dims = tuple(int(d) for d in dims)
    if kind == "crossing2d":
        if len(dims) != 2:
            raise InvalidArgument(f"crossing2d needs 2 dims, got {dims}")
        ph = phantom.make_crossing_2d(*dims, b=b, **phantom_kwargs)
    elif kind == "caduceus3d":
        if len(dims) != 3:
            raise InvalidArgument(f"caduceus3d needs 3 dims, got {dims}")
        ph = phantom.make_caduceus_3d(*dims, b=b, **phantom_kwargs)
    else:
        raise InvalidArgument(f"unknown phantom kind {kind!r}")
    truth = phantom.ground_truth_coeffs(ph, l_max=l_max)
    directions = sphere.electrostatic_directions(int(M), seed=seed)
    sigma_e = 1.0 / float(snr)
    sig_seed = int(substream(seed, "signal-noise").integers(2**31))
    b0_seed = int(substream(seed, "b0-noise").integers(2**31))
    Y = phantom.sample_noisy(truth, directions, sigma_e, seed=sig_seed)
    b0 = phantom.sample_b0(ph.n_voxels, int(n_b0), sigma_e, seed=b0_seed)
    meta = {
        "dims": list(dims), "kind": kind, "seed": int(seed), "snr": float(snr),
        "sigma_e": sigma_e, "n_b0": int(n_b0), "l_max_truth": int(l_max),
    }
    return Dataset(
        coords=ph.coords, signals=Y, directions=directions, b=b,
        b0=b0, truth=truth.odf_coeffs, meta=meta,
    )


# metrics


def l2_error(estimate, truth):
    """Normalized coefficient-space error; equals the function-space ratio."""
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise InvalidArgument(f"shape mismatch: {est.shape} vs {tru.shape}")
    denom = np.linalg.norm(tru)
    if denom == 0.0:
        raise InvalidArgument("l2 error undefined for zero truth")
    return float(np.linalg.norm(est - tru) / denom)


def ecp(intervals, truth):
    """Fraction of closed intervals [lo, hi] containing the true value."""
    iv = np.asarray(intervals, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if iv.ndim != 2 or iv.shape[1] != 2 or iv.shape[0] != tru.shape[0]:
        raise InvalidArgument(f"need aligned (n, 2) intervals, got {iv.shape} vs {tru.shape}")
    inside = (iv[:, 0] <= tru) & (tru <= iv[:, 1])
    return float(inside.mean())


def interval_length(intervals):
    """Mean interval width."""
    iv = np.asarray(intervals, dtype=float)
    if iv.ndim != 2 or iv.shape[1] != 2:
        raise InvalidArgument(f"need (n, 2) intervals, got {iv.shape}")
    widths = iv[:, 1] - iv[:, 0]
    if np.any(widths < 0):
        raise InvalidArgument("inverted interval (hi < lo)")
    return float(widths.mean())


def load_config(path):
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise InvalidArgument(f"config must be a JSON object, got {type(cfg).__name__}")
    return cfg
