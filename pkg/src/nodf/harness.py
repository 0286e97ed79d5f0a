"""Monte-Carlo experiment orchestration and report files.

run_experiment sweeps (direction count, SNR) cells over seeded replicates,
fits the enabled methods, and scores them on a common Fibonacci evaluation
grid. Per-replicate rows and aggregated tables are persisted as CSV plus an
aligned-text rendering; wall-clock timings go to a separate sidecar so the
deterministic outputs stay byte-stable under a fixed master seed.
"""

import csv
import io
import json
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import baseline, dataio, downstream, estimator, phantom, sphere
from .util import InvalidArgument, substream

METRICS = ("l2", "ecp", "il", "gfa_bias", "gfa_abs")

DEFAULT_EXPERIMENT = {
    "kind": "crossing2d",
    "dims": [16, 16],
    "m_list": [10, 60],
    "snr_list": [20.0],
    "replicates": 5,
    "methods": ["nodf", "shls"],
    "seed": 0,
    "alpha": 0.05,
    "eval_dirs": 200,
    "n_b0": 6,
    "b": 3000.0,
    "l_max": 8,
    "nodf": {},
    "shls": {"B": 500, "lambda": "auto"},
}


def resolve_experiment(config=None):
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULT_EXPERIMENT.items()}
    for key, val in (config or {}).items():
        if key not in cfg:
            raise InvalidArgument(f"unknown experiment config key {key!r}")
        if isinstance(cfg[key], dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


@dataclass
class ExperimentReport:
    rows: list        # one dict per (method, m, snr, replicate)
    aggregates: list  # one dict per (method, m, snr)
    config: dict


def _nodf_metrics(dataset, state, eval_grid, truth_vals, alpha):
    mean_vals, var_vals = estimator.posterior_odf(state, dataset.coords, eval_grid)
    z = norm.ppf(1.0 - alpha / 2.0)
    half = z * np.sqrt(var_vals)
    inside = (mean_vals - half <= truth_vals) & (truth_vals <= mean_vals + half)
    Xi = state.Xi
    coeffs = np.empty((dataset.coords.shape[0], state.K + 1))
    coeffs[:, 0] = estimator.ODF_COEFF_SCALE * (state.params.mu @ Xi)
    coeffs[:, 1:] = (state.W_mean @ Xi).T
    l2 = np.mean([dataio.l2_error(coeffs[i], dataset.truth[i])
                  for i in range(coeffs.shape[0])])
    gfa_est = np.array([downstream.gfa(v) for v in mean_vals])
    gfa_true = np.array([downstream.gfa(v) for v in truth_vals])
    return {
        "l2": float(l2),
        "ecp": float(inside.mean()),
        "il": float(2.0 * half.mean()),
        "gfa_bias": float((gfa_est - gfa_true).mean()),
        "gfa_abs": float(np.abs(gfa_est - gfa_true).mean()),
    }


def _shls_metrics(dataset, cfg_shls, eval_grid, truth_vals, alpha, l_max, seed):
    Phi = sphere.sh_matrix(dataset.directions, l_max)
    lam_setting = cfg_shls.get("lambda", "auto")
    if lam_setting == "auto":
        lam = baseline.gcv_select(dataset.signals, Phi, baseline.default_lambda_grid())
    else:
        lam = float(lam_setting)
    fit = baseline.shls_fit(dataset.signals, Phi, lam)
    fwd = sphere.funk_radon_spectrum(l_max).forward
    odf_coeffs = fit.coeffs * fwd[None, :]
    l2 = np.mean([dataio.l2_error(odf_coeffs[i], dataset.truth[i])
                  for i in range(odf_coeffs.shape[0])])
    est_vals = odf_coeffs @ sphere.sh_matrix(eval_grid, l_max).T
    gfa_est = np.array([downstream.gfa(v) for v in est_vals])
    gfa_true = np.array([downstream.gfa(v) for v in truth_vals])

    B = int(cfg_shls.get("B", 500))
    reps = baseline.residual_bootstrap(dataset.signals, Phi, lam, B, seed=seed)
    inside = np.empty(truth_vals.shape)
    widths = np.empty(truth_vals.shape)
    for i in range(truth_vals.shape[0]):
        lo, hi = baseline.bootstrap_intervals(reps[:, i, :], eval_grid, alpha)
        inside[i] = (lo <= truth_vals[i]) & (truth_vals[i] <= hi)
        widths[i] = hi - lo
    return {
        "l2": float(l2),
        "ecp": float(inside.mean()),
        "il": float(widths.mean()),
        "gfa_bias": float((gfa_est - gfa_true).mean()),
        "gfa_abs": float(np.abs(gfa_est - gfa_true).mean()),
        "lambda": float(lam),
    }


def run_experiment(config=None, out_dir=None):
    """Sweep cells x replicates, fit methods, aggregate, optionally persist."""
    cfg = resolve_experiment(config)
    master = int(cfg["seed"])
    eval_grid = sphere.fibonacci_sphere(int(cfg["eval_dirs"]))
    l_max = int(cfg["l_max"])
    Phi_eval = sphere.sh_matrix(eval_grid, l_max)
    rows = []
    timings = []
    for M in cfg["m_list"]:
        for snr in cfg["snr_list"]:
            for rep in range(int(cfg["replicates"])):
                tag = ("cell", int(M), str(snr), rep)
                ds_seed = int(substream(master, *tag).integers(2**31))
                dataset = dataio.make_dataset(
                    cfg["kind"], cfg["dims"], M=M, snr=snr, seed=ds_seed,
                    b=cfg["b"], n_b0=cfg["n_b0"], l_max=l_max,
                )
                truth_vals = dataset.truth @ Phi_eval.T
                for method in cfg["methods"]:
                    row = {
                        "method": method, "m": int(M), "snr": float(snr),
                        "replicate": rep, "seed": ds_seed, "status": "ok",
                        "error": "",
                    }
                    t0 = time.perf_counter()
                    try:
                        if method == "nodf":
                            ncfg = dict(cfg["nodf"])
                            ncfg["seed"] = ds_seed
                            state = estimator.fit_pipeline(dataset, ncfg)
                            row.update(_nodf_metrics(
                                dataset, state, eval_grid, truth_vals, cfg["alpha"]
                            ))
                        elif method == "shls":
                            row.update(_shls_metrics(
                                dataset, cfg["shls"], eval_grid, truth_vals,
                                cfg["alpha"], l_max, ds_seed,
                            ))
                        else:
                            raise InvalidArgument(f"unknown method {method!r}")
                    except Exception as exc:  # record and continue
                        row["status"] = "failed"
                        row["error"] = f"{type(exc).__name__}: {exc}"
                        warnings.warn(f"cell {tag} method {method} failed: {exc}")
                    timings.append({
                        "method": method, "m": int(M), "snr": float(snr),
                        "replicate": rep,
                        "wall_time": time.perf_counter() - t0,
                    })
                    rows.append(row)
    aggregates = aggregate(rows)
    report = ExperimentReport(rows=rows, aggregates=aggregates, config=cfg)
    if out_dir is not None:
        write_report(out_dir, report, timings)
    return report


def aggregate(rows):
    """Per-(method, m, snr) means and standard errors over successful rows."""
    keys = []
    for row in rows:
        key = (row["method"], row["m"], row["snr"])
        if key not in keys:
            keys.append(key)
    out = []
    for method, m, snr in keys:
        group = [r for r in rows if (r["method"], r["m"], r["snr"]) == (method, m, snr)]
        ok = [r for r in group if r["status"] == "ok"]
        agg = {
            "method": method, "m": m, "snr": snr,
            "replicates": len(ok), "failures": len(group) - len(ok),
        }
        for metric in METRICS:
            vals = np.array([r[metric] for r in ok], dtype=float)
            if vals.size:
                agg[f"{metric}_mean"] = float(vals.mean())
                agg[f"{metric}_se"] = (
                    float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
                )
            else:
                agg[f"{metric}_mean"] = float("nan")
                agg[f"{metric}_se"] = float("nan")
        out.append(agg)
    return out


ROW_FIELDS = ("method", "m", "snr", "replicate", "seed", "status", "error") + METRICS
AGG_FIELDS = ("method", "m", "snr", "replicates", "failures") + tuple(
    f"{m}_{s}" for m in METRICS for s in ("mean", "se")
)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, fields, dicts):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for d in dicts:
        writer.writerow([_fmt(d.get(f, "")) for f in fields])
    Path(path).write_text(buf.getvalue())


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_report(out_dir, report, timings=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "rows.csv", ROW_FIELDS, report.rows)
    _write_csv(out / "report.csv", AGG_FIELDS, report.aggregates)
    (out / "report.txt").write_text(render_text(report))
    (out / "meta.json").write_text(
        json.dumps({"config": report.config, "schema_version": 1},
                   indent=2, sort_keys=True, default=str)
    )
    if timings is not None:
        (out / "timings.json").write_text(json.dumps(timings, indent=2))


def render_text(report):
    cols = ("method", "m", "snr", "replicates", "failures",
            "l2_mean", "l2_se", "ecp_mean", "ecp_se", "il_mean",
            "gfa_bias_mean", "gfa_abs_mean")
    header = [c for c in cols]
    table = [header]
    for agg in report.aggregates:
        table.append([
            str(agg[c]) if not isinstance(agg[c], float) else f"{agg[c]:.6f}"
            for c in cols
        ])
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in table]
    return "\n".join(lines) + "\n"


def recompute_aggregates(rows_csv):
    """Re-aggregate from the persisted per-replicate rows (for verification)."""
    rows = []
    for rec in _read_csv(rows_csv):
        row = {
            "method": rec["method"], "m": int(rec["m"]), "snr": float(rec["snr"]),
            "replicate": int(rec["replicate"]), "seed": int(rec["seed"]),
            "status": rec["status"], "error": rec["error"],
        }
        for metric in METRICS:
            if rec[metric] != "":
                row[metric] = float(rec[metric])
        rows.append(row)
    return aggregate(rows)


# tractography trend harness


def save_streamlines_json(path, streamlines, depths=None):
    payload = {
        "schema_version": 1,
        "streamlines": [
            {
                "reason": sl.reason,
                "step": sl.step,
                "depth": None if depths is None else float(depths[i]),
                "points": [[float(v) for v in p] for p in sl.points],
            }
            for i, sl in enumerate(streamlines)
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def save_tract_stats_csv(path, ad):
    recs = [{"t": i, "ad": float(a)} for i, a in enumerate(ad)]
    _write_csv(path, ("t", "ad"), recs)


DEFAULT_TRACT = {
    "dims": [24, 24, 24],
    "m_pair": [60, 20],
    "snr": 20.0,
    "n_seeds": 5,
    "n_curves": 12,
    "n_points": 100,
    "seed": 0,
    "gfa_threshold": 0.15,
    "step": 0.05,
    "max_steps": 200,
    "seed_t": 0.25,
    "nodf": {},
}


def _resolve_tract(config=None):
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULT_TRACT.items()}
    for key, val in (config or {}).items():
        if key not in cfg:
            raise InvalidArgument(f"unknown tract config key {key!r}")
        if isinstance(cfg[key], dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def sample_streamlines(state, x0, n_curves, seed, step=0.05, gfa_threshold=0.15,
                       max_steps=200, n_points=100):
    """Trace one streamline per posterior draw, resampled to n_points."""
    curves, streamlines = [], []
    for j in range(n_curves):
        fseed = int(substream(seed, "tract-draw", j).integers(2**31))
        fld = downstream.PosteriorSampleField(state, seed=fseed)
        sl = downstream.trace_streamline(
            fld, x0, step=step, gfa_threshold=gfa_threshold, max_steps=max_steps
        )
        streamlines.append(sl)
        if sl.points.shape[0] >= 2:
            curves.append(downstream.resample_curve(sl.points, n=n_points))
    return streamlines, curves


def run_tract_trend(config=None, out_dir=None):
    """Posterior-tract closeness to the generating spiral at two budgets.

    For each seed, fits the 3D phantom at both direction counts, samples
    posterior streamline bundles from a single-fiber seed point, and records
    the deepest-curve minimum distance to the analytic strand. Returns a list
    of {seed, m, distance, n_curves} records.
    """
    cfg = _resolve_tract(config)
    dims = tuple(int(d) for d in cfg["dims"])
    x0 = phantom.helix_point(cfg["seed_t"], 1, 0.4, 3.5, 1.0)
    gt = _strand_curve(cfg["seed_t"], n_points=int(cfg["n_points"]))
    records = []
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for s in range(int(cfg["n_seeds"])):
        for M in cfg["m_pair"]:
            run_seed = int(substream(int(cfg["seed"]), "tract", s, int(M)).integers(2**31))
            dataset = dataio.make_dataset(
                "caduceus3d", dims, M=int(M), snr=cfg["snr"], seed=run_seed
            )
            ncfg = dict(cfg["nodf"])
            ncfg["seed"] = run_seed
            state = estimator.fit_pipeline(dataset, ncfg)
            streamlines, curves = sample_streamlines(
                state, x0, int(cfg["n_curves"]), run_seed,
                step=cfg["step"], gfa_threshold=cfg["gfa_threshold"],
                max_steps=int(cfg["max_steps"]), n_points=int(cfg["n_points"]),
            )
            if len(curves) >= 3:
                stack = np.stack(curves)
                dist = downstream.deepest_min_distance(gt, stack, k=10)
                depths = downstream.curve_depth(stack)
                _, ad = downstream.angular_dispersion(stack)
            else:
                dist, depths, ad = float("inf"), None, None
            records.append({
                "seed": s, "m": int(M), "distance": float(dist),
                "n_curves": len(curves),
            })
            if out is not None:
                tag = f"seed{s}_m{int(M)}"
                save_streamlines_json(out / f"streamlines_{tag}.json", streamlines, depths)
                if ad is not None:
                    save_tract_stats_csv(out / f"tract_stats_{tag}.csv", ad)
    if out is not None:
        _write_csv(out / "tract_trend.csv",
                   ("seed", "m", "distance", "n_curves"), records)
    return records


def _strand_curve(t0, t1=1.0, n_points=100, n_dense=400):
    ts = np.linspace(t0, t1, n_dense)
    pts = np.stack([phantom.helix_point(t, 1, 0.4, 3.5, 1.0) for t in ts])
    return downstream.resample_curve(pts, n=n_points)
