"""Identification-quality metrics and report emission.

All regression metrics operate in standardized target space (matching the
training loss); the controlled-variable accuracy is decoded by sign after
destandardization.  The loop-closure check re-simulates trials with the
identified parameters and reports the trajectory identification error in
degrees.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import stimulus
from .dataset import (SIM_SAMPLE_RATE, SimTrace, destandardize_targets,
                      run_trial)
from .dec import Defaults
from .features import MODULE_ORDER, modular_image
from .net import forward_batch, predict_params, prepare_images
from .plant import JOINTS, build_plant

TRACE_LENGTH = 6051
CATEGORICAL_MASK = np.array([False, False, False, False, True])


@dataclass
class SplitMetrics:
    total_rmse: float
    fit_rmse: float
    accuracy: float


@dataclass
class EvalReport:
    """Per-split metrics plus per-parameter error statistics."""

    splits: dict
    param_abs_error_mean: np.ndarray = None
    param_abs_error_variance: np.ndarray = None
    param_names: tuple = ()
    loop_closure: object = None


def rmse_metrics(predictions, targets, categorical_mask, target_stats=None):
    """(total_rmse, fit_rmse, accuracy) in standardized space.

    total covers every component, fit only the continuous ones; accuracy is
    the fraction of matching signs of the categorical component after
    destandardization (when stats are given; the sign test is invariant to
    any positive rescaling, so standardized values work too).
    """
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predictions and targets must be equal, non-empty")
    mask = np.asarray(categorical_mask, dtype=bool)
    err = p - t
    total = math.sqrt(float(np.mean(err ** 2)))
    fit = math.sqrt(float(np.mean(err[:, ~mask] ** 2)))
    if target_stats is not None:
        p_dec = destandardize_targets(p, target_stats)
        t_dec = destandardize_targets(t, target_stats)
    else:
        p_dec, t_dec = p, t
    acc = float(np.mean(np.sign(p_dec[:, mask]) == np.sign(t_dec[:, mask])))
    return total, fit, acc


def identification_error(trace_true, trace_id):
    """Euclidean norm of the sway difference divided by the sample count.

    Inputs in degrees; both series must have the canonical 6051 samples.
    """
    a = np.asarray(trace_true, dtype=float)
    b = np.asarray(trace_id, dtype=float)
    if a.shape != b.shape or a.shape != (TRACE_LENGTH,):
        raise ValueError(f"expected two {TRACE_LENGTH}-sample series")
    return float(np.linalg.norm(a - b)) / TRACE_LENGTH


def param_mse(eps_p):
    """Per-sample parameter error: ||eps_p|| / 15 over the 15 normalized
    parameters of the three modules."""
    v = np.asarray(eps_p, dtype=float)
    if v.shape != (15,):
        raise ValueError("expected a 15-component error vector")
    return float(np.linalg.norm(v)) / 15.0


def pearson(x, y):
    """Pearson correlation; NaN for degenerate (constant) inputs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        return math.nan
    sx = x.std()
    sy = y.std()
    if sx == 0.0 or sy == 0.0:
        return math.nan
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def split_predictions(network, data):
    """Standardized predictions/targets per split for a trained network."""
    from .net import _standardize

    x = prepare_images(data.images, data.image_stats)
    preds = []
    for i in range(0, x.shape[0], 256):
        preds.append(forward_batch(network, x[i:i + 256]))
    preds = np.concatenate(preds, axis=0).astype(float)
    targs = _standardize(data.targets, data.target_stats).astype(float)
    return preds, targs


def evaluate_splits(network, data):
    """EvalReport over train/val/test plus per-parameter error stats.

    The per-parameter statistics are computed on the destandardized
    normalized deviations (the space the targets are drawn in) over the test
    split.
    """
    preds, targs = split_predictions(network, data)
    mask = np.zeros(data.targets.shape[1], dtype=bool)
    mask[4::5] = True

    report = EvalReport(splits={})
    for code, name in ((0, "train"), (1, "val"), (2, "test")):
        sel = data.splits == code
        if not np.any(sel):
            continue
        total, fit, acc = rmse_metrics(preds[sel], targs[sel], mask,
                                       data.target_stats)
        report.splits[name] = SplitMetrics(total, fit, acc)

    test_sel = data.splits == 2
    if np.any(test_sel):
        p_dec = destandardize_targets(preds[test_sel], data.target_stats)
        t_dec = destandardize_targets(targs[test_sel], data.target_stats)
        abs_err = np.abs(p_dec - t_dec)
        report.param_abs_error_mean = abs_err.mean(axis=0)
        report.param_abs_error_variance = abs_err.var(axis=0)
        if data.targets.shape[1] == 5:
            report.param_names = ("kp", "ki", "kd", "delay", "c")
        else:
            report.param_names = tuple(
                f"{j}_{p}" for j in JOINTS
                for p in ("kp", "ki", "kd", "delay", "c"))
    return report


@dataclass
class LoopClosureRow:
    trial: int
    e_id_deg: float
    param_mse: float
    diverged: bool


@dataclass
class LoopClosureResult:
    rows: list = field(default_factory=list)
    correlation: float = math.nan

    @property
    def e_id_values(self):
        return np.array([r.e_id_deg for r in self.rows if not r.diverged])

    @property
    def mse_values(self):
        return np.array([r.param_mse for r in self.rows if not r.diverged])

    @property
    def n_diverged(self):
        return sum(1 for r in self.rows if r.diverged)


def loop_closure(network, ds, k=60, *, model=None, defaults=None,
                 trial_positions=None, predictions=None):
    """Identify -> re-simulate -> compare body sway for k held-out trials.

    For each selected test-split trial, all three module parameter sets are
    predicted from the trial's images, the trial is re-simulated with the
    identified parameters, and the identification error (degrees) plus the
    15-component parameter error are recorded.  Re-simulations that diverge
    or hit the sway threshold are flagged and excluded from the correlation.

    predictions may supply ready ModuleParams/deviation vectors per trial as
    {trial_position: [(params, vec) x3]}, bypassing the network (used by the
    perfect-predictor oracle test).
    """
    model = build_plant() if model is None else model
    defaults = Defaults.table() if defaults is None else defaults
    profile = stimulus.canonical_profile(sample_rate=SIM_SAMPLE_RATE)

    if trial_positions is None:
        codes = ds.trial_split_codes()
        trial_positions = np.flatnonzero(codes == 2)[:k]

    result = LoopClosureResult()
    for pos in trial_positions:
        pos = int(pos)
        if predictions is not None and pos in predictions:
            per_module = predictions[pos]
        else:
            per_module = []
            trace_view = _trace_view(ds, pos)
            for j, joint in enumerate(MODULE_ORDER):
                img = modular_image(trace_view, joint)
                per_module.append(predict_params(
                    network, img, defaults.modules[j]))
        params = [pm for pm, _ in per_module]
        vecs = np.concatenate([vec for _, vec in per_module])
        eps = vecs - ds.targets[3 * pos:3 * pos + 3].reshape(-1)
        mse = param_mse(eps)

        resim = run_trial(model, params, profile, defaults,
                          max_sway_deg=ds.max_sway_deg)
        if isinstance(resim, SimTrace):
            e_id = identification_error(
                np.degrees(ds.traces[pos, 4].astype(float)),
                np.degrees(resim.alpha_bs))
            result.rows.append(LoopClosureRow(pos, e_id, mse, False))
        else:
            result.rows.append(LoopClosureRow(pos, math.nan, mse, True))

    result.correlation = pearson(result.e_id_values, result.mse_values)
    return result


def _trace_view(ds, pos):
    from .features import _TraceView

    return _TraceView(ds.traces[pos].astype(float))


def histograms(ds, n_bins=30):
    """Fig.-2-style histogram data: normalized kp deviations of the accepted
    samples, and peak body-sway amplitudes with rejected trials accumulated
    in the terminal bin.

    Returns dict of (edges, counts) arrays.
    """
    kp_dev = ds.targets[:, 0]
    kp_edges = np.linspace(-1.0, max(2.0, float(kp_dev.max()) + 0.1),
                           n_bins + 1)
    kp_counts, kp_edges = np.histogram(kp_dev, bins=kp_edges)

    # accepted peaks over [0, threshold); one extra terminal bin holds the
    # aborted trials so its count equals the rejection count exactly
    sway_edges = np.linspace(0.0, ds.max_sway_deg, n_bins + 1)
    sway_counts, _ = np.histogram(ds.accepted_peak_sway_deg, bins=sway_edges)
    width = sway_edges[1] - sway_edges[0]
    sway_edges = np.concatenate([sway_edges, [ds.max_sway_deg + width]])
    sway_counts = np.concatenate([sway_counts, [len(ds.rejected)]])
    return {"kp_deviation": (kp_edges, kp_counts),
            "peak_sway_deg": (sway_edges, sway_counts)}


def write_histograms_csv(ds, outdir, n_bins=30):
    h = histograms(ds, n_bins)
    paths = {}
    for name, (edges, counts) in h.items():
        path = os.path.join(outdir, f"histogram_{name}.csv")
        with open(path, "w") as fh:
            fh.write("bin_left,bin_right,count\n")
            for i, c in enumerate(counts):
                fh.write(f"{edges[i]:.6f},{edges[i + 1]:.6f},{int(c)}\n")
        paths[name] = path
    return paths


def write_metrics_csv(report, path):
    with open(path, "w") as fh:
        fh.write("split,total_rmse,fit_rmse,accuracy\n")
        for name in ("train", "val", "test"):
            if name in report.splits:
                m = report.splits[name]
                fh.write(f"{name},{m.total_rmse:.6f},{m.fit_rmse:.6f},"
                         f"{m.accuracy:.6f}\n")


def write_param_errors_csv(report, path):
    if report.param_abs_error_mean is None:
        return
    with open(path, "w") as fh:
        fh.write("parameter,abs_error_mean,abs_error_variance\n")
        for name, m, v in zip(report.param_names,
                              report.param_abs_error_mean,
                              report.param_abs_error_variance):
            fh.write(f"{name},{m:.6f},{v:.6f}\n")


def write_loop_closure_csv(result, path):
    with open(path, "w") as fh:
        fh.write("trial,e_id_deg,param_mse,diverged\n")
        for r in result.rows:
            e = "nan" if math.isnan(r.e_id_deg) else f"{r.e_id_deg:.8f}"
            fh.write(f"{r.trial},{e},{r.param_mse:.8f},{int(r.diverged)}\n")
        fh.write(f"# pearson_correlation,"
                 f"{result.correlation if not math.isnan(result.correlation) else 'nan'}\n")
