"""Sampling of control parameters, closed-loop trial generation, stability
filtering, train/validation/test assembly and on-disk persistence.

Each accepted trial contributes one sample per control module (three samples),
and trials never straddle splits.  Targets are the normalized parameter
deviations plus the controlled-variable flag; standardization statistics come
from the training split only.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, serialize, stimulus
from .dec import CONTROL_DT, Controlled, Defaults, ModuleParams
from .plant import JOINTS, build_plant

MANIFEST_VERSION = 1
TARGET_NAMES = ("kp", "ki", "kd", "delay", "c")
TARGET_VARIANCE_FLOOR = 1e-8
DEFAULT_MAX_SWAY_DEG = 6.0
DEFAULT_SAMPLE_STD = 0.5
SIM_SAMPLE_RATE = 1.0 / CONTROL_DT
DECIMATION = 10


@dataclass(frozen=True)
class TargetVector:
    """Normalized learning target of one module: deviations of the four
    continuous parameters from their defaults, plus the controlled-variable
    flag encoded as +-1."""

    kp: float
    ki: float
    kd: float
    delay: float
    c: float

    def to_array(self):
        return np.array([self.kp, self.ki, self.kd, self.delay, self.c])

    @classmethod
    def from_array(cls, arr):
        return cls(*[float(v) for v in arr])


@dataclass
class SimTrace:
    """Accepted 121 s trial decimated to 50 Hz (6051 samples per series)."""

    alpha_fs: np.ndarray
    alpha_ss: np.ndarray
    alpha_ls: np.ndarray
    alpha_ts: np.ndarray
    alpha_bs: np.ndarray
    params: tuple = None
    targets: tuple = None
    peak_sway_deg: float = 0.0

    @property
    def length(self):
        return self.alpha_bs.shape[0]


@dataclass(frozen=True)
class Rejected:
    """Discarded trial: sway reached the threshold or the state diverged."""

    abort_time_s: float
    peak_sway_deg: float
    diverged: bool = False


@dataclass
class TargetStats:
    mean: np.ndarray
    variance: np.ndarray
    floored: int = 0


@dataclass
class Dataset:
    """In-memory dataset; images are attached by the feature stage."""

    targets: np.ndarray          # (n_samples, 5) normalized targets
    module_ids: np.ndarray       # (n_samples,) 0 ankle / 1 knee / 2 hip
    trial_ids: np.ndarray        # (n_samples,) position in accepted order
    splits: np.ndarray           # (n_samples,) 0 train / 1 val / 2 test
    traces: np.ndarray           # (n_trials, 5, 6051) fs/ss/ls/ts/bs, float32
    params_phys: np.ndarray      # (n_trials, 3, 5) kp,ki,kd,delay,c physical
    target_stats: TargetStats
    seed: int
    sample_std: float
    max_sway_deg: float
    split_fractions: tuple
    accepted_peak_sway_deg: list
    rejected: list = field(default_factory=list)
    attempt_indices: list = field(default_factory=list)
    images: np.ndarray = None            # (n_samples, 51, 51, 3) after featurize
    image_stats: object = None
    feature_meta: dict = field(default_factory=dict)

    @property
    def n_trials(self):
        return self.traces.shape[0]

    @property
    def n_samples(self):
        return self.targets.shape[0]

    def split_mask(self, split):
        code = {"train": 0, "val": 1, "test": 2}[split]
        return self.splits == code

    def trial_split_codes(self):
        """Split code per trial (all samples of a trial share one split)."""
        codes = np.empty(self.n_trials, dtype=np.int64)
        codes[self.trial_ids] = self.splits
        return codes


def sample_parameters(rng, defaults, sample_std=DEFAULT_SAMPLE_STD):
    """Draw one trial's module parameters and their normalized targets.

    Per module and continuous parameter: x ~ N(0, sample_std), value =
    default * |1 + x| (the absolute value warps draws onto positive values),
    so the normalized deviation is |1 + x| - 1 >= -1.  The controlled-variable
    flag is +-1 with equal probability.  Delays are used on the 2 ms grid in
    simulation but the target keeps the unrounded deviation.
    """
    params = []
    targets = []
    for joint in JOINTS:
        d = defaults.modules[JOINTS.index(joint)]
        draws = rng.normal(0.0, sample_std, 4)
        warped = np.abs(1.0 + draws)
        c = 1.0 if rng.random() < 0.5 else -1.0
        params.append(ModuleParams(
            kp=d.kp * warped[0], ki=d.ki * warped[1], kd=d.kd * warped[2],
            delay=d.delay * warped[3],
            controlled=Controlled.COM_SWAY if c > 0 else Controlled.JOINT_ANGLE))
        targets.append(TargetVector(kp=warped[0] - 1.0, ki=warped[1] - 1.0,
                                    kd=warped[2] - 1.0, delay=warped[3] - 1.0,
                                    c=c))
    return params, targets


def run_trial(model, params, profile, defaults=None, threshold=None,
              max_sway_deg=DEFAULT_MAX_SWAY_DEG, locked=(), dt=CONTROL_DT,
              decimation=DECIMATION):
    """Simulate one full closed-loop trial; accept or reject.

    profile must be sampled on the control-step grid (dt).  Outputs are
    decimated to the analysis rate (every decimation-th step, sample and
    hold).  Returns a SimTrace, or Rejected when |body COM sway| reaches
    max_sway_deg or the state diverges.
    """
    defaults = Defaults.table() if defaults is None else defaults
    threshold = defaults.threshold if threshold is None else threshold
    if abs(profile.sample_rate * dt - 1.0) > 1e-9:
        raise ValueError("profile must be sampled at the control rate 1/dt")

    kp = np.array([p.kp for p in params])
    ki = np.array([p.ki for p in params])
    kd = np.array([p.kd for p in params])
    dlen = np.array([p.delay_steps(dt) for p in params], dtype=np.int64)
    ctrl_c = np.array([p.controlled.value for p in params])
    kp_pass = np.array([pp.kp for pp in defaults.passive])
    kd_pass = np.array([pp.kd for pp in defaults.passive])
    locked_code = {(): 0, ("knee",): 1, ("hip",): 2, ("knee", "hip"): 3}[
        tuple(sorted(locked, key=JOINTS.index)) if locked else ()]

    ss, ls, ts, bs, status, abort_step, peak = _kernels.simulate_loop(
        model.masses, model.lengths, model.coms, model.inertias,
        model.coupling, model.grav_weight, model.g,
        kp, ki, kd, dlen, ctrl_c, kp_pass, kd_pass, threshold,
        profile.angle, profile.rate, dt, decimation,
        math.radians(max_sway_deg), locked_code)

    peak_deg = math.degrees(peak)
    if status != _kernels.STATUS_OK:
        return Rejected(abort_time_s=abort_step * dt, peak_sway_deg=peak_deg,
                        diverged=status == _kernels.STATUS_DIVERGED)
    return SimTrace(alpha_fs=profile.angle[::decimation].copy(),
                    alpha_ss=ss, alpha_ls=ls, alpha_ts=ts, alpha_bs=bs,
                    params=tuple(params), peak_sway_deg=peak_deg)


def split_counts(n_trials, fractions):
    """Trials per split; train/val round to nearest, test takes the rest."""
    f_train, f_val = fractions[0], fractions[1]
    n_train = int(round(f_train * n_trials))
    n_val = int(round(f_val * n_trials))
    n_train = min(n_train, n_trials)
    n_val = min(n_val, n_trials - n_train)
    return n_train, n_val, n_trials - n_train - n_val


def compute_target_stats(targets, floor=TARGET_VARIANCE_FLOOR):
    mean = targets.mean(axis=0)
    var = targets.var(axis=0)
    floored = int(np.sum(var < floor))
    return TargetStats(mean=mean, variance=np.maximum(var, floor),
                       floored=floored)


def standardize_targets(t, stats):
    """(t - mean) / variance per component (literal variance scaling)."""
    arr = t.to_array() if isinstance(t, TargetVector) else np.asarray(t, dtype=float)
    return (arr - stats.mean) / stats.variance


def destandardize_targets(z, stats):
    """Exact inverse of standardize_targets."""
    return np.asarray(z, dtype=float) * stats.variance + stats.mean


def build_dataset(n_target, seed, split_fractions=(0.70, 0.15, 0.15), *,
                  model=None, defaults=None, sample_std=DEFAULT_SAMPLE_STD,
                  max_sway_deg=DEFAULT_MAX_SWAY_DEG, stimulus_kwargs=None,
                  jobs=1, min_acceptance=0.01, progress=None):
    """Sample and simulate until ceil(n_target / 3) trials are accepted.

    Trials are indexed deterministically (rng stream per (seed, index)) and
    kept in index order, so the dataset is identical for any jobs count.
    Raises RuntimeError if the acceptance rate falls below min_acceptance.
    """
    if n_target < 30:
        raise ValueError("n_target must be at least 30")
    model = build_plant() if model is None else model
    defaults = Defaults.table() if defaults is None else defaults
    stimulus_kwargs = dict(stimulus_kwargs or {})
    profile = stimulus.canonical_profile(sample_rate=SIM_SAMPLE_RATE,
                                         **stimulus_kwargs)

    quota = -(-n_target // 3)

    def attempt(index):
        rng = np.random.default_rng([seed, index])
        params, targets = sample_parameters(rng, defaults, sample_std)
        result = run_trial(model, params, profile, defaults,
                           max_sway_deg=max_sway_deg)
        if isinstance(result, SimTrace):
            result.targets = tuple(targets)
        return index, params, targets, result

    accepted = []
    rejected = []
    next_index = 0
    block = max(16, 4 * jobs)
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        while len(accepted) < quota:
            indices = range(next_index, next_index + block)
            next_index += block
            results = (list(pool.map(attempt, indices)) if pool
                       else [attempt(i) for i in indices])
            for index, params, targets, result in results:
                if len(accepted) >= quota:
                    break
                if isinstance(result, SimTrace):
                    accepted.append((index, result))
                else:
                    rejected.append((index, result))
                if progress is not None:
                    progress(len(accepted), len(accepted) + len(rejected))
            attempts = len(accepted) + len(rejected)
            if attempts >= max(200, 3 * quota) and len(accepted) < quota:
                rate = len(accepted) / attempts
                if rate < min_acceptance:
                    raise RuntimeError(
                        f"acceptance rate {rate:.4f} below {min_acceptance} "
                        f"after {attempts} attempts; check parameter ranges")
    finally:
        if pool is not None:
            pool.shutdown()

    n_trials = len(accepted)
    n_train, n_val, n_test = split_counts(n_trials, split_fractions)
    trial_split = np.concatenate([np.zeros(n_train, dtype=np.int64),
                                  np.ones(n_val, dtype=np.int64),
                                  np.full(n_test, 2, dtype=np.int64)])

    n_samples = 3 * n_trials
    targets = np.empty((n_samples, 5))
    module_ids = np.empty(n_samples, dtype=np.int64)
    trial_ids = np.empty(n_samples, dtype=np.int64)
    splits = np.empty(n_samples, dtype=np.int64)
    traces = np.empty((n_trials, 5, profile.length // DECIMATION + 1),
                      dtype=np.float32)
    params_phys = np.empty((n_trials, 3, 5), dtype=np.float32)
    peaks = []
    attempt_indices = []

    for pos, (index, trace) in enumerate(accepted):
        attempt_indices.append(index)
        peaks.append(trace.peak_sway_deg)
        traces[pos, 0] = trace.alpha_fs
        traces[pos, 1] = trace.alpha_ss
        traces[pos, 2] = trace.alpha_ls
        traces[pos, 3] = trace.alpha_ts
        traces[pos, 4] = trace.alpha_bs
        for j in range(3):
            p = trace.params[j]
            params_phys[pos, j] = (p.kp, p.ki, p.kd, p.delay,
                                   p.controlled.value)
            s = 3 * pos + j
            targets[s] = trace.targets[j].to_array()
            module_ids[s] = j
            trial_ids[s] = pos
            splits[s] = trial_split[pos]

    stats = compute_target_stats(targets[splits == 0])

    return Dataset(targets=targets, module_ids=module_ids, trial_ids=trial_ids,
                   splits=splits, traces=traces, params_phys=params_phys,
                   target_stats=stats, seed=seed, sample_std=sample_std,
                   max_sway_deg=max_sway_deg,
                   split_fractions=tuple(split_fractions),
                   accepted_peak_sway_deg=peaks,
                   rejected=[(i, r.abort_time_s, r.peak_sway_deg, r.diverged)
                             for i, r in rejected],
                   attempt_indices=attempt_indices)


def save_dataset(ds, outdir):
    """Persist manifest.json plus one binary tensor file per array."""
    os.makedirs(outdir, exist_ok=True)
    serialize.write_tensor(os.path.join(outdir, "targets.bin"), ds.targets)
    serialize.write_tensor(os.path.join(outdir, "splits.bin"), ds.splits)
    serialize.write_tensor(os.path.join(outdir, "module_ids.bin"), ds.module_ids)
    serialize.write_tensor(os.path.join(outdir, "trial_ids.bin"), ds.trial_ids)
    serialize.write_tensor(os.path.join(outdir, "traces.bin"), ds.traces)
    serialize.write_tensor(os.path.join(outdir, "params.bin"), ds.params_phys)
    if ds.images is not None:
        serialize.write_tensor(os.path.join(outdir, "images.bin"), ds.images)
        serialize.write_tensor(os.path.join(outdir, "image_mean.bin"),
                               ds.image_stats.mean)
        serialize.write_tensor(os.path.join(outdir, "image_variance.bin"),
                               ds.image_stats.variance)

    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": ds.seed,
        "sample_std": ds.sample_std,
        "max_sway_deg": ds.max_sway_deg,
        "split_fractions": list(ds.split_fractions),
        "counts": {
            "trials": int(ds.n_trials),
            "samples": int(ds.n_samples),
            "train": int(np.sum(ds.splits == 0)),
            "val": int(np.sum(ds.splits == 1)),
            "test": int(np.sum(ds.splits == 2)),
            "rejected": len(ds.rejected),
        },
        "target_stats": {
            "mean": [float(v) for v in ds.target_stats.mean],
            "variance": [float(v) for v in ds.target_stats.variance],
            "floored": ds.target_stats.floored,
        },
        "accepted_peak_sway_deg": [float(v) for v in ds.accepted_peak_sway_deg],
        "rejected_trials": [
            {"attempt": int(i), "abort_time_s": float(t),
             "peak_sway_deg": float(p), "diverged": bool(d)}
            for i, t, p, d in ds.rejected
        ],
        "attempt_indices": [int(i) for i in ds.attempt_indices],
        "features": ds.feature_meta,
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(outdir):
    with open(os.path.join(outdir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest["format_version"] != MANIFEST_VERSION:
        raise ValueError("unsupported dataset format version")

    def tensor(name):
        return serialize.read_tensor(os.path.join(outdir, name))

    stats = TargetStats(
        mean=np.array(manifest["target_stats"]["mean"], dtype=float),
        variance=np.array(manifest["target_stats"]["variance"], dtype=float),
        floored=manifest["target_stats"]["floored"])
    ds = Dataset(
        targets=tensor("targets.bin").astype(float),
        module_ids=tensor("module_ids.bin").astype(np.int64),
        trial_ids=tensor("trial_ids.bin").astype(np.int64),
        splits=tensor("splits.bin").astype(np.int64),
        traces=tensor("traces.bin"),
        params_phys=tensor("params.bin"),
        target_stats=stats,
        seed=manifest["seed"],
        sample_std=manifest["sample_std"],
        max_sway_deg=manifest["max_sway_deg"],
        split_fractions=tuple(manifest["split_fractions"]),
        accepted_peak_sway_deg=manifest["accepted_peak_sway_deg"],
        rejected=[(r["attempt"], r["abort_time_s"], r["peak_sway_deg"],
                   r["diverged"]) for r in manifest["rejected_trials"]],
        attempt_indices=manifest["attempt_indices"],
        feature_meta=manifest.get("features", {}))
    image_path = os.path.join(outdir, "images.bin")
    if os.path.exists(image_path):
        from .features import ImageStats
        ds.images = tensor("images.bin")
        ds.image_stats = ImageStats(mean=tensor("image_mean.bin"),
                                    variance=tensor("image_variance.bin"))
    return ds


def export_traces(ds, outdir, profile=None):
    """Optional CSV export of the accepted traces (traces/trial_%06d.csv)."""
    tdir = os.path.join(outdir, "traces")
    os.makedirs(tdir, exist_ok=True)
    n = ds.traces.shape[2]
    t = np.arange(n) / stimulus.CANONICAL_SAMPLE_RATE
    for pos in range(ds.n_trials):
        path = os.path.join(tdir, f"trial_{pos:06d}.csv")
        with open(path, "w") as fh:
            fh.write("time_s,alpha_fs_rad,alpha_ss_rad,alpha_ls_rad,"
                     "alpha_ts_rad,alpha_bs_rad\n")
            fs, ss, ls, ts, bs = ds.traces[pos]
            for i in range(n):
                fh.write(f"{t[i]:.6f},{fs[i]:.9e},{ss[i]:.9e},{ls[i]:.9e},"
                         f"{ts[i]:.9e},{bs[i]:.9e}\n")
