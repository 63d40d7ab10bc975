"""Command-line entry point: simulate, stimulus export, dataset, featurize,
train, eval, compare, identify.

Exit codes: 0 success, 2 validation error, 3 numerical divergence,
4 acceptance-threshold failure.  Every command that writes an output
directory echoes the effective configuration there for provenance.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import dataset as ds_mod
from . import evaluate, features, net, stimulus
from .config import Config, ConfigError, load_config, save_config
from .dec import Controlled, ModuleParams
from .plant import JOINTS

EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_ACCEPTANCE = 4


class DivergenceError(RuntimeError):
    pass


class AcceptanceFailure(RuntimeError):
    pass


def _echo_config(cfg, outdir):
    os.makedirs(outdir, exist_ok=True)
    save_config(cfg, os.path.join(outdir, "effective_config.ini"))


def _set_jobs(jobs):
    if jobs and jobs > 0:
        import torch

        torch.set_num_threads(jobs)


def _load_params_file(path, defaults):
    """Per-module controller parameters from JSON; defaults fill gaps."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: "
            f"{e.msg}") from None
    except OSError as e:
        raise ConfigError(f"cannot read params file: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object of modules")
    controlled = {"com_sway": Controlled.COM_SWAY,
                  "joint_angle": Controlled.JOINT_ANGLE}
    params = list(defaults.modules)
    for joint, fields in raw.items():
        if joint not in JOINTS:
            raise ConfigError(f"{path}: unknown module {joint!r}")
        base = defaults.modules[JOINTS.index(joint)]
        allowed = {"kp", "ki", "kd", "delay", "controlled"}
        unknown = set(fields) - allowed
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)} "
                              f"for module {joint}")
        cv = fields.get("controlled", base.controlled.name.lower())
        if cv not in controlled:
            raise ConfigError(f"{path}: controlled must be one of "
                              f"{sorted(controlled)}")
        params[JOINTS.index(joint)] = ModuleParams(
            kp=float(fields.get("kp", base.kp)),
            ki=float(fields.get("ki", base.ki)),
            kd=float(fields.get("kd", base.kd)),
            delay=float(fields.get("delay", base.delay)),
            controlled=controlled[cv])
    return params


def _write_trace_csv(path, times, columns):
    names = ",".join(columns)
    with open(path, "w") as fh:
        fh.write(f"time_s,{names}\n")
        arrays = list(columns.values())
        for i in range(len(times)):
            row = ",".join(f"{a[i]:.9e}" for a in arrays)
            fh.write(f"{times[i]:.6f},{row}\n")


# -- commands --------------------------------------------------------------


def cmd_simulate(args):
    cfg = load_config(args.config)
    if args.tilt_amplitude is not None:
        cfg.values["stimulus"]["peak_to_peak_deg"] = args.tilt_amplitude
    model = cfg.plant_model()
    defaults = cfg.controller_defaults()
    params = (_load_params_file(args.params_file, defaults)
              if args.params_file else list(defaults.modules))
    profile = stimulus.canonical_profile(
        sample_rate=ds_mod.SIM_SAMPLE_RATE, **cfg.stimulus_kwargs())

    result = ds_mod.run_trial(model, params, profile, defaults,
                              max_sway_deg=cfg["sampling"]["max_sway_deg"])
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out)
    if isinstance(result, ds_mod.Rejected):
        kind = "diverged" if result.diverged else "exceeded the sway threshold"
        raise DivergenceError(
            f"simulation {kind} at t = {result.abort_time_s:.3f} s "
            f"(peak sway {result.peak_sway_deg:.2f} deg)")
    t = np.arange(result.length) / stimulus.CANONICAL_SAMPLE_RATE
    path = os.path.join(args.out, "trace.csv")
    _write_trace_csv(path, t, {
        "alpha_fs_rad": result.alpha_fs, "alpha_ss_rad": result.alpha_ss,
        "alpha_ls_rad": result.alpha_ls, "alpha_ts_rad": result.alpha_ts})
    print(f"wrote {path} ({result.length} rows, peak sway "
          f"{result.peak_sway_deg:.3f} deg)")
    return 0


def cmd_stimulus_export(args):
    cfg = load_config(args.config)
    profile = stimulus.canonical_profile(
        sample_rate=cfg["stimulus"]["sample_rate"], **cfg.stimulus_kwargs())
    outdir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(outdir, exist_ok=True)
    stimulus.export_csv(profile, args.out)
    print(f"wrote {args.out} ({profile.length} samples, "
          f"{profile.duration:.1f} s)")
    return 0


def cmd_dataset(args):
    cfg = load_config(args.config)
    s = cfg["sampling"]
    n_samples = args.samples if args.samples else s["n_samples"]
    seed = args.seed if args.seed is not None else s["seed"]
    fractions = (s["train_fraction"], s["val_fraction"],
                 1.0 - s["train_fraction"] - s["val_fraction"])

    def progress(acc, tot):
        if acc % 100 == 0:
            print(f"  accepted {acc} trials ({tot} attempts)", flush=True)

    ds = ds_mod.build_dataset(
        n_samples, seed, fractions, model=cfg.plant_model(),
        defaults=cfg.controller_defaults(), sample_std=s["sample_std"],
        max_sway_deg=s["max_sway_deg"], stimulus_kwargs=cfg.stimulus_kwargs(),
        jobs=args.jobs, min_acceptance=s["min_acceptance_rate"],
        progress=progress if not args.quiet else None)
    ds_mod.save_dataset(ds, args.out)
    _echo_config(cfg, args.out)
    if args.export_traces:
        ds_mod.export_traces(ds, args.out)
    c = {k: int(np.sum(ds.splits == v)) for k, v in
         (("train", 0), ("val", 1), ("test", 2))}
    print(f"dataset: {ds.n_trials} trials -> {ds.n_samples} samples "
          f"(train {c['train']} / val {c['val']} / test {c['test']}), "
          f"{len(ds.rejected)} rejected")
    return 0


def cmd_featurize(args):
    cfg = load_config(args.config)
    ds = ds_mod.load_dataset(args.data)
    features.featurize_dataset(ds, cfg["features"]["variance_floor"],
                               cfg["features"]["window_fn"])
    ds_mod.save_dataset(ds, args.data)
    floored = ds.feature_meta["variance_floored_elements"]
    if floored:
        print(f"note: variance floor hit for {floored} image elements")
    print(f"featurized {ds.n_samples} samples "
          f"({features.N_FRAMES}x{features.N_BINS}x3)")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    _set_jobs(args.jobs)
    ds = ds_mod.load_dataset(args.data)
    data = net.RegressionData.from_dataset(ds)
    spec = cfg.arch_spec(in_channels=3, out_dim=5)
    seed = args.seed if args.seed is not None else cfg["net"]["seed"]
    network = net.init(spec, seed)
    schedule = cfg.training_schedule(args.epochs)

    def log(epoch, train_loss, val_loss, lr):
        if (epoch + 1) % 10 == 0 or epoch == 0:
            print(f"  epoch {epoch + 1:4d}  train {train_loss:.4f}  "
                  f"val {val_loss:.4f}  lr {lr:.5f}", flush=True)

    net.train(network, data, schedule, log=None if args.quiet else log)
    outdir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(outdir, exist_ok=True)
    net.save_checkpoint(network, args.out)
    _echo_config(cfg, outdir)
    hist = os.path.join(outdir, "history.csv")
    with open(hist, "w") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for i, (tr, va) in enumerate(zip(network.history["train"],
                                         network.history["val"])):
            fh.write(f"{i},{tr:.8f},{va:.8f}\n")
    best = min(network.history["val"]) if network.history["val"] else math.nan
    print(f"trained {schedule.epochs} epochs; best val MSE {best:.4f}; "
          f"wrote {args.out}")
    return 0


def _baseline_fit_rmse(data):
    """Fit RMSE of the train-mean predictor on the test split (standardized)."""
    from .net import _standardize

    t = _standardize(data.targets, data.target_stats).astype(float)
    test = t[data.splits == 2]
    train_mean = t[data.splits == 0].mean(axis=0)
    mask = np.zeros(t.shape[1], dtype=bool)
    mask[4::5] = True
    err = test - train_mean
    return math.sqrt(float(np.mean(err[:, ~mask] ** 2)))


def cmd_eval(args):
    cfg = load_config(args.config)
    _set_jobs(args.jobs)
    ds = ds_mod.load_dataset(args.data)
    network = net.load_checkpoint(args.model)
    data = net.RegressionData.from_dataset(ds)
    report = evaluate.evaluate_splits(network, data)

    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out)
    evaluate.write_metrics_csv(report, os.path.join(args.out, "metrics.csv"))
    evaluate.write_param_errors_csv(
        report, os.path.join(args.out, "param_errors.csv"))
    evaluate.write_histograms_csv(ds, args.out)

    lines = ["identification metrics (standardized space)"]
    for name in ("train", "val", "test"):
        if name in report.splits:
            m = report.splits[name]
            lines.append(f"  {name:5s} total RMSE {m.total_rmse:.4f}  "
                         f"fit RMSE {m.fit_rmse:.4f}  "
                         f"accuracy {100 * m.accuracy:.2f}%")

    if args.loop_closure:
        result = evaluate.loop_closure(network, ds, args.loop_closure,
                                       model=cfg.plant_model(),
                                       defaults=cfg.controller_defaults())
        evaluate.write_loop_closure_csv(
            result, os.path.join(args.out, "loop_closure.csv"))
        e = result.e_id_values
        lines.append(f"  loop closure over {len(result.rows)} trials: "
                     f"median E_id {np.median(e):.5f} deg, "
                     f"max {e.max():.5f} deg, "
                     f"corr(E_id, param MSE) {result.correlation:.4f}, "
                     f"{result.n_diverged} diverged")

    summary = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(summary)
    print(summary, end="")

    if args.check:
        baseline = _baseline_fit_rmse(data)
        m = report.splits["test"]
        ok_fit = m.fit_rmse <= 0.8 * baseline
        ok_acc = m.accuracy >= 0.75
        print(f"check: test fit RMSE {m.fit_rmse:.4f} vs 0.8*baseline "
              f"{0.8 * baseline:.4f} -> {'ok' if ok_fit else 'FAIL'}; "
              f"accuracy {100 * m.accuracy:.2f}% vs 75% -> "
              f"{'ok' if ok_acc else 'FAIL'}")
        if not (ok_fit and ok_acc):
            raise AcceptanceFailure("evaluation below acceptance thresholds")
    return 0


def cmd_compare(args):
    cfg = load_config(args.config)
    _set_jobs(args.jobs)
    ds = ds_mod.load_dataset(args.data)
    modular_net = net.load_checkpoint(args.model)
    modular_report = evaluate.evaluate_splits(
        modular_net, net.RegressionData.from_dataset(ds))

    images, targets, trial_splits, image_stats = features.monolithic_arrays(
        ds, cfg["features"]["variance_floor"], cfg["features"]["window_fn"])
    data = net.RegressionData.from_monolithic(images, targets, trial_splits,
                                              image_stats)
    spec = cfg.arch_spec(in_channels=5, out_dim=15)
    seed = args.seed if args.seed is not None else cfg["net"]["seed"]
    network = net.init(spec, seed)
    schedule = cfg.training_schedule(args.epochs)

    def log(epoch, train_loss, val_loss, lr):
        if (epoch + 1) % 10 == 0 or epoch == 0:
            print(f"  [monolithic] epoch {epoch + 1:4d}  train "
                  f"{train_loss:.4f}  val {val_loss:.4f}", flush=True)

    net.train(network, data, schedule, log=None if args.quiet else log)
    mono_report = evaluate.evaluate_splits(network, data)

    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out)
    net.save_checkpoint(network, os.path.join(args.out, "monolithic.pcnn"))
    path = os.path.join(args.out, "comparison.csv")
    with open(path, "w") as fh:
        fh.write("variant,split,total_rmse,fit_rmse,accuracy\n")
        for variant, rep in (("modular", modular_report),
                             ("monolithic", mono_report)):
            for name in ("train", "val", "test"):
                if name in rep.splits:
                    m = rep.splits[name]
                    fh.write(f"{variant},{name},{m.total_rmse:.6f},"
                             f"{m.fit_rmse:.6f},{m.accuracy:.6f}\n")
    mo = modular_report.splits["test"]
    mn = mono_report.splits["test"]
    lines = [
        "modular vs monolithic (test split)",
        f"  modular    total RMSE {mo.total_rmse:.4f}  fit RMSE "
        f"{mo.fit_rmse:.4f}  accuracy {100 * mo.accuracy:.2f}%",
        f"  monolithic total RMSE {mn.total_rmse:.4f}  fit RMSE "
        f"{mn.fit_rmse:.4f}  accuracy {100 * mn.accuracy:.2f}%",
        f"  accuracy margin {100 * (mo.accuracy - mn.accuracy):.2f} points "
        f"({ds.n_trials} monolithic samples vs {ds.n_samples} modular)",
    ]
    summary = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "comparison.txt"), "w") as fh:
        fh.write(summary)
    print(summary, end="")
    return 0


def _read_trace_csv(path):
    """Parse an identify input trace; returns dict of column -> array."""
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            rows = [line.strip().split(",") for line in fh if line.strip()]
    except OSError as e:
        raise ConfigError(f"cannot read trace: {e}") from None
    required = ["time_s", "alpha_fs_rad", "alpha_ss_rad", "alpha_ts_rad"]
    for col in required:
        if col not in header:
            raise ConfigError(
                f"{path}: missing column {col!r}; expected header "
                f"time_s,alpha_fs_rad,alpha_ss_rad[,alpha_ls_rad],alpha_ts_rad")
    data = np.array([[float(v) for v in r] for r in rows])
    if data.shape[0] != evaluate.TRACE_LENGTH:
        raise ConfigError(
            f"{path}: expected {evaluate.TRACE_LENGTH} samples at 50 Hz "
            f"(121 s), got {data.shape[0]}; resampling is not performed")
    cols = {name: data[:, i] for i, name in enumerate(header)}
    dt = np.diff(cols["time_s"])
    if np.any(np.abs(dt - 0.02) > 1e-6):
        raise ConfigError(f"{path}: sample spacing must be 20 ms (50 Hz)")
    return cols


def cmd_identify(args):
    cfg = load_config(args.config)
    modules = [m.strip() for m in args.modules.split(",") if m.strip()]
    for m in modules:
        if m not in JOINTS:
            raise ConfigError(f"unknown module {m!r}; choose from {JOINTS}")
    if not modules:
        raise ConfigError("no modules requested")

    cols = _read_trace_csv(args.trace)
    straight = args.straight_legs or "alpha_ls_rad" not in cols
    if "alpha_ls_rad" not in cols:
        if "knee" in modules:
            raise ConfigError("trace has no alpha_ls_rad column; the knee "
                              "module cannot be identified (straight legs)")
        cols["alpha_ls_rad"] = cols["alpha_ss_rad"]

    class Trace:
        alpha_fs = cols["alpha_fs_rad"]
        alpha_ss = cols["alpha_ss_rad"]
        alpha_ls = cols["alpha_ls_rad"]
        alpha_ts = cols["alpha_ts_rad"]

    network = net.load_checkpoint(args.model)
    defaults = cfg.controller_defaults()
    identified = {}
    for joint in modules:
        img = features.modular_image(Trace, joint,
                                     cfg["features"]["window_fn"])
        params, vec = net.predict_params(
            network, img, defaults.modules[JOINTS.index(joint)])
        identified[joint] = (params, vec)

    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out)
    path = os.path.join(args.out, "identified_params.csv")
    with open(path, "w") as fh:
        fh.write("module,kp,ki,kd,delay_s,controlled,"
                 "kp_dev,ki_dev,kd_dev,delay_dev,c_raw\n")
        for joint in modules:
            p, v = identified[joint]
            fh.write(f"{joint},{p.kp:.4f},{p.ki:.4f},{p.kd:.4f},"
                     f"{p.delay:.4f},{p.controlled.name.lower()},"
                     f"{v[0]:.4f},{v[1]:.4f},{v[2]:.4f},{v[3]:.4f},"
                     f"{v[4]:.4f}\n")
    print(f"wrote {path}")
    for joint in modules:
        p, _ = identified[joint]
        print(f"  {joint:5s} kp {p.kp:8.2f}  ki {p.ki:7.3f}  kd {p.kd:7.3f}  "
              f"delay {p.delay:.4f} s  {p.controlled.name.lower()}")

    if args.overlay:
        model = cfg.plant_model()
        params = list(defaults.modules)
        for joint, (p, _) in identified.items():
            params[JOINTS.index(joint)] = p
        profile = stimulus.canonical_profile(
            sample_rate=ds_mod.SIM_SAMPLE_RATE, **cfg.stimulus_kwargs())
        locked = ("knee",) if straight else ()
        result = ds_mod.run_trial(model, params, profile, defaults,
                                  max_sway_deg=cfg["sampling"]["max_sway_deg"],
                                  locked=locked)
        if isinstance(result, ds_mod.Rejected):
            raise DivergenceError(
                f"re-simulation with identified parameters aborted at "
                f"t = {result.abort_time_s:.3f} s")
        t = np.arange(result.length) / stimulus.CANONICAL_SAMPLE_RATE
        overlay = os.path.join(args.out, "overlay.csv")
        _write_trace_csv(overlay, t, {
            "alpha_ss_rad": Trace.alpha_ss, "alpha_ls_rad": Trace.alpha_ls,
            "alpha_ts_rad": Trace.alpha_ts,
            "sim_alpha_ss_rad": result.alpha_ss,
            "sim_alpha_ls_rad": result.alpha_ls,
            "sim_alpha_ts_rad": result.alpha_ts})
        print(f"wrote {overlay}")
    return 0


# -- parser -----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="postureid",
        description="Balance-control simulation and CNN-based identification "
                    "of posture control parameters.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, jobs=False, quiet=False):
        if config:
            p.add_argument("--config", help="INI configuration file")
        if jobs:
            p.add_argument("--jobs", type=int, default=0,
                           help="worker/thread count (1 = byte-deterministic)")
        if quiet:
            p.add_argument("--quiet", action="store_true",
                           help="suppress progress output")

    p = sub.add_parser("simulate", help="run one closed-loop trial")
    common(p)
    p.add_argument("--params-file", help="JSON file of module parameters")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tilt-amplitude", type=float,
                   help="stimulus peak-to-peak amplitude in degrees")
    p.set_defaults(func=cmd_simulate)

    p_stim = sub.add_parser("stimulus", help="stimulus utilities")
    stim_sub = p_stim.add_subparsers(dest="stimulus_command", required=True)
    p = stim_sub.add_parser("export", help="write the canonical profile CSV")
    common(p)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_stimulus_export)

    p = sub.add_parser("dataset", help="generate a labeled dataset")
    common(p, jobs=True, quiet=True)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--samples", type=int,
                   help="modular sample count (default from config)")
    p.add_argument("--seed", type=int, help="dataset seed")
    p.add_argument("--export-traces", action="store_true",
                   help="also write per-trial CSV traces")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("featurize", help="attach spectrogram images")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train the modular network")
    common(p, jobs=True, quiet=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--seed", type=int, help="network seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained network")
    common(p, jobs=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--loop-closure", type=int, metavar="K",
                   help="re-simulate K held-out trials")
    p.add_argument("--check", action="store_true",
                   help="exit 4 unless acceptance thresholds hold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare",
                       help="train/evaluate the monolithic variant and "
                            "report side by side")
    common(p, jobs=True, quiet=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", required=True, help="modular checkpoint")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--seed", type=int, help="monolithic network seed")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("identify",
                       help="identify module parameters from a trace CSV")
    common(p)
    p.add_argument("--trace", required=True, help="input trace CSV (50 Hz)")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--modules", default="ankle,knee,hip",
                   help="comma-separated modules to identify")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--overlay", action="store_true",
                   help="re-simulate and write an overlay CSV")
    p.add_argument("--straight-legs", action="store_true",
                   help="lock the knee in the re-simulation")
    p.set_defaults(func=cmd_identify)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as e:
        print(f"error: missing input {e.filename!r}; run the upstream "
              f"pipeline stage first (dataset -> featurize -> train -> eval)",
              file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except AcceptanceFailure as e:
        print(f"acceptance: {e}", file=sys.stderr)
        return EXIT_ACCEPTANCE


if __name__ == "__main__":
    sys.exit(main())
