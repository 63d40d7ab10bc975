"""Flat key/value configuration with sections (INI syntax).

Every key has a default; unknown sections or keys are rejected.  The
controller defaults reproduce the standard parameter table exactly, and the
effective configuration can be echoed into output directories for
provenance.
"""

import configparser
import io
import math
from copy import deepcopy

from . import dec, features, plant, stimulus


class ConfigError(ValueError):
    pass


def _controller_defaults():
    out = {"threshold": dec.DEFAULT_THRESHOLD, "controlled_var": "com_sway",
           "dt": dec.CONTROL_DT}
    for joint in plant.JOINTS:
        t = dec.TABLE_DEFAULTS[joint]
        for key in ("kp", "ki", "kd", "delay", "passive_kp", "passive_kd"):
            out[f"{joint}_{key}"] = t[key]
    return out


DEFAULTS = {
    "plant": {
        "g": plant.GRAVITY,
        **{f"{seg}_{k}": plant.DEFAULT_SEGMENTS[seg][k]
           for seg in plant.SEGMENTS for k in ("mass", "length", "com")},
    },
    "controller": _controller_defaults(),
    "stimulus": {
        "stages": stimulus.CANONICAL_STAGES,
        "stage_duration": stimulus.CANONICAL_STAGE_DURATION,
        "peak_to_peak_deg": 2.0,
        "sample_rate": stimulus.CANONICAL_SAMPLE_RATE,
        "lfsr_taps": ",".join(str(v) for v in stimulus.DEFAULT_TAPS),
        "lfsr_seed": ",".join(str(v) for v in stimulus.DEFAULT_SEED),
    },
    "sampling": {
        "n_samples": 4800,
        "seed": 20240,
        "train_fraction": 0.70,
        "val_fraction": 0.15,
        "sample_std": 0.5,
        "max_sway_deg": 6.0,
        "min_acceptance_rate": 0.01,
    },
    "features": {
        "window": features.WINDOW,
        "overlap": features.OVERLAP,
        "bins": features.N_BINS,
        "window_fn": "rectangular",
        "variance_floor": features.DEFAULT_VARIANCE_FLOOR,
    },
    "net": {
        "widths": "16,32,64,128,128",
        "batch_size": 64,
        "epochs": 200,
        "learning_rate": 0.01,
        "lr_decay": 0.5,
        "lr_decay_every": 50,
        "momentum": 0.9,
        "seed": 77,
    },
}


class Config:
    """Validated configuration values with typed accessors."""

    def __init__(self, values=None):
        self.values = deepcopy(DEFAULTS)
        if values:
            for section, keys in values.items():
                self._apply(section, keys)

    def _apply(self, section, keys):
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in keys.items():
            if key not in self.values[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            default = DEFAULTS[section][key]
            try:
                if isinstance(default, bool):
                    value = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    value = int(raw)
                elif isinstance(default, float):
                    value = float(raw)
                else:
                    value = str(raw)
            except ValueError:
                raise ConfigError(
                    f"cannot parse {section}.{key} = {raw!r}") from None
            self.values[section][key] = value

    def __getitem__(self, section):
        return self.values[section]

    # -- domain object builders ------------------------------------------

    def anthropometry(self):
        p = self.values["plant"]
        m = tuple(p[f"{s}_mass"] for s in plant.SEGMENTS)
        l = tuple(p[f"{s}_length"] for s in plant.SEGMENTS)
        c = tuple(p[f"{s}_com"] for s in plant.SEGMENTS)
        inertia = tuple(mi * li * li / 12.0 for mi, li in zip(m, l))
        return plant.Anthropometry(m, l, c, inertia, p["g"])

    def plant_model(self):
        return plant.build_plant(self.anthropometry())

    def controller_defaults(self):
        c = self.values["controller"]
        controlled = {"com_sway": dec.Controlled.COM_SWAY,
                      "joint_angle": dec.Controlled.JOINT_ANGLE}
        try:
            cv = controlled[c["controlled_var"]]
        except KeyError:
            raise ConfigError(
                f"controller.controlled_var must be one of {sorted(controlled)}")
        mods = tuple(dec.ModuleParams(kp=c[f"{j}_kp"], ki=c[f"{j}_ki"],
                                      kd=c[f"{j}_kd"], delay=c[f"{j}_delay"],
                                      controlled=cv)
                     for j in plant.JOINTS)
        passive = tuple(dec.PassiveParams(kp=c[f"{j}_passive_kp"],
                                          kd=c[f"{j}_passive_kd"])
                        for j in plant.JOINTS)
        return dec.Defaults(modules=mods, passive=passive,
                            threshold=c["threshold"])

    def stimulus_kwargs(self):
        s = self.values["stimulus"]
        return dict(
            stages=s["stages"],
            stage_duration=s["stage_duration"],
            peak_to_peak=math.radians(s["peak_to_peak_deg"]),
            taps=tuple(int(v) for v in s["lfsr_taps"].split(",")),
            seed=tuple(int(v) for v in s["lfsr_seed"].split(",")),
        )

    def arch_spec(self, in_channels=3, out_dim=5):
        from .net import ArchSpec

        widths = tuple(int(v) for v in self.values["net"]["widths"].split(","))
        return ArchSpec(in_channels=in_channels, out_dim=out_dim,
                        widths=widths)

    def training_schedule(self, epochs=None):
        from .net import TrainingSchedule

        n = self.values["net"]
        return TrainingSchedule(
            learning_rate=n["learning_rate"], momentum=n["momentum"],
            batch_size=n["batch_size"],
            epochs=n["epochs"] if epochs is None else epochs,
            lr_decay=n["lr_decay"], lr_decay_every=n["lr_decay_every"])


def load_config(path=None):
    """Parse an INI file into a validated Config; None gives pure defaults."""
    if path is None:
        return Config()
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    values = {s: dict(parser.items(s)) for s in parser.sections()}
    return Config(values)


def dump_config(cfg):
    """Render the effective configuration as INI text."""
    parser = configparser.ConfigParser()
    for section, keys in cfg.values.items():
        parser[section] = {k: str(v) for k, v in keys.items()}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))
