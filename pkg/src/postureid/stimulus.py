"""Pseudo-random ternary support-surface tilt profile.

The tilt velocity is a ternary maximum-length sequence (LFSR over GF(3),
degree 5, period 3^5 - 1 = 242 stages) held for a fixed stage duration; the
tilt angle is its running integral, scaled to a requested peak-to-peak
amplitude.  The same profile drives every simulation.
"""

import math
from dataclasses import dataclass

import numpy as np

# degree-5 recurrence s_n = (s_{n-4} + 2*s_{n-5}) mod 3, primitive over GF(3)
DEFAULT_TAPS = (0, 0, 0, 1, 2)
DEFAULT_SEED = (0, 0, 0, 0, 1)

CANONICAL_STAGES = 242
CANONICAL_STAGE_DURATION = 0.5
CANONICAL_SAMPLE_RATE = 50.0
CANONICAL_PEAK_TO_PEAK = math.radians(2.0)


@dataclass(frozen=True)
class StimulusProfile:
    """Support tilt angle and rate sampled on a uniform grid."""

    sample_rate: float
    angle: np.ndarray
    rate: np.ndarray

    @property
    def length(self):
        return self.angle.shape[0]

    @property
    def duration(self):
        return (self.length - 1) / self.sample_rate

    def times(self):
        return np.arange(self.length) / self.sample_rate


def prts_sequence(stages=CANONICAL_STAGES, taps=DEFAULT_TAPS, seed=DEFAULT_SEED):
    """Ternary stage values in {-1, 0, +1} from a GF(3) shift register.

    Deterministic for fixed taps/seed; the canonical call yields the full
    period of 242 stages.
    """
    if stages < 2:
        raise ValueError("need at least 2 stages")
    if len(taps) != len(seed):
        raise ValueError("taps and seed must have equal length")
    if all(v == 0 for v in seed):
        raise ValueError("seed must be a non-zero register state")
    state = [int(v) % 3 for v in seed]
    out = np.empty(stages, dtype=np.int64)
    for n in range(stages):
        sym = state[0]
        out[n] = 0 if sym == 0 else (1 if sym == 1 else -1)
        fb = sum(t * v for t, v in zip(taps, state)) % 3
        state = [fb] + state[:-1]
    return out


def prts_profile(seq, stage_duration=CANONICAL_STAGE_DURATION,
                 peak_to_peak=CANONICAL_PEAK_TO_PEAK,
                 sample_rate=CANONICAL_SAMPLE_RATE):
    """Integrate the ternary velocity stages into a tilt profile.

    The stage velocity v is chosen so that the integrated angle spans exactly
    peak_to_peak; the angle starts at zero.  Sampling includes both endpoints,
    so canonical settings give 242 * 0.5 s = 121 s -> 6051 samples at 50 Hz.
    """
    if stage_duration <= 0 or sample_rate <= 0 or peak_to_peak < 0:
        raise ValueError("stage_duration, sample_rate must be positive; "
                         "peak_to_peak non-negative")
    seq = np.asarray(seq, dtype=float)
    cum = np.concatenate([[0.0], np.cumsum(seq) * stage_duration])
    raw_ptp = cum.max() - cum.min()
    v = peak_to_peak / raw_ptp if raw_ptp > 0 else 0.0

    duration = len(seq) * stage_duration
    n = int(round(duration * sample_rate)) + 1
    t = np.arange(n) / sample_rate
    # the epsilon guards FP edge cases just below a stage boundary
    stage = np.minimum(np.floor(t / stage_duration + 1e-9).astype(np.int64),
                       len(seq) - 1)
    angle = v * (cum[stage] + seq[stage] * (t - stage * stage_duration))
    rate = v * seq[stage]
    return StimulusProfile(sample_rate=float(sample_rate), angle=angle, rate=rate)


def canonical_profile(sample_rate=CANONICAL_SAMPLE_RATE,
                      peak_to_peak=CANONICAL_PEAK_TO_PEAK,
                      stages=CANONICAL_STAGES,
                      stage_duration=CANONICAL_STAGE_DURATION,
                      taps=DEFAULT_TAPS, seed=DEFAULT_SEED):
    """The profile shared by all simulations, at the requested sample rate."""
    return prts_profile(prts_sequence(stages, taps, seed),
                        stage_duration=stage_duration,
                        peak_to_peak=peak_to_peak, sample_rate=sample_rate)


def export_csv(profile, path):
    """Write (time_s, tilt_rad, rate_rad_s) rows."""
    t = profile.times()
    with open(path, "w") as fh:
        fh.write("time_s,tilt_rad,rate_rad_s\n")
        for i in range(profile.length):
            fh.write(f"{t[i]:.6f},{profile.angle[i]:.12e},{profile.rate[i]:.12e}\n")
