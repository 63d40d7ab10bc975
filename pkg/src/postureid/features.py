"""Spectrogram image encoding of sway traces.

A short-time Fourier transform over 250-sample windows (hop 115, 250
frequency points) yields 51 time frames; the first 51 bins (0-10 Hz at
0.2 Hz/bin) are kept, giving a 51 x 51 complex matrix per signal.  A modular
image stacks |above|, |below| and the wrapped phase difference of the segment
pair around one joint; the monolithic variant stacks the three segment
magnitudes and two phase differences.  Signals are scaled to degrees before
the transform so that the literal divide-by-variance normalization keeps the
pixel values in a trainable range.
"""

from dataclasses import dataclass

import numpy as np

WINDOW = 250
OVERLAP = 135
HOP = WINDOW - OVERLAP
N_FRAMES = 51
N_BINS = 51
SIGNAL_LENGTH = 6051
PHASE_MAGNITUDE_FLOOR = 1e-12
DEFAULT_VARIANCE_FLOOR = 1e-3

# (below, above) segment-pair indices into (fs, ss, ls, ts) per joint module
MODULE_PAIRS = {"ankle": (0, 1), "knee": (1, 2), "hip": (2, 3)}
MODULE_ORDER = ("ankle", "knee", "hip")


@dataclass(frozen=True)
class FeatureImage:
    """Image tensor (frames, bins, channels) plus channel semantics."""

    data: np.ndarray
    channels: tuple

    @property
    def shape(self):
        return self.data.shape


@dataclass
class ImageStats:
    """Element-wise mean and (floored) variance over the training split."""

    mean: np.ndarray
    variance: np.ndarray
    floored: int = 0


def frame_signal(signal, window=WINDOW, hop=HOP):
    """Slice a signal into overlapping frames (frames, window)."""
    signal = np.asarray(signal, dtype=float)
    n_frames = 1 + (signal.shape[0] - window) // hop
    idx = hop * np.arange(n_frames)[:, None] + np.arange(window)[None, :]
    return signal[idx]


def stft(signal, window=WINDOW, hop=HOP, window_fn="rectangular"):
    """Full complex STFT (frames, window bins); rectangular window default."""
    frames = frame_signal(signal, window, hop)
    if window_fn == "hann":
        frames = frames * np.hanning(window)[None, :]
    elif window_fn != "rectangular":
        raise ValueError(f"unknown window function {window_fn!r}")
    return np.fft.fft(frames, n=window, axis=1)


def spectrogram(signal, n_bins=N_BINS, window_fn="rectangular"):
    """Complex 51 (time frames) x 51 (frequency bins, 0-10 Hz) matrix."""
    signal = np.asarray(signal, dtype=float)
    if signal.shape != (SIGNAL_LENGTH,):
        raise ValueError(
            f"expected a {SIGNAL_LENGTH}-sample signal, got {signal.shape}")
    return stft(signal, window_fn=window_fn)[:, :n_bins]


def _phase(spec):
    phase = np.angle(spec)
    phase[np.abs(spec) < PHASE_MAGNITUDE_FLOOR] = 0.0
    return phase


def wrap_phase(delta):
    """Wrap angle differences into (-pi, pi]."""
    wrapped = np.mod(delta, 2.0 * np.pi)
    return np.where(wrapped > np.pi, wrapped - 2.0 * np.pi, wrapped)


def _signals_deg(trace):
    """Trace series (fs, ss, ls, ts) in degrees, as a dict of spectrograms."""
    return [np.degrees(np.asarray(s, dtype=float)) for s in
            (trace.alpha_fs, trace.alpha_ss, trace.alpha_ls, trace.alpha_ts)]


def modular_image(trace, joint, window_fn="rectangular"):
    """Three-channel image for one joint module.

    Channels: magnitude of the segment above, magnitude of the segment below,
    wrapped phase difference above-minus-below.
    """
    if joint not in MODULE_PAIRS:
        raise ValueError(f"unknown joint {joint!r}")
    signals = _signals_deg(trace)
    below_i, above_i = MODULE_PAIRS[joint]
    s_below = spectrogram(signals[below_i], window_fn=window_fn)
    s_above = spectrogram(signals[above_i], window_fn=window_fn)
    data = np.stack([np.abs(s_above), np.abs(s_below),
                     wrap_phase(_phase(s_above) - _phase(s_below))], axis=-1)
    return FeatureImage(data=data, channels=("above_magnitude",
                                             "below_magnitude",
                                             "phase_difference"))


def monolithic_image(trace, window_fn="rectangular"):
    """Five-channel image over the three segment sways.

    The support tilt is omitted (identical across samples); channels are the
    three magnitudes plus the wrapped phase differences shank-thigh and
    thigh-trunk.
    """
    signals = _signals_deg(trace)
    specs = [spectrogram(signals[i], window_fn=window_fn) for i in (1, 2, 3)]
    mags = [np.abs(s) for s in specs]
    phases = [_phase(s) for s in specs]
    data = np.stack(mags + [wrap_phase(phases[0] - phases[1]),
                            wrap_phase(phases[1] - phases[2])], axis=-1)
    return FeatureImage(data=data, channels=(
        "shank_magnitude", "thigh_magnitude", "trunk_magnitude",
        "phase_difference_shank_thigh", "phase_difference_thigh_trunk"))


def compute_image_stats(images, floor=DEFAULT_VARIANCE_FLOOR):
    """Element-wise mean/variance over the leading (sample) axis."""
    images = np.asarray(images, dtype=np.float64)
    mean = images.mean(axis=0)
    var = images.var(axis=0)
    floored = int(np.sum(var < floor))
    return ImageStats(mean=mean, variance=np.maximum(var, floor),
                      floored=floored)


def normalize_images(images, stats):
    """(x - mean) / variance per element, with the stats' variance floor."""
    return (np.asarray(images, dtype=np.float64) - stats.mean) / stats.variance


class _TraceView:
    """Adapter exposing one stored trace row as SimTrace-like attributes."""

    def __init__(self, row):
        self.alpha_fs, self.alpha_ss, self.alpha_ls, self.alpha_ts, \
            self.alpha_bs = row


def featurize_dataset(ds, variance_floor=DEFAULT_VARIANCE_FLOOR,
                      window_fn="rectangular"):
    """Attach modular images and training-split image stats to a dataset."""
    n = ds.n_samples
    images = np.empty((n, N_FRAMES, N_BINS, 3), dtype=np.float32)
    for pos in range(ds.n_trials):
        trace = _TraceView(ds.traces[pos])
        for j, joint in enumerate(MODULE_ORDER):
            images[3 * pos + j] = modular_image(trace, joint,
                                                window_fn=window_fn).data
    ds.images = images
    ds.image_stats = compute_image_stats(images[ds.split_mask("train")],
                                         variance_floor)
    ds.feature_meta = {
        "kind": "modular",
        "window": WINDOW,
        "overlap": OVERLAP,
        "frames": N_FRAMES,
        "bins": N_BINS,
        "window_fn": window_fn,
        "signal_units": "degrees",
        "variance_floor": variance_floor,
        "variance_floored_elements": ds.image_stats.floored,
        "channels": ["above_magnitude", "below_magnitude", "phase_difference"],
        "axes": ["time_frame", "frequency_bin", "channel"],
    }
    return ds


def monolithic_arrays(ds, variance_floor=DEFAULT_VARIANCE_FLOOR,
                      window_fn="rectangular"):
    """Monolithic rearrangement of the same trials.

    Returns (images (n_trials,51,51,5), targets (n_trials,15), splits,
    image_stats, target order ankle/knee/hip x (kp,ki,kd,delay,c)).
    """
    n = ds.n_trials
    images = np.empty((n, N_FRAMES, N_BINS, 5), dtype=np.float32)
    targets = np.empty((n, 15))
    trial_split = ds.trial_split_codes()
    for pos in range(n):
        images[pos] = monolithic_image(_TraceView(ds.traces[pos]),
                                       window_fn=window_fn).data
        for j in range(3):
            targets[pos, 5 * j:5 * j + 5] = ds.targets[3 * pos + j]
    stats = compute_image_stats(images[trial_split == 0], variance_floor)
    return images, targets, trial_split, stats
