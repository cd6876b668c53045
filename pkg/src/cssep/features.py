"""Geometry-agnostic per-channel features.

Each channel's frame vector is the concatenation of
  - the squared magnitude of the channel-average spectrum (shared by all
    channels), log-compressed and mean/variance normalized per frequency
    over the analysis window, and
  - the channel's phase relative to the average spectrum (IPD), with the
    per-frequency circular mean over the window removed.

Because every cross-channel operation is an arithmetic mean, the feature
set is equivariant to channel permutations and works for any M >= 1.
"""

from dataclasses import dataclass

import numpy as np

EPS = 1e-8


@dataclass
class FeatureSequence:
    """Per-channel frame vectors of shape (M, T, 2F): [magnitude, IPD]."""

    data: np.ndarray
    n_freq: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != 2 * self.n_freq:
            raise ValueError("data must have shape (M, T, 2*n_freq)")

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_frames(self):
        return self.data.shape[1]


def average_spectrum(spec) -> np.ndarray:
    """Arithmetic mean of the STFT coefficients over channels, shape (F, T)."""
    return spec.data.mean(axis=0)


def magnitude_feature(avg) -> np.ndarray:
    """Squared magnitude of the average spectrum, shape (F, T)."""
    return np.abs(avg) ** 2


def ipd_feature(spec, avg=None) -> np.ndarray:
    """Per-channel phase relative to the average spectrum, shape (M, F, T).

    Angles lie in (-pi, pi].  Bins where the average spectrum is smaller
    than EPS in magnitude get an IPD of exactly 0.
    """
    if spec.n_channels == 1:
        # the single channel is its own phase reference
        return np.zeros(spec.data.shape, dtype=np.float64)
    if avg is None:
        avg = average_spectrum(spec)
    # angle(X / avg) without the division: angle(X * conj(avg))
    ipd = np.angle(spec.data * np.conj(avg)[None])
    return np.where(np.abs(avg)[None] < EPS, 0.0, ipd)


def normalize_magnitude(zmag) -> np.ndarray:
    """Log-compress, then per-frequency mean/variance normalize over frames."""
    logmag = np.log(zmag + EPS)
    mean = logmag.mean(axis=-1, keepdims=True)
    std = logmag.std(axis=-1, keepdims=True)
    return (logmag - mean) / (std + EPS)

def normalize_ipd(ipd) -> np.ndarray:
    """Remove the per-channel, per-frequency circular mean over frames.

    The reference phase is the angle of the frame-averaged unit phasor;
    the result is re-wrapped to (-pi, pi].
    """
    phasor = np.exp(1j * ipd)
    ref = np.angle(phasor.mean(axis=-1, keepdims=True))
    return np.angle(np.exp(1j * (ipd - ref)))


def extract_features(spec) -> FeatureSequence:
    """Compute the normalized [magnitude, IPD] feature set, shape (M, T, 2F)."""
    avg = average_spectrum(spec)
    zmag = normalize_magnitude(magnitude_feature(avg))  # (F, T)
    zipd = normalize_ipd(ipd_feature(spec, avg))        # (M, F, T)
    m = spec.n_channels
    mag_part = np.broadcast_to(zmag.T[None], (m,) + zmag.T.shape)  # (M, T, F)
    ipd_part = zipd.transpose(0, 2, 1)                             # (M, T, F)
    return FeatureSequence(
        np.concatenate([mag_part, ipd_part], axis=-1), spec.n_freq)
