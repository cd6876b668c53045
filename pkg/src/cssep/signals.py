"""Windowed STFT analysis/synthesis and the core waveform/spectrogram types.

Shape conventions follow the rest of the package:
    waveform channels: (M, L)   M microphones, L samples
    spectrogram data:  (M, F, T)   F one-sided frequency bins, T frames
"""

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SAMPLE_RATE = 16000


def make_window(name, length):
    """Build an analysis/synthesis taper.

    "sqrt_hann" is the square-root raised-cosine taper with a half-sample
    offset, w[n] = sin(pi*(n+0.5)/N).  Its square sums to a constant for any
    hop that divides the frame length, so analysis*synthesis satisfies COLA.
    "rect" is the all-ones window (useful for bin-exact sinusoid tests).
    """
    n = np.arange(length)
    if name == "sqrt_hann":
        return np.sin(np.pi * (n + 0.5) / length)
    if name == "rect":
        return np.ones(length)
    raise ValueError(f"unknown window {name!r}")


@dataclass(frozen=True)
class StftConfig:
    frame_length: int = 512
    hop_length: int = 256
    fft_size: int = 512
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.hop_length <= 0 or self.frame_length <= 0:
            raise ValueError("frame_length and hop_length must be positive")
        if self.frame_length % self.hop_length != 0:
            raise ValueError("hop_length must divide frame_length")
        if self.fft_size < self.frame_length:
            raise ValueError("fft_size must be >= frame_length")
        make_window(self.window, self.frame_length)

    @property
    def n_freq(self):
        return self.fft_size // 2 + 1

    def window_array(self):
        return make_window(self.window, self.frame_length)


# 32 ms frames / 16 ms hop at 16 kHz; the usual front-end setting.
DEFAULT_STFT = StftConfig(frame_length=512, hop_length=256, fft_size=512)
# Small preset for fast tests and desk-scale experiments (|F| = 129).
DESK_STFT = StftConfig(frame_length=256, hop_length=128, fft_size=256)


@dataclass
class MultichannelWaveform:
    """M synchronized sample sequences at a common rate.

    channels: real array of shape (M, L)
    """

    channels: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.channels = np.atleast_2d(np.asarray(self.channels))
        if self.channels.ndim != 2 or self.channels.shape[0] < 1:
            raise ValueError("channels must be a (M, L) array with M >= 1")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def n_channels(self):
        return self.channels.shape[0]

    @property
    def n_samples(self):
        return self.channels.shape[1]


@dataclass
class Spectrogram:
    """Complex one-sided STFT tensor of shape (M, F, T)."""

    data: np.ndarray
    config: StftConfig
    sample_rate: int = DEFAULT_SAMPLE_RATE
    n_samples: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError("data must have shape (M, F, T)")
        if self.data.shape[1] != self.config.n_freq:
            raise ValueError(
                f"expected {self.config.n_freq} frequency bins, "
                f"got {self.data.shape[1]}")

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_freq(self):
        return self.data.shape[1]

    @property
    def n_frames(self):
        return self.data.shape[2]


def stft(wave: MultichannelWaveform, cfg: StftConfig = DEFAULT_STFT) -> Spectrogram:
    """Short-time Fourier transform of every channel.

    Frame t covers samples [t*hop, t*hop + frame_length); the final partial
    frame is zero-padded.  Returns the one-sided spectrum (fft_size/2 + 1
    bins) per channel.
    """
    x = wave.channels
    n = wave.n_samples
    if n < cfg.frame_length:
        raise ValueError(
            f"signal of {n} samples is shorter than one frame "
            f"({cfg.frame_length} samples)")
    n_frames = -(-n // cfg.hop_length)  # ceil
    padded_len = (n_frames - 1) * cfg.hop_length + cfg.frame_length
    padded = np.zeros((x.shape[0], padded_len), dtype=np.float64)
    padded[:, :n] = x
    frames = np.lib.stride_tricks.sliding_window_view(
        padded, cfg.frame_length, axis=1)[:, ::cfg.hop_length]
    windowed = frames * cfg.window_array()
    # (M, T, F) -> (M, F, T)
    spec = np.fft.rfft(windowed, n=cfg.fft_size, axis=-1).transpose(0, 2, 1)
    return Spectrogram(spec, cfg, wave.sample_rate, n_samples=n)


def istft(spec: Spectrogram, cfg: StftConfig | None = None,
          length: int | None = None) -> MultichannelWaveform:
    """Inverse STFT by windowed overlap-add.

    The overlap-add result is divided by the accumulated
    analysis*synthesis window envelope, which makes the reconstruction
    exact everywhere (including the partially covered edge samples).
    """
    if cfg is not None and cfg != spec.config:
        raise ValueError(f"config mismatch: {cfg} vs spectrogram's {spec.config}")
    cfg = spec.config
    if length is None:
        length = spec.n_samples
    if length is None:
        length = spec.n_frames * cfg.hop_length

    window = cfg.window_array()
    n_frames = spec.n_frames
    total = (n_frames - 1) * cfg.hop_length + cfg.frame_length
    # (M, T, fft_size) time-domain frames; keep only the windowed span.
    frames = np.fft.irfft(spec.data.transpose(0, 2, 1), n=cfg.fft_size, axis=-1)
    frames = frames[..., :cfg.frame_length] * window

    out = np.zeros((spec.n_channels, total))
    envelope = np.zeros(total)
    wsq = window * window
    for t in range(n_frames):
        start = t * cfg.hop_length
        out[:, start:start + cfg.frame_length] += frames[:, t]
        envelope[start:start + cfg.frame_length] += wsq
    out /= np.maximum(envelope, 1e-12)

    if length > total:
        raise ValueError(f"requested length {length} exceeds synthesis span {total}")
    return MultichannelWaveform(out[:, :length], spec.sample_rate)
