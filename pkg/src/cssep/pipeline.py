"""Continuous separation runtime: sliding windows, stitching, assembly.

A long multichannel recording is processed in overlapping windows.  Each
window is separated locally (masks -> MVDR -> gain adjustment), aligned to
the previous window's output order by minimum MSE on the overlap, and the
aligned segments are blended into two output spectrograms that invert to
waveforms of exactly the input length.
"""

from dataclasses import dataclass, field

import numpy as np

from .beamform import separate_window
from .model import estimate_masks
from .signals import MultichannelWaveform, Spectrogram, istft, stft


@dataclass(frozen=True)
class CssConfig:
    """Sliding-window geometry in seconds; two output channels."""

    window_seconds: float = 1.6
    shift_seconds: float = 0.4
    n_outputs: int = 2

    def __post_init__(self):
        if not 0 < self.shift_seconds < self.window_seconds:
            raise ValueError("need 0 < shift < window")
        if self.n_outputs != 2:
            raise ValueError("the pipeline produces exactly two outputs")

    def frame_counts(self, stft_cfg, sample_rate):
        """(window_frames, shift_frames) for the given STFT hop."""
        per_frame = stft_cfg.hop_length / sample_rate
        window = max(1, round(self.window_seconds / per_frame))
        shift = max(1, round(self.shift_seconds / per_frame))
        if shift >= window:
            raise ValueError("window/shift collapse at this hop length")
        return window, shift


def window_slices(total_frames, window_frames, shift_frames):
    """Ordered [start, end) frame ranges covering every frame.

    Windows advance by shift_frames; the final window is clipped to the
    end of the signal.  An input shorter than one window yields a single
    all-covering window.
    """
    if total_frames < 1:
        raise ValueError("total_frames must be >= 1")
    if total_frames <= window_frames:
        return [(0, total_frames)]
    slices = []
    start = 0
    while start + window_frames < total_frames:
        slices.append((start, start + window_frames))
        start += shift_frames
    slices.append((start, total_frames))
    return slices


def align_permutation(prev_overlap, cur_overlap):
    """Output permutation minimizing the overlap MSE against prev.

    Costs are mean squared differences of magnitude spectra, summed over
    the two channels; ties resolve to the identity permutation.
    """
    prev_mag = np.abs(np.asarray(prev_overlap))
    cur_mag = np.abs(np.asarray(cur_overlap))
    if prev_mag.shape != cur_mag.shape:
        raise ValueError(
            f"overlap shape mismatch {prev_mag.shape} vs {cur_mag.shape}")

    def cost(perm):
        return sum(
            np.mean((prev_mag[k] - cur_mag[perm[k]]) ** 2) for k in (0, 1))

    return (0, 1) if cost((0, 1)) <= cost((1, 0)) else (1, 0)


@dataclass
class WindowRecord:
    start: int
    end: int
    permutation: tuple
    mvdr_fallback_bins: int


@dataclass
class SeparationReport:
    windows: list = field(default_factory=list)

    def lines(self):
        yield "window_start\twindow_end\tpermutation\tmvdr_fallback_bins"
        for w in self.windows:
            perm = ",".join(str(p) for p in w.permutation)
            yield f"{w.start}\t{w.end}\t{perm}\t{w.mvdr_fallback_bins}"

    def write(self, path):
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")


def _blend_weights(length):
    # Triangular taper; per-frame normalization makes any set of covering
    # windows blend to weight one.
    i = np.arange(length, dtype=np.float64)
    return np.minimum(i + 1.0, length - i)


def stitch_windows(segments, slices, n_frames):
    """Align and blend per-window (2, F, Tw) segments into (2, F, n_frames).

    Each segment's output order is matched to its predecessor on the
    overlapping frames, then the aligned segments are blended with
    triangular weights normalized per frame (the effective blend weights
    sum to one, so identical overlapping content passes through exactly).

    Returns (stitched, permutations).
    """
    n_freq = segments[0].shape[1]
    out = np.zeros((2, n_freq, n_frames), dtype=complex)
    weight_sum = np.zeros(n_frames)
    perms = []
    prev_seg = None
    prev_end = None
    for seg, (start, end) in zip(segments, slices):
        perm = (0, 1)
        if prev_seg is not None and start < prev_end:
            overlap = prev_end - start
            perm = align_permutation(
                prev_seg[:, :, -overlap:], seg[:, :, :overlap])
            seg = seg[list(perm)]
        weights = _blend_weights(end - start)
        out[:, :, start:end] += seg * weights
        weight_sum[start:end] += weights
        perms.append(perm)
        prev_seg = seg
        prev_end = end
    out /= weight_sum
    return out, perms


def separate_continuous(wave: MultichannelWaveform, model, css_cfg: CssConfig,
                        stft_cfg, mask_fn=None, scramble_rng=None):
    """Separate a recording into two overlap-free waveforms.

    Per window: features -> mask model -> sparsify -> MVDR -> gain
    adjustment; the window outputs are order-aligned to the previous
    window on their overlap and cross-faded into the output buffers.
    Both outputs have exactly the input's length.

    mask_fn, when given, replaces the model: it is called as
    mask_fn(window_spectrogram, start_frame, end_frame) and must return
    masks (n_sources, F, T_window).  scramble_rng randomly swaps each
    window's two outputs before alignment (stitching must undo it; used
    for self-consistency checks).

    Returns (outputs (2, L) ndarray, SeparationReport).
    """
    spec = stft(wave, stft_cfg)
    window_frames, shift_frames = css_cfg.frame_counts(stft_cfg, wave.sample_rate)
    slices = window_slices(spec.n_frames, window_frames, shift_frames)

    segments = []
    window_flags = []
    for start, end in slices:
        win_spec = Spectrogram(
            spec.data[:, :, start:end], stft_cfg, wave.sample_rate)
        if mask_fn is not None:
            masks = mask_fn(win_spec, start, end)
        else:
            masks = estimate_masks(win_spec, model)
        seg, flags = separate_window(win_spec, masks)
        if scramble_rng is not None and scramble_rng.random() < 0.5:
            seg = seg[::-1]
            flags = flags[::-1]
        segments.append(seg)
        window_flags.append(int(flags.sum()))

    out, perms = stitch_windows(segments, slices, spec.n_frames)
    report = SeparationReport([
        WindowRecord(start, end, perm, flags)
        for (start, end), perm, flags in zip(slices, perms, window_flags)])

    out_waves = istft(
        Spectrogram(out, stft_cfg, wave.sample_rate, n_samples=wave.n_samples))
    return out_waves.channels, report
