"""Multichannel RIFF WAV reading/writing (PCM 16-bit and IEEE float32)."""

import numpy as np
from scipy.io import wavfile

from .errors import DataError
from .signals import MultichannelWaveform


def read_wav(path) -> MultichannelWaveform:
    """Read a WAV file into a (M, L) float64 waveform.

    PCM 16-bit samples are scaled to [-1, 1); float32 data is taken as is.
    """
    try:
        rate, data = wavfile.read(path)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(f"cannot read WAV file {path}: {exc}") from exc
    if data.ndim == 1:
        data = data[:, None]
    data = data.T  # (L, M) -> (M, L)
    if data.dtype == np.int16:
        out = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        out = data.astype(np.float64)
    elif data.dtype == np.int32:
        out = data.astype(np.float64) / 2147483648.0
    else:
        raise DataError(f"unsupported WAV sample format {data.dtype} in {path}")
    return MultichannelWaveform(out, int(rate))


def write_wav(path, wave: MultichannelWaveform, sample_format="float32"):
    """Write a waveform as little-endian RIFF WAV.

    sample_format: "float32" (IEEE float) or "int16" (PCM, clipped).
    """
    data = wave.channels.T  # (M, L) -> (L, M)
    if sample_format == "float32":
        wavfile.write(path, wave.sample_rate, data.astype(np.float32))
    elif sample_format == "int16":
        scaled = np.clip(np.round(data * 32768.0), -32768, 32767)
        wavfile.write(path, wave.sample_rate, scaled.astype(np.int16))
    else:
        raise ValueError(f"unsupported sample_format {sample_format!r}")
