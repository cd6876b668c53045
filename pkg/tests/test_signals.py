import numpy as np
import pytest

from cssep.signals import (DESK_STFT, MultichannelWaveform, Spectrogram,
                           StftConfig, istft, make_window, stft)
from cssep.wavio import read_wav, write_wav


def _wave(data, rate=16000):
    return MultichannelWaveform(np.asarray(data, dtype=np.float64), rate)


def _dft_oracle(frame, fft_size):
    """One-sided DFT by explicit basis multiplication."""
    padded = np.zeros(fft_size)
    padded[:len(frame)] = frame
    k = np.arange(fft_size // 2 + 1)[:, None]
    n = np.arange(fft_size)[None, :]
    return np.exp(-2j * np.pi * k * n / fft_size) @ padded


def test_zero_input_gives_zero_spectrogram():
    spec = stft(_wave(np.zeros((2, 1000))), DESK_STFT)
    assert spec.data.shape == (2, 129, 8)
    assert np.all(spec.data == 0)


def test_bin_centered_sinusoid_concentrates_energy():
    cfg = StftConfig(256, 128, 256, window="rect")
    fs = 16000
    k = 8
    f0 = k * fs / cfg.fft_size
    t = np.arange(2048) / fs
    x = np.cos(2 * np.pi * f0 * t)
    spec = stft(_wave([x], fs), cfg)

    # frames away from the zero-padded tail
    for frame_idx in [0, 3, 7]:
        frame = x[frame_idx * 128:frame_idx * 128 + 256]
        oracle = _dft_oracle(frame, 256)
        np.testing.assert_allclose(spec.data[0, :, frame_idx], oracle,
                                   atol=1e-9)
        # one-sided energy accounting: interior bins count twice
        weights = np.full(129, 2.0)
        weights[0] = weights[-1] = 1.0
        energy = weights * np.abs(spec.data[0, :, frame_idx]) ** 2
        assert energy[k] / energy.sum() > 0.99


@pytest.mark.parametrize("length", [256, 300, 1000, 4096, 64000 - 37])
def test_roundtrip_reconstruction(length):
    rng = np.random.default_rng(length)
    x = rng.standard_normal((3, length))
    back = istft(stft(_wave(x), DESK_STFT))
    assert back.channels.shape == x.shape
    assert np.max(np.abs(back.channels - x)) < 1e-6


def test_roundtrip_rect_window():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1000))
    cfg = StftConfig(256, 128, 256, window="rect")
    back = istft(stft(_wave(x), cfg))
    assert np.max(np.abs(back.channels - x)) < 1e-6


def test_zero_spectrogram_inverts_to_zero():
    spec = stft(_wave(np.zeros((1, 700))), DESK_STFT)
    out = istft(spec)
    assert out.n_samples == 700
    assert np.all(out.channels == 0)


def test_istft_is_linear_in_the_spectrogram():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 999))
    spec = stft(_wave(x), DESK_STFT)
    doubled = Spectrogram(2.0 * spec.data, spec.config, spec.sample_rate,
                          n_samples=spec.n_samples)
    np.testing.assert_allclose(istft(doubled).channels,
                               2.0 * istft(spec).channels, atol=1e-12)


def test_stft_linearity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 777))
    y = rng.standard_normal((2, 777))
    a, b = 0.7, -1.3
    combined = stft(_wave(a * x + b * y), DESK_STFT).data
    separate = a * stft(_wave(x), DESK_STFT).data + b * stft(_wave(y), DESK_STFT).data
    scale = np.max(np.abs(separate))
    assert np.max(np.abs(combined - separate)) / scale < 1e-8


def test_channel_independence():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 512))
    multi = stft(_wave(x), DESK_STFT)
    for m in range(4):
        single = stft(_wave(x[m:m + 1]), DESK_STFT)
        np.testing.assert_array_equal(multi.data[m], single.data[0])


def test_cola_window_product_constant_on_interior():
    cfg = DESK_STFT
    w = cfg.window_array()
    n_frames = 16
    total = (n_frames - 1) * cfg.hop_length + cfg.frame_length
    acc = np.zeros(total)
    for t in range(n_frames):
        acc[t * cfg.hop_length:t * cfg.hop_length + cfg.frame_length] += w * w
    interior = acc[cfg.frame_length:-cfg.frame_length]
    assert np.max(np.abs(interior - interior[0])) < 1e-10
    assert abs(interior[0] - 1.0) < 1e-10


def test_short_signal_rejected():
    with pytest.raises(ValueError):
        stft(_wave(np.zeros((1, 100))), DESK_STFT)


def test_istft_config_mismatch_rejected():
    spec = stft(_wave(np.zeros((1, 600))), DESK_STFT)
    other = StftConfig(512, 256, 512)
    with pytest.raises(ValueError):
        istft(spec, other)


def test_stft_config_validation():
    with pytest.raises(ValueError):
        StftConfig(256, 100, 256)  # hop does not divide frame
    with pytest.raises(ValueError):
        StftConfig(256, 128, 128)  # fft too small
    with pytest.raises(ValueError):
        make_window("triangle", 16)


def test_wav_roundtrip_float32(tmp_path):
    rng = np.random.default_rng(4)
    x = (0.5 * rng.standard_normal((3, 1234))).astype(np.float32)
    wave = _wave(x, 8000)
    path = tmp_path / "multi.wav"
    write_wav(path, wave)
    back = read_wav(path)
    assert back.sample_rate == 8000
    np.testing.assert_array_equal(back.channels, x.astype(np.float64))


def test_wav_roundtrip_int16(tmp_path):
    rng = np.random.default_rng(5)
    x = 0.3 * rng.standard_normal((2, 500))
    path = tmp_path / "pcm.wav"
    write_wav(path, _wave(x), sample_format="int16")
    back = read_wav(path)
    assert np.max(np.abs(back.channels - x)) < 1.0 / 32768 + 1e-9
