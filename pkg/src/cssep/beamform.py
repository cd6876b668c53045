"""Mask-driven MVDR beamforming with sparsification and gain adjustment.

Shape conventions (S: sources, M: mics, F: bins, T: frames):
    masks:       (S, F, T) real in [0, 1]
    spectrogram: (M, F, T) complex
    covariances: (S, F, M, M) complex Hermitian
    weights:     (F, M) complex
"""

import numpy as np

EPS = 1e-8
DIAG_LOAD = 1e-6

SPEECH_SOURCES = (0, 1)


def sparsify_masks(masks) -> np.ndarray:
    """Keep only the most dominant source per TF bin.

    The arg-max source keeps its mask value, all others are zeroed; ties
    go to the lowest source index.
    """
    masks = np.asarray(masks)
    winner = np.argmax(masks, axis=0)
    keep = winner[None] == np.arange(masks.shape[0])[:, None, None]
    return np.where(keep, masks, 0.0)


def spatial_covariances(spec, masks) -> np.ndarray:
    """Mask-weighted spatial covariance per source and frequency.

    Phi_s(f) = sum_t M_sft x_ft x_ft^H / max(sum_t M_sft, EPS)
    with x_ft the M-vector of channel STFT coefficients.
    """
    x = spec.data  # (M, F, T)
    masks = np.asarray(masks)
    if masks.shape[1:] != x.shape[1:]:
        raise ValueError(
            f"mask shape {masks.shape} does not match spectrogram {x.shape}")
    num = np.einsum("sft,mft,nft->sfmn", masks, x, x.conj())
    den = np.maximum(masks.sum(axis=-1), EPS)
    return num / den[..., None, None]


def mvdr_weights(covs, target, noise_sources, ref_channel=0):
    """Reference-channel trace MVDR weights for one target source.

    w(f) = (Phi_n(f)^-1 Phi_s(f) / trace(Phi_n(f)^-1 Phi_s(f))) u_ref,
    with diagonal loading DIAG_LOAD * trace(Phi_n)/M added to Phi_n before
    the solve.  Frequencies where the solve fails or the trace vanishes
    fall back to a pass-through unit vector at ref_channel and are flagged.

    Returns:
        weights:  (F, M) complex
        fallback: (F,) bool, True where the pass-through was used
    """
    covs = np.asarray(covs)
    phi_s = covs[target]
    phi_n = covs[list(noise_sources)].sum(axis=0)
    n_freq, m, _ = phi_s.shape

    load = DIAG_LOAD * np.trace(phi_n, axis1=-2, axis2=-1).real / m
    phi_n = phi_n + load[:, None, None] * np.eye(m)

    weights = np.zeros((n_freq, m), dtype=complex)
    fallback = np.zeros(n_freq, dtype=bool)
    for f in range(n_freq):
        try:
            numerator = np.linalg.solve(phi_n[f], phi_s[f])
        except np.linalg.LinAlgError:
            numerator = None
        if numerator is None or not np.all(np.isfinite(numerator)):
            fallback[f] = True
        else:
            tr = np.trace(numerator)
            if abs(tr) <= EPS:
                fallback[f] = True
            else:
                weights[f] = numerator[:, ref_channel] / tr
        if fallback[f]:
            weights[f, ref_channel] = 1.0
    return weights, fallback


def apply_beamformer(weights, spec) -> np.ndarray:
    """y_ft = w(f)^H x_ft; returns a single-channel (F, T) spectrogram."""
    x = spec.data
    if weights.shape != (x.shape[1], x.shape[0]):
        raise ValueError(
            f"weights {weights.shape} do not match spectrogram {x.shape}")
    return np.einsum("fm,mft->ft", weights.conj(), x)


def gain_adjust(beamformed, masked_ref) -> np.ndarray:
    """Per-frequency level matching of the beamformed output.

    Scales each frequency by min(1, RMS_t(masked_ref) / RMS_t(|beamformed|)),
    so residual output where the source is absent is attenuated and nothing
    is ever amplified.  Phase is untouched.
    """
    if beamformed.shape != masked_ref.shape:
        raise ValueError(
            f"shape mismatch {beamformed.shape} vs {masked_ref.shape}")
    rms_ref = np.sqrt(np.mean(np.asarray(masked_ref) ** 2, axis=-1))
    rms_bf = np.sqrt(np.mean(np.abs(beamformed) ** 2, axis=-1))
    gain = np.minimum(1.0, rms_ref / np.maximum(rms_bf, EPS))
    return beamformed * gain[:, None]


def separate_window(spec, masks, ref_channel=0):
    """Separate one analysis window into two speech spectrograms.

    Sparsifies the masks, estimates per-source covariances, runs MVDR for
    the two speech sources (noise model: everything that is not the
    target), and applies gain adjustment against the masked reference
    channel.

    Returns:
        outputs:  (2, F, T) complex
        fallback: (2, F) bool MVDR fall-through flags
    """
    sparse = sparsify_masks(masks)
    covs = spatial_covariances(spec, sparse)
    n_sources = sparse.shape[0]
    ref_mag = np.abs(spec.data[ref_channel])

    outputs = []
    flags = []
    for k in SPEECH_SOURCES:
        noise = [s for s in range(n_sources) if s != k]
        weights, fb = mvdr_weights(covs, k, noise, ref_channel)
        y = apply_beamformer(weights, spec)
        outputs.append(gain_adjust(y, sparse[k] * ref_mag))
        flags.append(fb)
    return np.stack(outputs), np.stack(flags)
