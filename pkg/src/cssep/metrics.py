"""Scale-invariant SNR metrics for separation quality."""

import numpy as np

EPS = 1e-8


def si_snr(est, ref) -> float:
    """Scale-invariant SNR in dB.

    Projects the estimate onto the reference and reports
    10*log10(||target||^2 / (||est - target||^2 + EPS)).  Invariant to
    rescaling of the estimate.  Rejects an all-zero reference.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0.0:
        raise ValueError("reference signal is all-zero")
    target = (np.dot(est, ref) / ref_energy) * ref
    target_energy = np.dot(target, target)
    error_energy = np.dot(est - target, est - target)
    return 10.0 * np.log10(target_energy / (error_energy + EPS))


def best_perm_si_snr(ests, refs):
    """Best mean pairwise SI-SNR over the two output permutations.

    Returns (dB, permutation); ties resolve to the identity.
    """
    ests = [np.asarray(e) for e in ests]
    refs = [np.asarray(r) for r in refs]
    if len(ests) != 2 or len(refs) != 2:
        raise ValueError("expected exactly two estimates and two references")
    identity = 0.5 * (si_snr(ests[0], refs[0]) + si_snr(ests[1], refs[1]))
    swapped = 0.5 * (si_snr(ests[0], refs[1]) + si_snr(ests[1], refs[0]))
    if swapped > identity:
        return swapped, (1, 0)
    return identity, (0, 1)
