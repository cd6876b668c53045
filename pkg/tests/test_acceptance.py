"""Acceptance suite.

Each criterion runs at its stated tolerance and prints one PASS/FAIL
line (visible with `pytest -s tests/test_acceptance.py`).  The desk-scale
training experiment behind criteria 8 and 9 simulates its datasets and
trains a checkpoint once per session; set CSSEP_SKIP_TRAINED=1 to skip
those two criteria during development.
"""

import os
import time

import numpy as np
import pytest
import torch

from cssep.beamform import apply_beamformer, mvdr_weights
from cssep.features import extract_features
from cssep.metrics import best_perm_si_snr, si_snr
from cssep.model import (DESK_MODEL, count_forward_flops, estimate_masks,
                         init_model, load_checkpoint, save_checkpoint)
from cssep.pipeline import CssConfig, separate_continuous
from cssep.signals import (DESK_STFT, MultichannelWaveform, Spectrogram,
                           istft, stft)
from cssep.simulate import (MixtureDataset, NoiseConfig, RoomSpec, SimConfig,
                            geometry_builtin, image_method_rir, make_dataset,
                            speech_like, subset_channels, synthesize_mixture)
from cssep.training import TrainConfig, train, upit_loss

torch.set_num_threads(2)

CSS = CssConfig()


def _report(number, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
    assert ok, f"criterion {number}: {detail}"


def _random_spec(rng, m, t, scale=1.0):
    data = scale * (rng.standard_normal((m, 129, t))
                    + 1j * rng.standard_normal((m, 129, t)))
    return Spectrogram(data, DESK_STFT)


# ---------------------------------------------------------------------------
# 1. Permutation invariance


def test_criterion_1_permutation_invariance():
    start = time.time()
    worst = {torch.float32: 0.0, torch.float64: 0.0}
    for dtype in (torch.float32, torch.float64):
        model = init_model(DESK_MODEL, seed=123).to(dtype)
        rng = np.random.default_rng(1)
        for _ in range(50):
            m = int(rng.integers(3, 8))
            spec = _random_spec(rng, m, 100)
            perm = rng.permutation(m)
            base = estimate_masks(spec, model)
            swapped = estimate_masks(
                Spectrogram(spec.data[perm], DESK_STFT), model)
            rel = np.max(np.abs(swapped - base)) / np.max(np.abs(base))
            worst[dtype] = max(worst[dtype], rel)
    elapsed = time.time() - start
    ok = (worst[torch.float32] < 1e-5 and worst[torch.float64] < 1e-10
          and elapsed < 60.0)
    _report(1, ok,
            f"channel-permutation deviation {worst[torch.float32]:.2e} "
            f"(32-bit, tol 1e-5), {worst[torch.float64]:.2e} "
            f"(64-bit, tol 1e-10); 50 inputs in {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# 2. Variable-geometry contract


def test_criterion_2_variable_geometry(tmp_path):
    path = tmp_path / "geometry_ckpt.npz"
    save_checkpoint(path, init_model(DESK_MODEL, seed=5), seed=5,
                    stft_config=DESK_STFT, sample_rate=16000)
    model, _ = load_checkpoint(path)

    room = RoomSpec((6.0, 5.0, 3.0), 0.7)
    rng = np.random.default_rng(2)
    flops = {}
    for name in ("ami8", "ami4", "ms7", "ms3"):
        geom = geometry_builtin(name)
        sources = [speech_like(2.0, 16000, rng) for _ in range(2)]
        sample = synthesize_mixture(sources, geom, room, NoiseConfig(),
                                    "full", seed=rng.integers(1 << 31),
                                    duration=2.0)
        outs, _ = separate_continuous(sample.mixture, model, CSS, DESK_STFT)
        assert outs.shape == (2, sample.mixture.n_samples)
        assert np.all(np.isfinite(outs))

        spec = stft(sample.mixture, DESK_STFT)
        feats = extract_features(
            Spectrogram(spec.data[:, :, :100], DESK_STFT))
        flops[name] = count_forward_flops(
            model, torch.as_tensor(feats.data, dtype=torch.float32))

    post = {flops[g]["post_merge"] for g in flops}
    pre = {g: flops[g]["pre_merge"] for g in flops}
    ok = (len(post) == 1
          and pre["ms3"] < pre["ami4"] < pre["ms7"] < pre["ami8"])
    _report(2, ok,
            f"one checkpoint served M=8,4,7,3; post-merge MACs identical "
            f"({post.pop():,}), pre-merge scales with M "
            f"({pre['ms3']:,} -> {pre['ami8']:,})")


# ---------------------------------------------------------------------------
# 3. uPIT oracle


def test_criterion_3_upit_exhaustive_oracle():
    rng = np.random.default_rng(3)
    failures = 0
    for _ in range(1000):
        f, t = int(rng.integers(2, 12)), int(rng.integers(2, 12))
        masks = rng.random((4, f, t))
        ymag = rng.random((f, t)) + 0.05
        refs = rng.random((4, f, t))
        loss, perm = upit_loss(masks, ymag, refs)

        est = masks * ymag[None]
        noise = (np.mean((est[2] - refs[2]) ** 2)
                 + np.mean((est[3] - refs[3]) ** 2))
        exhaustive = {}
        for p in [(0, 1), (1, 0)]:
            exhaustive[p] = (np.mean((est[p[0]] - refs[0]) ** 2)
                             + np.mean((est[p[1]] - refs[1]) ** 2) + noise)
        if loss != min(exhaustive.values()) or exhaustive[perm] != loss:
            failures += 1
    _report(3, failures == 0,
            f"(loss, permutation) equals exhaustive evaluation on "
            f"1000/1000 random cases exactly ({failures} mismatches)")


# ---------------------------------------------------------------------------
# 4. Gradient correctness


def test_criterion_4_gradients_match_finite_differences():
    from cssep.training import upit_loss_torch

    model = init_model(DESK_MODEL, seed=7).double()
    rng = np.random.default_rng(4)
    m, t, f = 3, 20, 129
    feats = torch.as_tensor(rng.standard_normal((1, m, t, 2 * f)))
    ymag = torch.as_tensor(rng.random((1, f, t)) + 0.05)
    refs = torch.as_tensor(rng.random((1, 4, f, t)))

    def loss_fn():
        return upit_loss_torch(model(feats), ymag, refs)

    model.zero_grad()
    loss_fn().backward()
    params = list(model.named_parameters())
    weights = np.array([p.numel() for _, p in params], dtype=float)
    weights /= weights.sum()

    h = 1e-5
    checked, worst = 0, 0.0
    while checked < 120:
        name, p = params[rng.choice(len(params), p=weights)]
        flat = int(rng.integers(p.numel()))
        analytic = float(p.grad.reshape(-1)[flat])
        with torch.no_grad():
            orig = float(p.reshape(-1)[flat])
            p.reshape(-1)[flat] = orig + h
            up = float(loss_fn())
            p.reshape(-1)[flat] = orig - h
            down = float(loss_fn())
            p.reshape(-1)[flat] = orig
        fd = (up - down) / (2 * h)
        if max(abs(analytic), abs(fd)) < 1e-10:
            continue  # relative error undefined on a dead coordinate
        worst = max(worst, abs(fd - analytic) / max(abs(analytic), abs(fd)))
        checked += 1
    _report(4, worst < 1e-4,
            f"central differences (h=1e-5, 64-bit) on {checked} random "
            f"parameter coordinates; worst relative error {worst:.2e} (< 1e-4)")


# ---------------------------------------------------------------------------
# 5. MVDR oracle


def test_criterion_5_mvdr_oracle():
    rng = np.random.default_rng(5)

    # independent linear-solve (inverse-based) evaluation
    worst_rel = 0.0
    for _ in range(40):
        m = int(rng.integers(2, 9))
        def psd():
            a = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
            return a @ a.conj().T + 0.1 * np.eye(m)
        covs = np.stack([np.stack([psd() for _ in range(5)]) for _ in range(4)])
        ref = int(rng.integers(m))
        weights, fb = mvdr_weights(covs, 0, [1, 2, 3], ref)
        assert not fb.any()
        for f in range(5):
            phi_n = covs[1, f] + covs[2, f] + covs[3, f]
            phi_n = phi_n + 1e-6 * np.trace(phi_n).real / m * np.eye(m)
            numerator = np.linalg.inv(phi_n) @ covs[0, f]
            expected = numerator[:, ref] / np.trace(numerator)
            rel = np.max(np.abs(weights[f] - expected)) / np.max(np.abs(expected))
            worst_rel = max(worst_rel, rel)

    # rank-1 target in white noise: 10*log10(M) dB noise-power improvement
    gains = {}
    for m in (3, 4, 7, 8):
        n_freq, frames = 129, 400
        d = np.exp(1j * rng.uniform(-np.pi, np.pi, (n_freq, m)))
        phi_s = np.einsum("fi,fj->fij", d, d.conj())
        covs = np.stack([phi_s, np.broadcast_to(np.eye(m), (n_freq, m, m))])
        weights, _ = mvdr_weights(covs, 0, [1])
        noise = (rng.standard_normal((m, n_freq, frames))
                 + 1j * rng.standard_normal((m, n_freq, frames))) / np.sqrt(2)
        out = apply_beamformer(weights, Spectrogram(noise, DESK_STFT))
        gains[m] = 10 * np.log10(np.mean(np.abs(noise[0]) ** 2)
                                 / np.mean(np.abs(out) ** 2))
    gain_errs = {m: abs(gains[m] - 10 * np.log10(m)) for m in gains}
    ok = worst_rel < 1e-8 and max(gain_errs.values()) < 0.5
    _report(5, ok,
            f"weights match inverse-based oracle to {worst_rel:.2e} "
            f"(< 1e-8); white-noise gains "
            + ", ".join(f"M={m}: {gains[m]:.2f} dB (target "
                        f"{10*np.log10(m):.2f})" for m in sorted(gains)))


# ---------------------------------------------------------------------------
# 6. STFT round trip and anechoic RIR


def test_criterion_6_stft_roundtrip_and_rir():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(10):
        channels = int(rng.integers(1, 5))
        length = int(rng.integers(256, 50000))
        x = rng.standard_normal((channels, length))
        back = istft(stft(MultichannelWaveform(x, 16000), DESK_STFT))
        worst = max(worst, float(np.max(np.abs(back.channels - x))))

    fs = 16000
    delay = 137
    d = 343.0 / fs * delay
    room = RoomSpec((10.0, 5.0, 3.0), 0.5)
    src = np.array([1.0, 1.5, 1.2])
    rir = image_method_rir(room, src, src + [d, 0, 0], max_order=0, fs=fs)
    amp_err = abs(rir[delay] - 1.0 / (4 * np.pi * d))
    delay_ok = int(np.argmax(np.abs(rir))) == delay
    ok = worst < 1e-6 and delay_ok and amp_err < 1e-9
    _report(6, ok,
            f"round-trip max abs error {worst:.2e} (< 1e-6); anechoic RIR "
            f"delay exact at sample {delay}, amplitude error {amp_err:.2e} "
            f"(< 1e-9)")


# ---------------------------------------------------------------------------
# 7. Stitching self-consistency


def _oracle_mask_fn(refs, sample_rate):
    mags = np.abs(stft(MultichannelWaveform(refs, sample_rate), DESK_STFT).data)

    def mask_fn(win_spec, start, end):
        w = mags[:, :, start:end]
        return np.clip(w / (w.sum(axis=0, keepdims=True) + 1e-8), 0.0, 1.0)

    return mask_fn


def test_criterion_7_stitching_self_consistency():
    rng = np.random.default_rng(7)
    sources = [speech_like(4.0, 16000, rng) for _ in range(2)]
    room = RoomSpec((6.0, 5.0, 3.0), 0.65)
    sample = synthesize_mixture(sources, geometry_builtin("ami4"), room,
                                NoiseConfig(), "full", seed=70)
    mask_fn = _oracle_mask_fn(sample.refs, 16000)
    base, _ = separate_continuous(sample.mixture, None, CSS, DESK_STFT,
                                  mask_fn=mask_fn)
    scrambled, _ = separate_continuous(sample.mixture, None, CSS, DESK_STFT,
                                       mask_fn=mask_fn,
                                       scramble_rng=np.random.default_rng(99))
    cap, _ = best_perm_si_snr(base, base)
    got, _ = best_perm_si_snr(scrambled, base)
    stitch_gap = abs(cap - got)

    def flat_masks(win_spec, start, end):
        masks = np.full((4, win_spec.n_freq, win_spec.n_frames), 0.1)
        masks[0] = 0.7
        return masks

    lengths_ok = True
    for _ in range(20):
        length = int(rng.integers(400, 90000))
        wave = MultichannelWaveform(0.1 * rng.standard_normal((2, length)), 16000)
        outs, _ = separate_continuous(wave, None, CSS, DESK_STFT,
                                      mask_fn=flat_masks)
        lengths_ok = lengths_ok and outs.shape == (2, length)

    ok = stitch_gap < 1e-6 and lengths_ok
    _report(7, ok,
            f"scrambled-window outputs match within {stitch_gap:.2e} dB "
            f"best-perm SI-SNR (< 1e-6); output length exact for 20 random "
            f"durations: {lengths_ok}")


# ---------------------------------------------------------------------------
# 8 & 9. Desk-scale separation efficacy and single-speaker routing


def _improvement(item, model, m=None):
    mix = item["mixture"]
    chans = subset_channels(mix.shape[0], m) if m else list(range(mix.shape[0]))
    mixc = mix[chans]
    scale = 1.0 / max(np.sqrt(np.mean(mixc[0] ** 2)), 1e-12)
    wave = MultichannelWaveform(mixc * scale, item["sample_rate"])
    outs, _ = separate_continuous(wave, model, CSS, DESK_STFT)
    refs = item["refs"][:2] * scale
    active = [r for r in refs if np.any(r != 0)]
    mix0 = wave.channels[0]
    if len(active) == 2:
        out_score, _ = best_perm_si_snr(outs, active)
        base_score, _ = best_perm_si_snr([mix0, mix0], active)
    else:
        out_score = max(si_snr(o, active[0]) for o in outs)
        base_score = si_snr(mix0, active[0])
    return out_score - base_score, outs


@pytest.fixture(scope="session")
def desk_experiment(tmp_path_factory):
    if os.environ.get("CSSEP_SKIP_TRAINED"):
        pytest.skip("CSSEP_SKIP_TRAINED set: desk-scale experiment disabled")
    root = tmp_path_factory.mktemp("desk_experiment")
    make_dataset(SimConfig(n_samples=2000, seed=7001), root / "train")
    make_dataset(SimConfig(n_samples=50, seed=7002), root / "eval")
    make_dataset(SimConfig(n_samples=20, seed=7003,
                           single_speaker_fraction=1.0), root / "single")

    cfg = TrainConfig(epochs=5, batch_size=8, learning_rate=1e-3,
                      warmup_steps=1000, grad_clip=5.0, m_range=(3, 7),
                      crop_frames=200, seed=7, checkpoint_every=500,
                      log_every=50)
    start = time.time()
    model, _ = train(MixtureDataset(root / "train"), cfg, DESK_MODEL,
                     DESK_STFT, out_dir=root / "run")
    elapsed = time.time() - start
    return {"root": root, "model": model, "train_seconds": elapsed}


def test_criterion_8_desk_scale_efficacy(desk_experiment):
    model = desk_experiment["model"]
    eval_ds = MixtureDataset(desk_experiment["root"] / "eval")
    means = {}
    for m in (None, 3, 7):
        imps = [_improvement(eval_ds.load(i), model, m)[0]
                for i in range(len(eval_ds))]
        means[m] = float(np.mean(imps))
    minutes = desk_experiment["train_seconds"] / 60
    ok = (minutes <= 30.0 and means[None] >= 5.0
          and means[3] >= 5.0 and means[7] >= 5.0)
    _report(8, ok,
            f"trained in {minutes:.1f} min (<= 30); mean best-perm SI-SNR "
            f"improvement over the unprocessed reference channel: native "
            f"{means[None]:.2f} dB, M=3 {means[3]:.2f} dB, M=7 "
            f"{means[7]:.2f} dB (all >= 5)")


def test_criterion_9_single_speaker_routing(desk_experiment):
    model = desk_experiment["model"]
    single_ds = MixtureDataset(desk_experiment["root"] / "single")
    ratios = []
    for i in range(len(single_ds)):
        _, outs = _improvement(single_ds.load(i), model)
        energies = np.sort(np.sum(outs ** 2, axis=1))
        ratios.append(10 * np.log10((energies[1] + 1e-30)
                                    / (energies[0] + 1e-30)))
    worst = min(ratios)
    _report(9, worst >= 20.0,
            f"on 20 single-speaker mixtures the quieter output is "
            f">= {worst:.1f} dB below the louder one (required >= 20)")
