"""Permutation-invariant mask training on simulated mixtures.

The loss is a magnitude-domain masked-approximation MSE at the reference
channel: the two speech terms take the better of the two speaker
permutations, the two noise terms are permutation-free.  Optimization is
adaptive-moment gradient descent with linear warmup and gradient-norm
clipping.  All per-step randomness (shuffling, channel count, channel
subset, crop position) is derived statelessly from the root seed and the
step index, so a resumed run is bit-identical to an uninterrupted one.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import NumericError
from .features import extract_features
from .model import (DESK_MODEL, MaskNet, init_model, load_checkpoint,
                    load_checkpoint_arrays, save_checkpoint)
from .signals import DESK_STFT, MultichannelWaveform, Spectrogram, stft
from .simulate import subset_channels


def upit_loss(masks, mixture_ref_mag, refs):
    """Permutation-invariant masked-magnitude loss for one sample.

    Args:
        masks: (4, F, T) mask values
        mixture_ref_mag: (F, T) magnitude of the mixture at the reference
            channel
        refs: (4, F, T) reference magnitudes (speech0, speech1,
            stationary, transient)

    Returns:
        (loss, best_perm) with best_perm a permutation of the two speech
        outputs; exact ties resolve to the identity.
    """
    masks = np.asarray(masks)
    mixture_ref_mag = np.asarray(mixture_ref_mag)
    refs = np.asarray(refs)
    if masks.shape != refs.shape or masks.shape[1:] != mixture_ref_mag.shape:
        raise ValueError(
            f"shape mismatch: masks {masks.shape}, refs {refs.shape}, "
            f"mixture {mixture_ref_mag.shape}")
    est = masks * mixture_ref_mag[None]

    def mse(a, b):
        return np.mean((a - b) ** 2)

    noise = mse(est[2], refs[2]) + mse(est[3], refs[3])
    loss_id = mse(est[0], refs[0]) + mse(est[1], refs[1]) + noise
    loss_sw = mse(est[0], refs[1]) + mse(est[1], refs[0]) + noise
    if loss_sw < loss_id:
        return loss_sw, (1, 0)
    return loss_id, (0, 1)


def upit_loss_torch(masks, mixture_ref_mag, refs):
    """Batched differentiable twin of upit_loss; returns the mean loss."""
    est = masks * mixture_ref_mag[:, None]

    def mse(a, b):
        return ((a - b) ** 2).mean(dim=(-2, -1))

    loss_id = mse(est[:, 0], refs[:, 0]) + mse(est[:, 1], refs[:, 1])
    loss_sw = mse(est[:, 0], refs[:, 1]) + mse(est[:, 1], refs[:, 0])
    noise = mse(est[:, 2], refs[:, 2]) + mse(est[:, 3], refs[:, 3])
    return (torch.minimum(loss_id, loss_sw) + noise).mean()


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(model: MaskNet) -> AdamState:
    state = AdamState()
    for name, p in model.named_parameters():
        state.m[name] = torch.zeros_like(p)
        state.v[name] = torch.zeros_like(p)
    return state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 1e-3
    warmup_steps: int = 1000
    grad_clip: float = 5.0
    m_range: tuple = (3, 7)
    crop_frames: int = 200
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


def learning_rate_at(cfg: TrainConfig, step) -> float:
    warm = min(1.0, (step + 1) / max(1, cfg.warmup_steps))
    return cfg.learning_rate * warm


def grad_step(model: MaskNet, batch, opt: AdamState, cfg: TrainConfig) -> float:
    """One optimization step on a prepared batch; returns the batch loss.

    batch: (features (B,M,T,2F), mixture magnitudes (B,F,T),
    reference magnitudes (B,4,F,T)) torch tensors.
    """
    feats, ymag, refs = batch
    model.zero_grad(set_to_none=True)
    loss = upit_loss_torch(model(feats), ymag, refs)
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite loss {loss.item()} at optimizer step {opt.step}")
    loss.backward()

    with torch.no_grad():
        params = dict(model.named_parameters())
        grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p))
                 for n, p in params.items()}
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > cfg.grad_clip > 0:
            for g in grads.values():
                g.mul_(cfg.grad_clip / total)
        opt.step += 1
        lr = learning_rate_at(cfg, opt.step - 1)
        bc1 = 1.0 - cfg.beta1 ** opt.step
        bc2 = 1.0 - cfg.beta2 ** opt.step
        for name, p in params.items():
            g = grads[name]
            opt.m[name].mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            opt.v[name].mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            m_hat = opt.m[name] / bc1
            v_hat = opt.v[name] / bc2
            p.add_(-lr * m_hat / (v_hat.sqrt() + cfg.adam_eps))
    return float(loss.detach())


# ---------------------------------------------------------------------------
# Batch assembly


def _rng_for(seed, *key):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def _pick_crop(refspec, crop, rng, candidates=4):
    """Crop offset with the most useful training signal.

    Draws a few candidate offsets and keeps the one with the largest
    speech energy (the smaller speaker's energy on two-speaker samples),
    so crops rarely land on pauses.
    """
    total = refspec.n_frames
    offsets = rng.integers(0, total - crop + 1, size=candidates)
    power = np.abs(refspec.data[:2]) ** 2
    two_speaker = power[1].sum() > 0
    best, best_score = int(offsets[0]), -1.0
    for t0 in offsets:
        window = power[:, :, t0:t0 + crop].sum(axis=(1, 2))
        score = min(window[0], window[1]) if two_speaker else window[0]
        if score > best_score:
            best, best_score = int(t0), float(score)
    return best


def build_batch(dataset, indices, n_channels, stft_cfg, cfg: TrainConfig,
                rng, dtype=torch.float32):
    """Load, channel-subset, scale, crop and featurize a mini-batch."""
    feats, ymags, refmags = [], [], []
    for idx in indices:
        item = dataset.load(int(idx))
        mix = item["mixture"]
        refs = item["refs"]
        rate = item["sample_rate"]
        chans = subset_channels(mix.shape[0], n_channels, rng)
        mix = mix[chans]
        scale = 1.0 / max(float(np.sqrt(np.mean(mix[0] ** 2))), 1e-6)
        spec = stft(MultichannelWaveform(mix * scale, rate), stft_cfg)
        refspec = stft(MultichannelWaveform(refs * scale, rate), stft_cfg)
        crop = min(cfg.crop_frames, spec.n_frames)
        t0 = _pick_crop(refspec, crop, rng)
        window = Spectrogram(
            spec.data[:, :, t0:t0 + crop], stft_cfg, rate)
        feats.append(extract_features(window).data)
        ymags.append(np.abs(window.data[0]))
        refmags.append(np.abs(refspec.data[:, :, t0:t0 + crop]))
    return (torch.as_tensor(np.stack(feats), dtype=dtype),
            torch.as_tensor(np.stack(ymags), dtype=dtype),
            torch.as_tensor(np.stack(refmags), dtype=dtype))


# ---------------------------------------------------------------------------
# Checkpoints with optimizer state


def save_train_checkpoint(path, model, opt: AdamState, cfg: TrainConfig,
                          stft_cfg, sample_rate):
    arrays = {}
    for name in opt.m:
        arrays["adam_m." + name] = opt.m[name].detach().double().numpy()
        arrays["adam_v." + name] = opt.v[name].detach().double().numpy()
    save_checkpoint(
        path, model, cfg.seed, stft_cfg, sample_rate,
        extra={"train_step": opt.step}, extra_arrays=arrays)


def load_train_checkpoint(path, dtype=torch.float32):
    model, header = load_checkpoint(path, dtype)
    opt = adam_init(model)
    opt.step = int(header["extra"]["train_step"])
    m = load_checkpoint_arrays(path, "adam_m.")
    v = load_checkpoint_arrays(path, "adam_v.")
    for name in opt.m:
        opt.m[name] = torch.as_tensor(m[name]).to(dtype)
        opt.v[name] = torch.as_tensor(v[name]).to(dtype)
    return model, opt, header


# ---------------------------------------------------------------------------
# Training loop


def train(dataset, cfg: TrainConfig, model_cfg=DESK_MODEL, stft_cfg=DESK_STFT,
          out_dir=None, resume=None, dtype=torch.float32):
    """Train a mask network on a simulated dataset.

    dataset must provide __len__ and load(idx) -> {"mixture": (M, L),
    "refs": (4, L), "sample_rate": int}.  Per mini-batch the channel
    count is drawn uniformly from cfg.m_range and a random channel subset
    (always containing the reference channel) is used.  Returns
    (model, log lines); checkpoints and the log are written under out_dir
    when given.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    sample_rate = dataset.load(0)["sample_rate"]

    if resume is not None:
        model, opt, _ = load_train_checkpoint(resume, dtype)
    else:
        model = init_model(model_cfg, cfg.seed).to(dtype)
        opt = adam_init(model)

    batch_size = min(cfg.batch_size, n)
    steps_per_epoch = n // batch_size
    total_steps = cfg.epochs * steps_per_epoch
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = []

    def emit(line):
        log.append(line)
        if out_dir is not None:
            with open(out_dir / "train.log", "a") as fh:
                fh.write(line + "\n")

    for step in range(opt.step, total_steps):
        epoch, pos = divmod(step, steps_per_epoch)
        order = _rng_for(cfg.seed, 1, epoch).permutation(n)
        indices = order[pos * batch_size:(pos + 1) * batch_size]
        srng = _rng_for(cfg.seed, 2, step)
        m_lo, m_hi = cfg.m_range
        n_channels = int(srng.integers(m_lo, m_hi + 1))
        batch = build_batch(dataset, indices, n_channels, stft_cfg, cfg,
                            srng, dtype)
        loss = grad_step(model, batch, opt, cfg)
        if opt.step % cfg.log_every == 0 or opt.step == total_steps:
            emit(f"step={opt.step} epoch={epoch} loss={loss:.6f} "
                 f"lr={learning_rate_at(cfg, opt.step - 1):.6g} M={n_channels}")
        if out_dir is not None and cfg.checkpoint_every > 0 \
                and opt.step % cfg.checkpoint_every == 0:
            save_train_checkpoint(
                out_dir / f"ckpt_step{opt.step:06d}.npz", model, opt, cfg,
                stft_cfg, sample_rate)

    if out_dir is not None:
        save_train_checkpoint(out_dir / "ckpt_final.npz", model, opt, cfg,
                              stft_cfg, sample_rate)
    return model, log
