"""Array-geometry-agnostic mask estimation network.

The network maps per-channel feature sequences (M, T, 2F) to four
time-frequency masks (two speakers, stationary noise, transient noise).
Per-channel conformer blocks are interleaved with
transform-average-concatenate (TAC) fusion layers; after the third block
the M streams are merged by an arithmetic mean, so the remaining cost is
independent of the channel count.  Every cross-channel operation is a
mean, which makes the output invariant to channel permutations and the
same parameter set applicable to any M.
"""

import io
import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .features import extract_features
from .signals import StftConfig

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_freq: int
    d_model: int = 64
    n_heads: int = 4
    conv_kernel: int = 33
    layers_per_block: int = 5
    pre_blocks: int = 3
    post_blocks: int = 2
    ff_mult: int = 4
    n_sources: int = 4

    def __post_init__(self):
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even")
        if self.d_model % self.n_heads != 0:
            raise ValueError("n_heads must divide d_model")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")
        if min(self.n_freq, self.layers_per_block, self.pre_blocks,
               self.post_blocks, self.ff_mult, self.n_sources) < 1:
            raise ValueError("all size hyperparameters must be >= 1")


# Full-size setting: five conformer layers per block, four heads, 64 dims,
# 33-tap depthwise kernels.
PAPER_MODEL = ModelConfig(n_freq=257, d_model=64, layers_per_block=5)
# Small setting used throughout the tests and the desk-scale experiment.
DESK_MODEL = ModelConfig(n_freq=129, d_model=32, layers_per_block=2)


def sinusoidal_positions(n_frames, dim, dtype=torch.float32, device=None):
    """Fixed sinusoidal position table of shape (n_frames, dim)."""
    pos = np.arange(n_frames)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((n_frames, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return torch.as_tensor(table, dtype=dtype, device=device)


class SelfAttention(nn.Module):
    """Bidirectional multi-head self-attention (no positional terms)."""

    def __init__(self, d_model, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x):
        b, t, d = x.shape
        def split(y):
            return y.reshape(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.out(ctx.transpose(1, 2).reshape(b, t, d))


class FeedForward(nn.Module):
    def __init__(self, d_model, mult):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.w_in = nn.Linear(d_model, mult * d_model)
        self.w_out = nn.Linear(mult * d_model, d_model)

    def forward(self, x):
        return self.w_out(torch.nn.functional.silu(self.w_in(self.norm(x))))


class ConvModule(nn.Module):
    """Pointwise/GLU -> depthwise conv -> norm -> pointwise, pre-normed."""

    def __init__(self, d_model, kernel):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.pw_in = nn.Linear(d_model, 2 * d_model)
        self.depthwise = nn.Conv1d(
            d_model, d_model, kernel, padding=kernel // 2, groups=d_model)
        self.conv_norm = nn.LayerNorm(d_model)
        self.pw_out = nn.Linear(d_model, d_model)

    def forward(self, x):
        y = torch.nn.functional.glu(self.pw_in(self.norm(x)), dim=-1)
        y = self.depthwise(y.transpose(1, 2)).transpose(1, 2)
        return self.pw_out(torch.nn.functional.silu(self.conv_norm(y)))


class ConformerLayer(nn.Module):
    """Macaron feed-forwards around attention and convolution, pre-norm."""

    def __init__(self, d_model, n_heads, kernel, ff_mult):
        super().__init__()
        self.ff1 = FeedForward(d_model, ff_mult)
        self.attn_norm = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.conv = ConvModule(d_model, kernel)
        self.ff2 = FeedForward(d_model, ff_mult)
        self.final_norm = nn.LayerNorm(d_model)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(self.attn_norm(x))
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


class ConformerBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            ConformerLayer(cfg.d_model, cfg.n_heads, cfg.conv_kernel, cfg.ff_mult)
            for _ in range(cfg.layers_per_block))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class TacLayer(nn.Module):
    """Transform-average-concatenate channel fusion.

    Each channel keeps a transformed copy of itself and receives the
    channel-mean of a second transform; both transforms halve the
    dimension so the concatenation restores it.
    """

    def __init__(self, d_model):
        super().__init__()
        self.transform = nn.Linear(d_model, d_model // 2, bias=False)
        self.average = nn.Linear(d_model, d_model // 2, bias=False)

    def forward(self, x):
        """x: (B, M, T, D) -> (B, M, T, D)."""
        own = torch.relu(self.transform(x))
        shared = torch.relu(self.average(x)).mean(dim=1, keepdim=True)
        return torch.cat([own, shared.expand_as(own)], dim=-1)


class MaskNet(nn.Module):
    """Mask estimator for a variable number of input channels.

    Input:  features of shape (M, T, 2F) or batched (B, M, T, 2F).
    Output: masks in [0, 1] of shape (n_sources, F, T) or (B, n_sources, F, T).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(2 * cfg.n_freq, cfg.d_model)
        self.pre_blocks = nn.ModuleList(
            ConformerBlock(cfg) for _ in range(cfg.pre_blocks))
        self.tacs = nn.ModuleList(
            TacLayer(cfg.d_model) for _ in range(cfg.pre_blocks - 1))
        self.post_blocks = nn.ModuleList(
            ConformerBlock(cfg) for _ in range(cfg.post_blocks))
        self.head = nn.Linear(cfg.d_model, cfg.n_sources * cfg.n_freq)

    def forward(self, feats):
        squeeze = feats.dim() == 3
        if squeeze:
            feats = feats[None]
        if feats.shape[-1] != 2 * self.cfg.n_freq:
            raise ValueError(
                f"feature dim {feats.shape[-1]} does not match "
                f"2*n_freq = {2 * self.cfg.n_freq}")
        b, m, t, _ = feats.shape
        d = self.cfg.d_model

        x = self.input_proj(feats)
        x = x + sinusoidal_positions(t, d, dtype=x.dtype, device=x.device)
        x = x.reshape(b * m, t, d)
        for i, block in enumerate(self.pre_blocks):
            x = block(x)
            if i < len(self.tacs):
                x = self.tacs[i](x.reshape(b, m, t, d)).reshape(b * m, t, d)
        y = x.reshape(b, m, t, d).mean(dim=1)
        for block in self.post_blocks:
            y = block(y)
        logits = self.head(y).reshape(b, t, self.cfg.n_sources, self.cfg.n_freq)
        masks = torch.sigmoid(logits).permute(0, 2, 3, 1)
        return masks[0] if squeeze else masks


def init_model(cfg: ModelConfig, seed: int) -> MaskNet:
    """Build a MaskNet with seeded, reproducible initialization.

    Weight matrices and kernels draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    biases start at zero, normalization gains at one.  Parameters are filled
    in registration order from a single generator, so equal seeds give
    bit-identical models.
    """
    model = MaskNet(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() >= 2:
                fan_in = p.shape[1] * math.prod(p.shape[2:])
                bound = 1.0 / math.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=gen)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                p.fill_(1.0)
    return model


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of a MaskNet built from cfg."""
    d, w, f = cfg.d_model, cfg.conv_kernel, cfg.n_freq
    ff = 2 * d + (d * cfg.ff_mult * d + cfg.ff_mult * d) + (cfg.ff_mult * d * d + d)
    attn = 2 * d + 4 * (d * d + d)
    conv = 2 * d + (2 * d * d + 2 * d) + (d * w + d) + 2 * d + (d * d + d)
    per_layer = 2 * ff + attn + conv + 2 * d
    blocks = (cfg.pre_blocks + cfg.post_blocks) * cfg.layers_per_block * per_layer
    tacs = (cfg.pre_blocks - 1) * d * d
    input_proj = 2 * f * d + d
    head = d * cfg.n_sources * f + cfg.n_sources * f
    return blocks + tacs + input_proj + head


def estimate_masks(spec, model: MaskNet) -> np.ndarray:
    """Run the model on one spectrogram; returns masks (n_sources, F, T)."""
    if spec.n_freq != model.cfg.n_freq:
        raise ValueError(
            f"spectrogram has {spec.n_freq} bins but the model expects "
            f"{model.cfg.n_freq}")
    feats = extract_features(spec)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        masks = model(torch.as_tensor(feats.data, dtype=dtype))
    return np.clip(masks.double().numpy(), 0.0, 1.0)


# ---------------------------------------------------------------------------
# FLOP instrumentation


class FlopCounter:
    """Multiply-accumulate counts per stage, filled in by count_flops."""

    def __init__(self):
        self.stage_macs = {"pre_merge": 0, "post_merge": 0}

    def add(self, stage, n):
        self.stage_macs[stage] += int(n)

    @property
    def total(self):
        return sum(self.stage_macs.values())


_STAGE_OF_TOP = {
    "input_proj": "pre_merge",
    "pre_blocks": "pre_merge",
    "tacs": "pre_merge",
    "post_blocks": "post_merge",
    "head": "post_merge",
}


@contextmanager
def count_flops(model: MaskNet, counter: FlopCounter):
    """Attach forward hooks that record matmul/conv/attention MACs."""
    handles = []
    for name, mod in model.named_modules():
        stage = _STAGE_OF_TOP.get(name.split(".", 1)[0])
        if stage is None:
            continue
        if isinstance(mod, nn.Linear):
            def hook(m, inp, out, stage=stage):
                counter.add(stage, out.numel() * m.in_features)
        elif isinstance(mod, nn.Conv1d):
            def hook(m, inp, out, stage=stage):
                counter.add(
                    stage,
                    out.numel() * (m.in_channels // m.groups) * m.kernel_size[0])
        elif isinstance(mod, SelfAttention):
            def hook(m, inp, out, stage=stage):
                b, t, d = inp[0].shape
                counter.add(stage, 2 * b * t * t * d)
        else:
            continue
        handles.append(mod.register_forward_hook(hook))
    try:
        yield counter
    finally:
        for h in handles:
            h.remove()


def count_forward_flops(model: MaskNet, feats) -> dict:
    """Forward once and return {'pre_merge': macs, 'post_merge': macs}."""
    counter = FlopCounter()
    with torch.no_grad(), count_flops(model, counter):
        model(feats)
    return dict(counter.stage_macs)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: MaskNet, seed, stft_config: StftConfig,
                    sample_rate=16000, extra=None, extra_arrays=None):
    """Write a self-describing checkpoint (header + float64 arrays)."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "stft_config": asdict(stft_config),
        "sample_rate": int(sample_rate),
        "seed": int(seed),
        "extra": extra or {},
    }
    arrays = {
        "param." + k: v.detach().double().numpy()
        for k, v in model.state_dict().items()
    }
    for k, v in (extra_arrays or {}).items():
        arrays[k] = np.asarray(v, dtype=np.float64)
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(
        json.dumps(header).encode(), dtype=np.uint8), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, dtype=torch.float32):
    """Load a checkpoint; returns (model, header dict)."""
    with np.load(path) as npz:
        header = json.loads(bytes(npz["__header__"]).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {header.get('format_version')}")
        state = {
            k[len("param."):]: torch.as_tensor(npz[k]).to(dtype)
            for k in npz.files if k.startswith("param.")
        }
    model = MaskNet(ModelConfig(**header["model_config"]))
    model.to(dtype)
    model.load_state_dict(state)
    return model, header


def load_checkpoint_arrays(path, prefix) -> dict:
    """Read the auxiliary arrays stored under a key prefix."""
    with np.load(path) as npz:
        return {k[len(prefix):]: npz[k]
                for k in npz.files if k.startswith(prefix)}


def checkpoint_stft_config(header) -> StftConfig:
    return StftConfig(**header["stft_config"])
