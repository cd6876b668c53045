"""Multichannel mixture synthesis: rooms, arrays, sources, noise.

Rooms are shoeboxes with a uniform wall absorption coefficient; impulse
responses come from the image method with windowed-sinc fractional
delays.  Source material is either user-supplied WAV clips or built-in
synthetic speech-like signals (amplitude-modulated harmonic complexes
with randomized pitch contours).
"""

import json
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from .errors import DataError
from .signals import MultichannelWaveform
from .wavio import read_wav, write_wav

SPEED_OF_SOUND = 343.0
SINC_TAPS = 81


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions in meters, relative to the array center."""

    name: str
    positions: tuple  # of (x, y, z) tuples

    def __post_init__(self):
        if len(self.positions) < 1:
            raise ValueError("geometry needs at least one microphone")
        if len(set(self.positions)) != len(self.positions):
            raise ValueError("microphone positions must be pairwise distinct")

    @property
    def n_mics(self):
        return len(self.positions)

    def position_array(self):
        return np.asarray(self.positions, dtype=np.float64)


def _circle(n, radius, phase=0.0):
    angles = phase + 2 * np.pi * np.arange(n) / n
    return [(radius * math.cos(a), radius * math.sin(a), 0.0) for a in angles]


def geometry_builtin(name) -> ArrayGeometry:
    """Built-in array layouts.

    ami8: 8 mics on a 10 cm-radius circle; ami4: its odd-indexed subset.
    ms7: 6 mics on a 4.25 cm circle plus one at the center; ms3: the
    center plus two adjacent circle mics (a small equilateral triangle).
    """
    if name == "ami8":
        return ArrayGeometry("ami8", tuple(_circle(8, 0.10)))
    if name == "ami4":
        ring = _circle(8, 0.10)
        return ArrayGeometry("ami4", tuple(ring[i] for i in (1, 3, 5, 7)))
    if name == "ms7":
        return ArrayGeometry("ms7", tuple(_circle(6, 0.0425)) + ((0.0, 0.0, 0.0),))
    if name == "ms3":
        ring = _circle(6, 0.0425)
        return ArrayGeometry("ms3", ((0.0, 0.0, 0.0), ring[0], ring[1]))
    raise ValueError(f"unknown geometry {name!r}")


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room with a uniform absorption coefficient."""

    dimensions: tuple  # (Lx, Ly, Lz) meters
    absorption: float
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        if len(self.dimensions) != 3 or min(self.dimensions) <= 0:
            raise ValueError("dimensions must be three positive lengths")
        if not 0.0 <= self.absorption <= 1.0:
            raise ValueError("absorption must lie in [0, 1]")

    def contains(self, pos):
        return all(0.0 < p < d for p, d in zip(pos, self.dimensions))


def _axis_images(coord, length, max_order):
    """Per-axis image coordinates and reflection counts up to max_order."""
    items = []
    for k in range(-(max_order // 2 + 1), max_order // 2 + 2):
        count = 2 * abs(k)
        if count <= max_order:
            items.append((coord + 2 * k * length, count))
        count = abs(2 * k - 1)
        if count <= max_order:
            items.append((-coord + 2 * k * length, count))
    return items


def image_method_rir(room: RoomSpec, src, mic, max_order, fs) -> np.ndarray:
    """Shoebox impulse response by the image method.

    Each image source of total reflection count q contributes amplitude
    r^q / (4*pi*d) at delay d/c*fs, with r = sqrt(1 - absorption);
    fractional delays are realized with an 81-tap windowed sinc.
    """
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    if not room.contains(src):
        raise DataError(f"source position {src} outside room {room.dimensions}")
    if not room.contains(mic):
        raise DataError(f"mic position {mic} outside room {room.dimensions}")
    if max_order < 0:
        raise ValueError("max_order must be >= 0")

    per_axis = [_axis_images(src[i], room.dimensions[i], max_order)
                for i in range(3)]
    images = []
    counts = []
    for (x, cx), (y, cy), (z, cz) in product(*per_axis):
        total = cx + cy + cz
        if total <= max_order:
            images.append((x, y, z))
            counts.append(total)
    images = np.asarray(images)
    counts = np.asarray(counts)

    dists = np.linalg.norm(images - mic, axis=1)
    reflection = math.sqrt(1.0 - room.absorption)
    amps = reflection ** counts / (4.0 * np.pi * dists)
    delays = dists / room.speed_of_sound * fs

    half = SINC_TAPS // 2
    length = int(np.ceil(delays.max())) + half + 1
    rir = np.zeros(length)
    centers = np.round(delays).astype(int)
    offsets = np.arange(SINC_TAPS) - half
    positions = centers[:, None] + offsets[None, :]
    x = positions - delays[:, None]
    taper = 0.5 * (1.0 + np.cos(np.pi * x / (half + 0.5)))
    taps = amps[:, None] * taper * np.sinc(x)
    valid = positions >= 0
    np.add.at(rir, positions[valid], taps[valid])
    return rir


# ---------------------------------------------------------------------------
# Source material


def speech_like(duration, sample_rate, rng, f0_range=(85.0, 255.0)) -> np.ndarray:
    """Synthetic speech-like clip: modulated harmonic complex plus breath.

    A slowly wandering pitch contour drives a harmonic stack shaped by
    three random formant resonances; a syllable-rate on/off envelope with
    raised-cosine ramps provides pauses.  Unit RMS over the active part.
    """
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    f0_base = rng.uniform(*f0_range)
    n_knots = max(3, int(duration * 3))
    knot_times = np.linspace(0.0, duration, n_knots)
    knots = rng.uniform(-0.25, 0.25, n_knots)
    f0 = f0_base * 2.0 ** np.interp(t, knot_times, knots)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate

    centers = [rng.uniform(300, 800), rng.uniform(900, 2200),
               rng.uniform(2300, 3500)]
    bandwidths = [rng.uniform(80, 250) for _ in centers]

    def envelope_gain(freq):
        g = 0.05
        for c, b in zip(centers, bandwidths):
            g = g + np.exp(-0.5 * ((freq - c) / b) ** 2)
        return g

    voiced = np.zeros(n)
    n_harm = max(1, int(3800.0 / f0.max()))
    for k in range(1, n_harm + 1):
        amp = envelope_gain(k * f0_base) / math.sqrt(k)
        voiced += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    breath = rng.standard_normal(n)
    sos = butter(2, 3500.0 / (sample_rate / 2), output="sos")
    voiced = voiced + 0.03 * np.max(np.abs(voiced)) * sosfilt(sos, breath)

    # syllable gating
    gate = np.zeros(n)
    ramp = int(0.03 * sample_rate)
    pos = 0
    while pos < n:
        on = int(rng.uniform(0.15, 0.45) * sample_rate)
        off = int(rng.uniform(0.05, 0.30) * sample_rate)
        level = rng.uniform(0.5, 1.0)
        end = min(pos + on, n)
        gate[pos:end] = level
        pos = end + off
    kernel = np.hanning(2 * ramp + 1)
    gate = np.convolve(gate, kernel / kernel.sum(), mode="same")

    out = voiced * gate
    active = out[np.abs(gate) > 1e-3]
    rms = np.sqrt(np.mean(active**2)) if active.size else 0.0
    return out / max(rms, 1e-12)


def load_source_pool(source_dir) -> list:
    """Load mono source clips from a directory of WAV files."""
    paths = sorted(Path(source_dir).glob("*.wav"))
    if not paths:
        raise DataError(f"source pool {source_dir} contains no WAV files")
    pool = []
    for p in paths:
        wave = read_wav(p)
        pool.append(wave.channels[0])
    return pool


def _fit_clip(clip, n, rng):
    """Crop (random offset) or zero-pad a clip to exactly n samples."""
    if len(clip) > n:
        start = int(rng.integers(0, len(clip) - n + 1))
        return clip[start:start + n].copy()
    out = np.zeros(n)
    out[:len(clip)] = clip
    return out


# ---------------------------------------------------------------------------
# Mixture synthesis


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = True
    diffuse_snr_db: tuple = (10.0, 20.0)
    directional_snr_db: tuple = (5.0, 15.0)
    diffuse_cutoff_hz: float = 3000.0


OVERLAP_PATTERNS = ("single", "partial", "full", "sequential")


@dataclass
class Placement:
    array_center: np.ndarray
    source_positions: list
    noise_position: np.ndarray


@dataclass
class MixtureSample:
    """A synthesized multichannel mixture with its reference components.

    refs rows (at the reference channel 0): speech0, speech1,
    stationary noise, transient noise.  The mixture equals the sum of all
    component images, sample-exact.
    """

    mixture: MultichannelWaveform
    refs: np.ndarray
    meta: dict = field(default_factory=dict)


def _sample_placement(room: RoomSpec, geometry: ArrayGeometry, n_sources, rng,
                      attempts=100):
    dims = np.asarray(room.dimensions)
    mic_extent = float(np.max(np.linalg.norm(geometry.position_array(), axis=1)))
    if (min(dims[:2]) <= 2 * (0.5 + mic_extent)) or dims[2] <= 0.9 + 0.5:
        raise DataError(
            f"room {room.dimensions} too small for 0.5 m margins")
    for _ in range(attempts):
        center = np.array([
            rng.uniform(0.5 + mic_extent, dims[0] - 0.5 - mic_extent),
            rng.uniform(0.5 + mic_extent, dims[1] - 0.5 - mic_extent),
            rng.uniform(0.9, min(2.0, dims[2] - 0.5)),
        ])
        sources = [np.array([rng.uniform(0.5, dims[0] - 0.5),
                             rng.uniform(0.5, dims[1] - 0.5),
                             rng.uniform(0.9, min(2.0, dims[2] - 0.5))])
                   for _ in range(n_sources)]
        noise_pos = np.array([rng.uniform(0.5, dims[0] - 0.5),
                              rng.uniform(0.5, dims[1] - 0.5),
                              rng.uniform(0.9, min(2.0, dims[2] - 0.5))])
        points = sources + [noise_pos]
        if any(np.linalg.norm(p - center) < 0.5 for p in points):
            continue
        if n_sources == 2 and np.linalg.norm(sources[0] - sources[1]) < 1.0:
            continue
        return Placement(center, sources, noise_pos)
    raise DataError(
        f"no feasible placement in room {room.dimensions} after {attempts} tries")


def _place_in_timeline(clip, start, n, fade_samples):
    out = np.zeros(n)
    seg = clip[:max(0, n - start)].copy()
    if fade_samples > 0 and len(seg) > fade_samples:
        fade = 0.5 * (1 + np.cos(np.linspace(0, np.pi, fade_samples)))
        seg[-fade_samples:] *= fade
    out[start:start + len(seg)] = seg
    return out


def _image(dry, rirs, n):
    """Convolve a dry timeline with per-mic RIRs; (n_mics, n) result."""
    full = fftconvolve(rirs, dry[None, :], axes=1)
    return full[:, :n]


def _rir_stack(room, src_pos, mic_positions, max_order, fs):
    rirs = [image_method_rir(room, src_pos, mic, max_order, fs)
            for mic in mic_positions]
    length = max(len(r) for r in rirs)
    stack = np.zeros((len(rirs), length))
    for i, r in enumerate(rirs):
        stack[i, :len(r)] = r
    return stack


def synthesize_mixture(sources, geometry: ArrayGeometry, room: RoomSpec,
                       noise_cfg: NoiseConfig, overlap_pattern, seed,
                       duration=4.0, sample_rate=16000, max_order=3,
                       placement: Placement | None = None) -> MixtureSample:
    """Simulate a reverberant multichannel mixture.

    sources: one or two mono clips (dry).  They are placed on the
    timeline according to overlap_pattern, convolved with image-method
    RIRs, and mixed with diffuse stationary noise plus one directional
    noise burst.  Reference images at channel 0 are stored per component.
    """
    if overlap_pattern not in OVERLAP_PATTERNS:
        raise ValueError(f"unknown overlap pattern {overlap_pattern!r}")
    if not 1 <= len(sources) <= 2:
        raise ValueError("expected one or two sources")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    fade = int(0.02 * sample_rate)

    if placement is None:
        placement = _sample_placement(room, geometry, len(sources), rng)
    mic_positions = placement.array_center + geometry.position_array()
    for mic in mic_positions:
        if not room.contains(mic):
            raise DataError("array placement leaves a microphone outside the room")

    # timeline layout
    starts = [0] * len(sources)
    limits = [n] * len(sources)
    offset_draw = rng.uniform(0.2, 0.5)
    if overlap_pattern == "partial" and len(sources) == 2:
        starts[1] = int(offset_draw * n)
    elif overlap_pattern == "sequential" and len(sources) == 2:
        gap = int(0.04 * n)
        limits[0] = n // 2 - gap
        starts[1] = n // 2 + gap

    timelines = []
    for clip, start, limit in zip(sources, starts, limits):
        placed = _place_in_timeline(clip[:limit - start] if limit < n else clip,
                                    start, n, fade)
        timelines.append(placed)

    m = geometry.n_mics
    speech_images = []
    for dry, pos in zip(timelines, placement.source_positions):
        rirs = _rir_stack(room, pos, mic_positions, max_order, sample_rate)
        speech_images.append(_image(dry, rirs, n))
    while len(speech_images) < 2:
        speech_images.append(np.zeros((m, n)))

    speech_sum = speech_images[0] + speech_images[1]
    speech_power = float(np.mean(speech_sum**2))

    stationary = np.zeros((m, n))
    transient = np.zeros((m, n))
    if noise_cfg.enabled and speech_power > 0:
        # decorrelated low-passed noise, matched level per channel
        sos = butter(4, noise_cfg.diffuse_cutoff_hz / (sample_rate / 2),
                     output="sos")
        raw = sosfilt(sos, rng.standard_normal((m, n)), axis=-1)
        raw /= np.sqrt(np.mean(raw**2, axis=-1, keepdims=True))
        snr = rng.uniform(*noise_cfg.diffuse_snr_db)
        stationary = raw * math.sqrt(speech_power / 10.0 ** (snr / 10.0))

        burst_len = min(n, int(rng.uniform(0.3, 1.0) * sample_rate))
        burst_start = int(rng.uniform(0.0, max(1, n - burst_len)))
        burst = rng.standard_normal(burst_len)
        ramp = np.minimum(np.arange(burst_len) + 1,
                          burst_len - np.arange(burst_len)) / (burst_len / 4)
        burst *= np.minimum(1.0, ramp)
        dry_burst = np.zeros(n)
        dry_burst[burst_start:burst_start + burst_len] = burst
        rirs = _rir_stack(room, placement.noise_position, mic_positions,
                          max_order, sample_rate)
        burst_img = _image(dry_burst, rirs, n)
        burst_power = float(np.mean(burst_img**2))
        if burst_power > 0:
            snr = rng.uniform(*noise_cfg.directional_snr_db)
            transient = burst_img * math.sqrt(
                speech_power / (10.0 ** (snr / 10.0) * burst_power))

    # components stay at their physical levels; the mixture is their
    # in-order sum so the identity holds sample-exact
    components = [speech_images[0], speech_images[1], stationary, transient]
    mixture = np.zeros((m, n))
    for c in components:
        mixture += c
    refs = np.stack([c[0] for c in components])

    meta = {
        "geometry": geometry.name,
        "n_mics": m,
        "pattern": overlap_pattern,
        "n_speakers": len(sources),
        "room": list(room.dimensions),
        "absorption": room.absorption,
        "max_order": max_order,
    }
    return MixtureSample(
        MultichannelWaveform(mixture, sample_rate), refs, meta)


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class SimConfig:
    n_samples: int = 16
    seed: int = 0
    duration_seconds: float = 4.0
    sample_rate: int = 16000
    geometries: tuple = ("ami8", "ms7")
    max_order: int = 3
    single_speaker_fraction: float = 0.5
    room_min: tuple = (4.0, 4.0, 2.6)
    room_max: tuple = (8.0, 8.0, 3.5)
    absorption_range: tuple = (0.5, 0.9)
    sir_range_db: tuple = (-4.0, 4.0)
    source_dir: str | None = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)


def _is_single(index, fraction):
    return math.floor((index + 1) * fraction) != math.floor(index * fraction)


def build_sample(cfg: SimConfig, index, pool=None) -> MixtureSample:
    """Deterministically synthesize sample `index` of a dataset config."""
    seq = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(index,))
    rng = np.random.default_rng(seq)
    n_speakers = 1 if _is_single(index, cfg.single_speaker_fraction) else 2
    geometry = geometry_builtin(str(rng.choice(list(cfg.geometries))))
    dims = tuple(rng.uniform(lo, hi) for lo, hi in zip(cfg.room_min, cfg.room_max))
    room = RoomSpec(dims, float(rng.uniform(*cfg.absorption_range)))
    pattern = "single" if n_speakers == 1 else str(
        rng.choice(["partial", "full", "sequential"]))

    n = int(round(cfg.duration_seconds * cfg.sample_rate))
    # two-speaker samples pair disjoint pitch registers (mixed low/high
    # voices), mirroring how concurrent talkers rarely share an f0 range
    if n_speakers == 2:
        registers = [(85.0, 150.0), (170.0, 255.0)]
        if rng.random() < 0.5:
            registers.reverse()
    else:
        registers = [(85.0, 255.0)]
    sources = []
    for s in range(n_speakers):
        if pool is not None:
            clip = _fit_clip(pool[int(rng.integers(0, len(pool)))], n, rng)
        else:
            clip = speech_like(cfg.duration_seconds, cfg.sample_rate, rng,
                               f0_range=registers[s])
        if s == 1:
            clip = clip * 10.0 ** (rng.uniform(*cfg.sir_range_db) / 20.0)
        sources.append(clip)

    sample = synthesize_mixture(
        sources, geometry, room, cfg.noise, pattern, seq.spawn(1)[0],
        duration=cfg.duration_seconds, sample_rate=cfg.sample_rate,
        max_order=cfg.max_order)
    sample.meta["index"] = index
    return sample


def make_dataset(cfg: SimConfig, out_dir) -> Path:
    """Synthesize a dataset; returns the manifest path.

    Writes <id>.mix.wav (M channels) and <id>.refs.wav (4 channels:
    speech0, speech1, stationary, transient at channel 0) per sample plus
    a line-delimited manifest recording every seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = load_source_pool(cfg.source_dir) if cfg.source_dir else None
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for index in range(cfg.n_samples):
            sample = build_sample(cfg, index, pool=pool)
            sid = f"{index:05d}"
            mix_path = f"{sid}.mix.wav"
            refs_path = f"{sid}.refs.wav"
            write_wav(out_dir / mix_path, sample.mixture)
            write_wav(out_dir / refs_path, MultichannelWaveform(
                sample.refs, cfg.sample_rate))
            record = {
                "id": sid,
                "index": index,
                "seed": cfg.seed,
                "mix": mix_path,
                "refs": refs_path,
                **{k: sample.meta[k] for k in
                   ("geometry", "n_mics", "n_speakers", "pattern")},
            }
            fh.write(json.dumps(record) + "\n")
    return manifest


class MixtureDataset:
    """Reader for a simulated dataset directory (manifest + WAVs)."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.jsonl"
        if not manifest.exists():
            raise DataError(f"no manifest.jsonl under {root}")
        with open(manifest) as fh:
            self.records = [json.loads(line) for line in fh if line.strip()]
        if not self.records:
            raise DataError(f"manifest under {root} lists no samples")

    def __len__(self):
        return len(self.records)

    def load(self, idx):
        rec = self.records[idx]
        mix = read_wav(self.root / rec["mix"])
        refs = read_wav(self.root / rec["refs"])
        return {
            "mixture": mix.channels,
            "refs": refs.channels,
            "sample_rate": mix.sample_rate,
            "meta": rec,
        }


def subset_channels(n_total, m, rng=None):
    """Channel indices for an m-mic subset; always includes channel 0.

    Deterministic (evenly spaced) without an rng; random otherwise.
    """
    m = min(m, n_total)
    if rng is None:
        return [round(j * n_total / m) % n_total for j in range(m)]
    rest = rng.permutation(np.arange(1, n_total))[:m - 1]
    return [0] + sorted(int(i) for i in rest)
