"""Command-line surface: simulate, train, separate, eval.

Configuration comes from YAML files (key/value with nesting); command
line flags override file values, which override defaults.  Unknown keys
are rejected.  Every run writes its fully resolved configuration next to
its outputs, and all randomness flows from the recorded root seed.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import DataError, NumericError
from .metrics import best_perm_si_snr, si_snr
from .model import (DESK_MODEL, PAPER_MODEL, ModelConfig,
                    checkpoint_stft_config, load_checkpoint)
from .pipeline import CssConfig, separate_continuous
from .signals import DEFAULT_STFT, DESK_STFT, StftConfig
from .simulate import MixtureDataset, NoiseConfig, SimConfig, make_dataset
from .training import TrainConfig, train
from .wavio import read_wav, write_wav


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _merge_dataclass(base, mapping, section):
    """Rebuild a dataclass with overrides; unknown keys are rejected."""
    if not isinstance(mapping, dict):
        raise UsageError(f"section {section!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(base)}
    updates = {}
    for key, value in mapping.items():
        if key not in known:
            raise UsageError(f"unknown key {section}.{key}")
        current = getattr(base, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            value = _merge_dataclass(current, value, f"{section}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        updates[key] = value
    try:
        return dataclasses.replace(base, **updates)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value in section {section!r}: {exc}") from exc


def _load_yaml(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return data


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _to_plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _write_resolved(path, payload):
    with open(path, "w") as fh:
        yaml.safe_dump(_to_plain(payload), fh, sort_keys=True)


# ---------------------------------------------------------------------------
# simulate


def _cmd_simulate(args):
    raw = _load_yaml(args.config)
    cfg = _merge_dataclass(SimConfig(), raw, "simulate")
    if args.n_samples is not None:
        cfg = dataclasses.replace(cfg, n_samples=args.n_samples)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out / "sim_config.yaml", cfg)
    manifest = make_dataset(cfg, out)
    print(f"wrote {cfg.n_samples} samples; manifest at {manifest}")
    return 0


# ---------------------------------------------------------------------------
# train


_PRESETS = {
    "desk": (DESK_STFT, DESK_MODEL),
    "paper": (DEFAULT_STFT, PAPER_MODEL),
}


def _load_train_config(path):
    raw = _load_yaml(path)
    preset = raw.pop("preset", "desk")
    if preset not in _PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    stft_base, model_base = _PRESETS[preset]
    stft_cfg = _merge_dataclass(stft_base, raw.pop("stft", {}), "stft")
    model_raw = raw.pop("model", {})
    model_raw.setdefault("n_freq", stft_cfg.n_freq)
    model_cfg = _merge_dataclass(model_base, model_raw, "model")
    if model_cfg.n_freq != stft_cfg.n_freq:
        raise UsageError(
            f"model.n_freq {model_cfg.n_freq} does not match the STFT's "
            f"{stft_cfg.n_freq} bins")
    train_cfg = _merge_dataclass(TrainConfig(), raw.pop("train", {}), "train")
    if raw:
        raise UsageError(f"unknown key {sorted(raw)[0]}")
    return train_cfg, model_cfg, stft_cfg, preset


def _cmd_train(args):
    train_cfg, model_cfg, stft_cfg, preset = _load_train_config(args.config)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    dataset = MixtureDataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out / "train_config.yaml", {
        "preset": preset, "train": train_cfg, "model": model_cfg,
        "stft": stft_cfg, "data": args.data, "resume": args.resume,
    })
    _, log = train(dataset, train_cfg, model_cfg, stft_cfg,
                   out_dir=out, resume=args.resume)
    print(f"finished: checkpoint at {out / 'ckpt_final.npz'} "
          f"({len(log)} logged steps)")
    return 0


# ---------------------------------------------------------------------------
# separate


def _cmd_separate(args):
    try:
        model, header = load_checkpoint(args.model)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {args.model}") from exc
    stft_cfg = checkpoint_stft_config(header)
    css = CssConfig(window_seconds=args.window_seconds,
                    shift_seconds=args.shift_seconds)
    wave = read_wav(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    stem = stem[:-4] if stem.endswith(".mix") else stem

    outputs, report = separate_continuous(wave, model, css, stft_cfg)
    for k in range(2):
        write_wav(out / f"{stem}.src{k}.wav",
                  type(wave)(outputs[k:k + 1], wave.sample_rate))
    report.write(out / f"{stem}.report.txt")
    _write_resolved(out / f"{stem}.config.yaml", {
        "model": str(args.model), "input": str(args.input),
        "css": css, "stft": stft_cfg,
        "sample_rate": wave.sample_rate,
    })
    print(f"wrote {out / (stem + '.src0.wav')} and .src1.wav")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_refs(ref_dir, stem):
    packed = ref_dir / f"{stem}.refs.wav"
    if packed.exists():
        chans = read_wav(packed).channels
        return chans[0], chans[1]
    ref0 = ref_dir / f"{stem}.ref0.wav"
    ref1 = ref_dir / f"{stem}.ref1.wav"
    if ref0.exists() and ref1.exists():
        return read_wav(ref0).channels[0], read_wav(ref1).channels[0]
    raise DataError(f"no references for {stem} under {ref_dir}")


def score_pair(ests, refs):
    """Best-permutation SI-SNR that tolerates one silent reference.

    Returns (dB, permutation description).  With both references active
    this is the plain two-way best permutation; with a single active
    reference it is the best est channel against that reference.
    """
    active = [r for r in refs if np.any(r != 0)]
    if len(active) == 2:
        value, perm = best_perm_si_snr(ests, refs)
        return value, f"{perm[0]},{perm[1]}"
    if len(active) == 1:
        scores = [si_snr(e, active[0]) for e in ests]
        best = int(np.argmax(scores))
        return scores[best], f"ref->est{best}"
    raise DataError("both reference channels are silent")


def _cmd_eval(args):
    est_dir = Path(args.est)
    ref_dir = Path(args.ref)
    est_files = sorted(est_dir.glob("*.src0.wav"))
    if not est_files:
        raise DataError(f"no *.src0.wav files under {est_dir}")
    rows = []
    for f0 in est_files:
        stem = f0.name[:-len(".src0.wav")]
        f1 = est_dir / f"{stem}.src1.wav"
        if not f1.exists():
            raise DataError(f"missing {f1}")
        ests = [read_wav(f0).channels[0], read_wav(f1).channels[0]]
        refs = _load_refs(ref_dir, stem)
        length = min(map(len, list(ests) + list(refs)))
        value, perm = score_pair([e[:length] for e in ests],
                                 [r[:length] for r in refs])
        rows.append((stem, value, perm))

    out = Path(args.out)
    with open(out, "w") as fh:
        fh.write("file\tsi_snr_db\tpermutation\n")
        for stem, value, perm in rows:
            fh.write(f"{stem}\t{value:.4f}\t{perm}\n")
        mean = float(np.mean([v for _, v, _ in rows]))
        fh.write(f"MEAN\t{mean:.4f}\t\n")
    _write_resolved(out.with_suffix(out.suffix + ".config.yaml"), {
        "est": str(est_dir), "ref": str(ref_dir), "out": str(out),
    })
    print(f"mean best-perm SI-SNR {mean:.2f} dB over {len(rows)} files")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="cssep",
                     description="geometry-agnostic continuous speech separation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a mixture dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train", help="train the separation model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("separate", help="separate a multichannel WAV")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-seconds", type=float, default=1.6)
    p.add_argument("--shift-seconds", type=float, default=0.4)
    p.set_defaults(func=_cmd_separate)

    p = sub.add_parser("eval", help="score separated files against references")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
