"""``focusnet`` command line: train, eval, predict, gradcheck, synth.

Exit codes: 0 success, 1 gradient check failure, 2 configuration or
checkpoint error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .autodiff import Tensor
from .checkpoint import load_checkpoint
from .exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericalError,
    ParameterError,
    ShapeError,
    ValidationError,
)
from .metrics import binarize, evaluate, format_table, report_csv
from .model import ArchConfig, forward
from .pnm import read_pnm, write_pnm
from .training import TrainConfig, evaluate_loss, train, write_history_csv

logger = logging.getLogger("focusnet")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

ARCH_KEYS = ("in_channels", "encoder_widths", "bottleneck_width", "decoder_widths", "se_ratio",
             "dropout_rate", "input_size", "bn_eps", "bn_momentum")
TRAIN_KEYS = {"max_epochs": int, "batch_size": int, "smooth": float, "lr": float}
AUG_KEYS = {"hflip_prob": float, "vflip_prob": float, "zoom_range": None, "channel_shift": float,
            "channel_shift_fraction": float, "augment_target": int}
RUN_KEYS = {"seed": int, "threshold": float, "split_fraction": float, "synth_size": int, "synth_channels": int}
SCHEMA = set(ARCH_KEYS) | set(TRAIN_KEYS) | set(AUG_KEYS) | set(RUN_KEYS)


class RunConfig(dict):
    """Validated ``key = value`` settings. Unknown keys are rejected."""

    @classmethod
    def parse(cls, text: str, source="<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    def set(self, key: str, value: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        self[key] = value

    def typed(self, key, default=None):
        if key not in self:
            return default
        raw = self[key]
        try:
            if key in ("encoder_widths", "decoder_widths"):
                return tuple(int(v) for v in raw.split(","))
            if key == "zoom_range":
                lo, hi = (float(v) for v in raw.split(","))
                return (lo, hi)
            if key in ("dropout_rate", "bn_eps", "bn_momentum"):
                return float(raw)
            if key in ARCH_KEYS:
                return int(raw)
            conv = TRAIN_KEYS.get(key) or AUG_KEYS.get(key) or RUN_KEYS.get(key)
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {raw!r}") from exc

    def to_text(self) -> str:
        return "".join(f"{k} = {self[k]}\n" for k in sorted(self))

    def arch(self, preset: ArchConfig) -> ArchConfig:
        overrides = {k: self.typed(k) for k in ARCH_KEYS if k in self}
        if "encoder_widths" in overrides and "decoder_widths" not in overrides:
            overrides["decoder_widths"] = tuple(reversed(overrides["encoder_widths"]))
        return ArchConfig(**{**preset.__dict__, **overrides}).validate()

    def train(self, seed: int) -> TrainConfig:
        kwargs = {k: self.typed(k) for k in TRAIN_KEYS if k in self}
        return TrainConfig(seed=seed, **kwargs).validate()

    def augmentation(self) -> D.AugmentationConfig:
        kwargs = {k: self.typed(k) for k in AUG_KEYS if k in self and k != "augment_target"}
        return D.AugmentationConfig(**kwargs).validate()


def _preset(name: str, in_channels: int, size: int | None) -> ArchConfig:
    if name == "tiny":
        return ArchConfig.tiny(in_channels=in_channels, input_size=size or 64)
    return ArchConfig.standard(in_channels=in_channels, input_size=size or 256)


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            cfg = RunConfig.parse(path.read_text(), str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = str(args.seed)
    return cfg


def _prepare(manifest: D.DatasetManifest, size: int) -> D.DatasetManifest:
    if all(s.image.shape[1:] == (size, size) for s in manifest):
        return manifest
    return D.DatasetManifest([D.resize(s, size) for s in manifest], manifest.channels, manifest.source)


def _read_ids(path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def _subset_by_ids(manifest, ids, source):
    index = {s.identifier: i for i, s in enumerate(manifest)}
    missing = [i for i in ids if i not in index]
    if missing:
        raise DataError(f"{source}: identifiers not in dataset: {missing[:3]}")
    return manifest.subset([index[i] for i in ids])


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    seed = cfg.typed("seed", 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.synth:
        size = cfg.typed("synth_size", cfg.typed("input_size", 64 if args.arch == "tiny" else 256))
        channels = cfg.typed("synth_channels", cfg.typed("in_channels", 1))
        data_dir = out / "synth"
        D.write_dataset(D.synth_generate(args.synth, size, seed, channels), data_dir)
    elif args.data:
        data_dir = Path(args.data)
    else:
        raise ConfigError("train needs --data DIR or --synth N")
    manifest = D.load_dataset(data_dir)

    preset = _preset(args.arch, manifest.channels, None)
    arch = cfg.arch(preset)
    if arch.in_channels != manifest.channels:
        raise ConfigError(f"in_channels = {arch.in_channels} but the data has {manifest.channels} channel(s)")
    tcfg = cfg.train(seed)
    aug = cfg.augmentation()
    manifest = _prepare(manifest, arch.input_size)

    train_m, val_m = D.split(manifest, cfg.typed("split_fraction", 0.8), seed)
    stats = D.compute_stats(train_m)
    target = cfg.typed("augment_target", 0)
    if target and target > len(train_m):
        train_m = D.expand_dataset(train_m, aug, target, seed)
    train_m, val_m = D.normalize_manifest(train_m, stats), D.normalize_manifest(val_m, stats)

    (out / "config.txt").write_text(cfg.to_text() + "# effective architecture\n"
                                    + "".join(f"# {line}\n" for line in arch.to_text().splitlines()))
    stats.save(out / "stats.txt")
    (out / "val_ids.txt").write_text("".join(f"{s.identifier}\n" for s in val_m))

    tcfg.checkpoint_path = str(out / "best.fnet")
    history, best = train(tcfg, arch, train_m.arrays(), val_m.arrays())
    write_history_csv(history, out / "history.csv")

    report = evaluate(best.params, val_m.arrays(), cfg.typed("threshold", 0.5), tcfg.batch_size)
    (out / "metrics.txt").write_text(format_table([("FocusNet (val)", report.values())]))
    (out / "metrics.csv").write_text(report_csv([("val", report)]))
    print(f"best epoch {best.epoch}: val dice loss {best.best_val_loss:.6f}")
    print(format_table([("FocusNet (val)", report.values())]), end="")
    return EXIT_OK


def _stats_for(args, checkpoint_path: Path):
    path = Path(args.stats) if args.stats else checkpoint_path.with_name("stats.txt")
    if not path.exists():
        if args.stats:
            raise DataError(f"stats file {path} not found")
        return None
    return D.NormalizationStats.load(path)


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    try:
        rec = load_checkpoint(ckpt_path)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {ckpt_path}: {exc.strerror}") from exc
    manifest = D.load_dataset(args.data)
    if args.ids:
        manifest = _subset_by_ids(manifest, _read_ids(args.ids), args.ids)
    if manifest.channels != rec.cfg.in_channels:
        raise ConfigError(f"checkpoint expects {rec.cfg.in_channels} channel(s), data has {manifest.channels}")
    manifest = _prepare(manifest, rec.cfg.input_size)
    stats = _stats_for(args, ckpt_path)
    if stats is not None:
        manifest = D.normalize_manifest(manifest, stats)
    images, masks = manifest.arrays()
    report = evaluate(rec.params, (images, masks), args.threshold, args.batch_size)
    loss = evaluate_loss(rec.params, images, masks, args.batch_size)
    table = format_table([("FocusNet", report.values())])
    print(table, end="")
    print(f"soft dice loss {loss!r}")
    out = Path(args.out) if args.out else ckpt_path.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_metrics.csv").write_text(report_csv([("eval", report)]))
    (out / "eval_metrics.txt").write_text(table + f"soft_dice_loss = {loss!r}\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt_path = Path(args.checkpoint)
    try:
        rec = load_checkpoint(ckpt_path)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {ckpt_path}: {exc.strerror}") from exc
    image_path = Path(args.image)
    pixels = read_pnm(image_path)
    chw = pixels[None] if pixels.ndim == 2 else pixels.transpose(2, 0, 1)
    if chw.shape[0] != rec.cfg.in_channels:
        raise ConfigError(f"checkpoint expects {rec.cfg.in_channels} channel(s), image has {chw.shape[0]}")
    h, w = chw.shape[1:]
    sample = D.SegmentationSample(chw.astype(np.float32) / np.float32(255), np.zeros((1, h, w), np.float32), image_path.stem)
    sample = _prepare(D.DatasetManifest([sample], sample.channels), rec.cfg.input_size)[0]
    stats = _stats_for(args, ckpt_path)
    if stats is not None:
        sample = D.normalize(sample, stats)
    prob, _ = forward(rec.params, Tensor(sample.image[None], dtype=rec.params.dtype), "eval")
    prob = prob.data[0]
    if prob.shape[1:] != (h, w):
        prob = _resize_rect(prob, h, w)
    prob_pixels = probability_pixels(prob[0])
    mask_pixels = binarize(prob[0], args.threshold).astype(np.uint8) * 255
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pnm(out / f"{image_path.stem}_prob.pgm", prob_pixels)
    write_pnm(out / f"{image_path.stem}_mask.pgm", mask_pixels)
    print(f"wrote {out / (image_path.stem + '_prob.pgm')} and {out / (image_path.stem + '_mask.pgm')}")
    return EXIT_OK


def probability_pixels(prob: np.ndarray) -> np.ndarray:
    """Map probabilities to 8-bit grey levels, round(p * 255) with halves rounded up."""
    return np.floor(np.asarray(prob, dtype=np.float64) * 255 + 0.5).astype(np.uint8)


def _resize_rect(prob: np.ndarray, h: int, w: int) -> np.ndarray:
    """Half-pixel bilinear resample of a 1 x S x S map to 1 x h x w."""
    _, sh, sw = prob.shape

    def taps(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        return D._linear_taps(src, n_in, D._clamp)

    return D._bilinear(prob, taps(h, sh), taps(w, sw)).astype(np.float32)


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed, include_model=True, corrupt=args.corrupt,
                        coords_per_tensor=None if args.exhaustive else 2 if args.tiny else 8)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_GRADCHECK


def cmd_synth(args) -> int:
    manifest = D.synth_generate(args.n, args.size, args.seed, args.channels)
    D.write_dataset(manifest, args.out)
    print(f"wrote {len(manifest)} samples to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="focusnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a dataset directory or synthetic data")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--synth", type=int, metavar="N", help="generate N synthetic samples instead of --data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=("standard", "tiny"), default="standard", help="architecture preset before overrides")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--stats", help="normalisation stats (default: stats.txt beside the checkpoint)")
    p.add_argument("--ids", help="file of sample identifiers to restrict evaluation to")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write probability and mask PGMs for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--stats")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--tiny", action="store_true", help="sample fewer model coordinates")
    p.add_argument("--exhaustive", action="store_true", help="check every model coordinate (several minutes)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError, CheckpointError, ShapeError) as exc:
        print(f"focusnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ValidationError) as exc:
        print(f"focusnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"focusnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
