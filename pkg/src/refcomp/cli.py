"""Batch entry points wiring the modules into reproducible runs.

Every command writes into a fresh run directory, echoes its effective
configuration beside the outputs, and holds a lock file while running.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import conlab as conlab_mod
from . import curation as curation_mod
from . import imageio
from . import synthbench
from .diffusion import (BackboneKind, Model, ModelVariant, NumericalError,
                        build_variant, inpaint_sample, make_schedule, train)
from .dit import DiTConfig
from .unet import UNetConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    """Effective settings for one command, echoed beside every output.

    The output directory itself is deliberately not part of the echo so
    identical runs into different directories stay byte-identical.
    """

    command: str
    options: dict

    def write(self, directory: Path) -> None:
        with open(directory / "config.json", "w", encoding="utf-8") as fh:
            json.dump({"command": self.command, "options": self.options},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")


def _run_dir(raw: str) -> Path:
    root = os.environ.get("REFCOMP_RUN_ROOT")
    path = Path(raw)
    if root and not path.is_absolute():
        path = Path(root) / path
    if path.exists() and any(path.iterdir()):
        raise DataError(f"run directory {path} exists and is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path


class _RunDirLock:
    def __init__(self, directory: Path):
        self.path = directory / "lock"

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(f"run directory {self.path.parent} is locked by another run")
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        self.path.unlink(missing_ok=True)
        return False


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, then config-file values, then explicitly given flags.

    Every optional flag is declared with a None default so an absent flag
    falls through to the file value or the built-in default.
    """
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            file_values = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"unreadable config file {config_path}: {exc}")
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise DataError(f"config file {config_path} has unknown keys {sorted(unknown)}")
        merged.update(file_values)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _load_dataset(path: str):
    try:
        samples = synthbench.load_dataset(path)
    except (OSError, FileNotFoundError) as exc:
        raise DataError(str(exc))
    if not samples:
        raise DataError(f"dataset {path} is empty")
    return samples


def _backbone_config(options: dict):
    from .engine import ShapeError
    size = int(options["size"])
    t_max = int(options["t_steps"])
    try:
        if options["backbone"] == "unet":
            return BackboneKind.UNET, UNetConfig(image_size=size, t_max=t_max)
        patch = int(options.get("patch", 4))
        if size % patch:
            raise DataError(f"image size {size} is not divisible by patch {patch}")
        return BackboneKind.DIT, DiTConfig(image_size=size, patch=patch, t_max=t_max)
    except ShapeError as exc:
        raise DataError(f"config contradiction: {exc}")


def _write_loss_csv(path: Path, history, variant: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "variant", "wall_time"])
        for rec in history:
            writer.writerow([rec.step, f"{rec.loss:.8f}", variant, f"{rec.wall_time:.3f}"])


def _read_loss_csv(path) -> list[float]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return [float(row["loss"]) for row in csv.DictReader(fh)]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"unreadable training log {path}: {exc}")


# -- commands ------------------------------------------------------------------

GEN_DEFAULTS = {"count": 100, "seed": 0, "size": 32}
TRAIN_DEFAULTS = {"steps": 2000, "batch": 4, "lr": 1e-3, "seed": 0,
                  "backbone": "unet", "variant": "shared", "t_steps": 200,
                  "augment": False}
SAMPLE_DEFAULTS = {"count": 4, "steps": 50, "seed": 0}
ABLATE_DEFAULTS = {"steps": 2000, "batch": 4, "lr": 1e-3, "seed": 0,
                   "backbone": "unet", "t_steps": 200, "draws": 200,
                   "eval_seed": 1}
CONLAB_DEFAULTS = {"draws": 200, "seed": 0}
CURATE_DEFAULTS = {"sobel_threshold": curation_mod.SOBEL_VARIANCE_THRESHOLD,
                   "laplacian_threshold": curation_mod.LAPLACIAN_VARIANCE_THRESHOLD,
                   "component_ratio": curation_mod.LARGEST_COMPONENT_RATIO_THRESHOLD,
                   "cluster_threshold": curation_mod.CLUSTER_COSINE_THRESHOLD}
METRICS_DEFAULTS = {"peak": 255.0}


def cmd_gen(args) -> int:
    options = _merge_config(args, GEN_DEFAULTS)
    out = _run_dir(args.out)
    with _RunDirLock(out):
        cfg = synthbench.SceneConfig(image_size=int(options["size"]))
        samples = synthbench.generate_dataset(cfg, int(options["count"]), int(options["seed"]))
        synthbench.write_dataset(samples, out)
        RunConfig("gen", options).write(out)
    print(f"gen: wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _train_one(samples, options, variant: ModelVariant, out: Path, tag: str):
    kind, cfg = _backbone_config(options)
    model = build_variant(kind, variant, int(options["seed"]), cfg)
    sched = make_schedule(int(options["t_steps"]))
    augment = None
    if options.get("augment"):
        aug_cfg = synthbench.AugmentationConfig()

        def augment(sample, rng):
            seed = int(rng.integers(0, 2 ** 31))
            ref, mask_ref = synthbench.augment_image(sample.ref, sample.mask_ref,
                                                     aug_cfg, seed)
            hole = synthbench.augment_mask(sample.mask_bg_c, seed + 1, aug_cfg)
            from .diffusion import CompositionSample
            return CompositionSample(gt=sample.gt, bg=sample.bg, ref=ref,
                                     mask_bg=1.0 - hole, mask_ref=mask_ref,
                                     pose=sample.pose, sample_id=sample.sample_id,
                                     seed=sample.seed)

    history = train(model, samples, sched, steps=int(options["steps"]),
                    batch_size=int(options["batch"]), lr=float(options["lr"]),
                    seed=int(options["seed"]), augment=augment)
    _write_loss_csv(out / f"loss_{tag}.csv", history, variant.value)
    ckpt = out / f"model_{tag}.ckpt"
    model.save(ckpt, meta={"steps": int(options["steps"]), "backbone": kind.value,
                           "t_steps": int(options["t_steps"]),
                           "size": int(options["size"]), "seed": int(options["seed"])})
    return model, sched, history, ckpt


def cmd_train(args) -> int:
    options = _merge_config(args, TRAIN_DEFAULTS)
    samples = _load_dataset(args.data)
    options["size"] = samples[0].gt.shape[-1]
    out = _run_dir(args.out)
    with _RunDirLock(out):
        variant = ModelVariant(options["variant"])
        model, sched, history, ckpt = _train_one(samples, options, variant, out, variant.value)
        RunConfig("train", options).write(out)
    final = history[-1]
    print(f"train: {len(history)} steps, final loss {final.loss:.4f}, "
          f"{final.wall_time:.0f}s, checkpoint {ckpt}")
    return EXIT_OK


def _load_model(ckpt_path: str) -> tuple[Model, dict]:
    from .checkpoint import CheckpointError, load_checkpoint
    try:
        _, meta = load_checkpoint(ckpt_path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"unreadable checkpoint {ckpt_path}: {exc}")
    try:
        kind = BackboneKind(meta["kind"])
        variant = ModelVariant(meta["variant"])
        options = {"backbone": kind.value, "size": meta["size"],
                   "t_steps": meta["t_steps"]}
    except KeyError as exc:
        raise DataError(f"checkpoint {ckpt_path} lacks metadata field {exc}")
    _, cfg = _backbone_config(options)
    model = build_variant(kind, variant, 0, cfg)
    model.load(ckpt_path)
    return model, meta


def cmd_sample(args) -> int:
    options = _merge_config(args, SAMPLE_DEFAULTS)
    samples = _load_dataset(args.data)
    model, meta = _load_model(args.checkpoint)
    sched = make_schedule(int(meta["t_steps"]))
    out = _run_dir(args.out)
    count = min(int(options["count"]), len(samples))
    rng = np.random.default_rng(int(options["seed"]))
    with _RunDirLock(out):
        preserved = True
        for i in range(count):
            sample = samples[i]
            img = inpaint_sample(sample.masked_bg.astype(np.float32), sample.mask_bg,
                                 sample.reference_input(), model, sched,
                                 steps=int(options["steps"]), rng=rng)
            img = imageio.quantize(np.clip(img, 0.0, 1.0))
            recomposited = sample.mask_bg * sample.masked_bg + sample.mask_bg_c * img
            ok = np.array_equal(recomposited * sample.mask_bg, sample.masked_bg)
            preserved = preserved and ok
            imageio.write_ppm(out / f"out_{i:04d}.ppm", recomposited)
            imageio.write_ppm(out / f"gt_{i:04d}.ppm", sample.gt)
        RunConfig("sample", options).write(out)
    if not preserved:
        print("sample: background preservation check failed", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"sample: wrote {count} composited images to {out}; background preserved")
    return EXIT_OK


def cmd_ablate(args) -> int:
    options = _merge_config(args, ABLATE_DEFAULTS)
    samples = _load_dataset(args.data)
    options["size"] = samples[0].gt.shape[-1]
    out = _run_dir(args.out)
    with _RunDirLock(out):
        models = {}
        sched = None
        for variant in (ModelVariant.SHARED, ModelVariant.DUAL_FROZEN,
                        ModelVariant.DUAL_TRAINABLE):
            model, sched, _, _ = _train_one(samples, options, variant, out, variant.value)
            models[variant.value] = model
        layer_ids, curves = conlab_mod.layer_l2_profile(
            models, samples, sched, draws=int(options["draws"]),
            seed=int(options["eval_seed"]))
        with open(out / "ablate.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "layer", "l2"])
            for variant, curve in curves.items():
                for layer, value in zip(layer_ids, curve):
                    writer.writerow([variant, layer, f"{value:.8f}"])
        summary = {variant: float(np.mean(curve)) for variant, curve in curves.items()}
        with open(out / "ablate.json", "w", encoding="utf-8") as fh:
            json.dump({"layer_ids": layer_ids, "layer_mean_l2": summary},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        RunConfig("ablate", options).write(out)
    print(f"ablate: layer-averaged l2 {summary}")
    return EXIT_OK


def cmd_conlab(args) -> int:
    options = _merge_config(args, CONLAB_DEFAULTS)
    samples = _load_dataset(args.data)
    model, meta = _load_model(args.checkpoint)
    sched = make_schedule(int(meta["t_steps"]))
    reference = None
    if args.train_log:
        reference = conlab_mod.mean_training_loss(_read_loss_csv(args.train_log))
    out = _run_dir(args.out)
    with _RunDirLock(out):
        report = conlab_mod.evaluate_checkpoint(
            model, samples, sched, draws=int(options["draws"]),
            seed=int(options["seed"]), training_loss_reference=reference,
            metadata={"checkpoint": Path(args.checkpoint).name})
        conlab_mod.write_report(report, out)
        RunConfig("conlab", options).write(out)
    ratio = (report.merging_mean / reference) if reference else None
    print(f"conlab: merging loss {report.merging_mean:.6f}"
          + (f", ratio to training loss {ratio:.3f}" if ratio else "")
          + f", min cosine {min(report.cosine_per_layer.values()):.3f}")
    return EXIT_OK


def _load_frames(directory: str) -> list:
    index = Path(directory) / "index.jsonl"
    if not index.exists():
        raise DataError(f"no index.jsonl under {directory}")
    records = []
    base = Path(directory)
    with open(index, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            try:
                image = imageio.read_ppm(base / rec["image"])
                candidates = [curation_mod.MaskCandidate(m["label"],
                                                         imageio.read_mask(base / m["path"]))
                              for m in rec.get("masks", [])]
            except (OSError, imageio.ImageFormatError) as exc:
                raise DataError(f"unreadable frame data: {exc}")
            records.append(curation_mod.FrameRecord(
                image=image, source_id=rec["source"], frame_index=int(rec["frame"]),
                candidates=candidates))
    return records


def cmd_curate(args) -> int:
    options = _merge_config(args, CURATE_DEFAULTS)
    frames = _load_frames(args.frames)
    cfg = curation_mod.CurationConfig(
        sobel_threshold=float(options["sobel_threshold"]),
        laplacian_threshold=float(options["laplacian_threshold"]),
        component_ratio_threshold=float(options["component_ratio"]),
        cluster_threshold=float(options["cluster_threshold"]))
    out = _run_dir(args.out)
    with _RunDirLock(out):
        manifest = curation_mod.build_pairs(frames, curation_mod.default_hooks(), cfg)
        curation_mod.write_pair_manifest(manifest, out / "pairs.jsonl")
        RunConfig("curate", options).write(out)
    print(f"curate: {len(manifest['pairs'])} pairs from {manifest['clusters']} clusters "
          f"({manifest['dropped']} dropped)")
    return EXIT_OK


def cmd_metrics(args) -> int:
    options = _merge_config(args, METRICS_DEFAULTS)
    out_dir = Path(args.outputs)
    gt_dir = Path(args.truths)
    if not out_dir.is_dir() or not gt_dir.is_dir():
        raise DataError(f"missing image directory: {out_dir} or {gt_dir}")
    names = sorted(p.name for p in out_dir.glob("*.ppm"))
    pairs = [(n, gt_dir / n) for n in names if (gt_dir / n).exists()]
    if not pairs:
        # Convention from the sample command: out_XXXX.ppm pairs with gt_XXXX.ppm.
        pairs = [(n, gt_dir / n.replace("out_", "gt_")) for n in names
                 if (gt_dir / n.replace("out_", "gt_")).exists()]
    if not pairs:
        raise DataError(f"no matching image pairs between {out_dir} and {gt_dir}")
    out = _run_dir(args.out)
    peak = float(options["peak"])
    with _RunDirLock(out):
        rows = []
        for name, gt_path in pairs:
            a = imageio.read_ppm(out_dir / name) * peak
            b = imageio.read_ppm(gt_path) * peak
            value_psnr = conlab_mod.psnr(a, b, peak=peak)
            result = conlab_mod.ssim_full(a, b, data_range=peak)
            rows.append([name, "inf" if math.isinf(value_psnr) else f"{value_psnr:.4f}",
                         f"{result.value:.6f}", int(result.fallback)])
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["file", "psnr", "ssim", "ssim_fallback"])
            writer.writerows(rows)
        RunConfig("metrics", options).write(out)
    print(f"metrics: wrote {len(rows)} rows to {out / 'metrics.csv'}")
    return EXIT_OK


# -- wiring ---------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="refcomp",
                     description="Desk-scale reference-guided composition experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="fresh run directory")
        p.add_argument("--config", help="JSON config file; flags override its values")

    p = sub.add_parser("gen", help="generate a synthetic composition dataset")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train one sharing variant")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--backbone", choices=["unet", "dit"])
    p.add_argument("--variant", choices=[v.value for v in ModelVariant])
    p.add_argument("--t-steps", dest="t_steps", type=int)
    p.add_argument("--augment", action="store_const", const=True, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="inpaint with a trained checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("ablate", help="train all three sharing variants and profile")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--backbone", choices=["unet", "dit"])
    p.add_argument("--t-steps", dest="t_steps", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--eval-seed", dest="eval_seed", type=int)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("conlab", help="consistency report for a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--draws", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-log", dest="train_log", help="loss CSV for the ratio")
    p.set_defaults(fn=cmd_conlab)

    p = sub.add_parser("curate", help="mine reference/target pairs from frames")
    common(p)
    p.add_argument("--frames", required=True)
    p.add_argument("--sobel-threshold", dest="sobel_threshold", type=float)
    p.add_argument("--laplacian-threshold", dest="laplacian_threshold", type=float)
    p.add_argument("--component-ratio", dest="component_ratio", type=float)
    p.add_argument("--cluster-threshold", dest="cluster_threshold", type=float)
    p.set_defaults(fn=cmd_curate)

    p = sub.add_parser("metrics", help="PSNR/SSIM over an output/truth pairing")
    common(p)
    p.add_argument("--outputs", required=True)
    p.add_argument("--truths", required=True)
    p.add_argument("--peak", type=float)
    p.set_defaults(fn=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        diag = getattr(exc, "snapshot", None)
        if diag:
            print(json.dumps(diag, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
