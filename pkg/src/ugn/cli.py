"""``ugn synth|train|infer|eval|gradcheck --config <file> [--key value]...``"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint
from . import config as config_mod
from .config import ConfigError, RunConfig
from .dataio import (
    Palette,
    SegSample,
    decode_mask,
    encode_mask,
    load_dataset,
    read_rgb,
    save_sample,
    synth_generate,
    write_gray,
    write_rgb,
)
from .metrics import ConfusionMatrix, miou, report
from .model import UGNet, predict_image
from .train import Trainer, load_model_entries

log = logging.getLogger("ugn")

COMMANDS = ("synth", "train", "infer", "eval", "gradcheck")


def load_palette(cfg: RunConfig) -> Palette:
    p = cfg.path("palette")
    if cfg.palette or p.is_file():
        return Palette.load(p)
    return Palette.default()


def build_model(cfg: RunConfig, num_classes: int) -> UGNet:
    return UGNet(cfg.encoder_config(), num_classes, seed=cfg.seed)


def model_from_checkpoint(path) -> Tuple[UGNet, RunConfig]:
    entries = checkpoint.load(path)
    snap = config_mod.loads(checkpoint.entry_text(entries[checkpoint.CONFIG_ENTRY]))
    num_classes = entries["param/heads.0.logits.weight"].shape[0]
    model = build_model(snap, num_classes)
    load_model_entries(model, entries)
    return model, snap


def evaluate(model: UGNet, samples: Sequence[SegSample], cfg: RunConfig, palette: Palette) -> ConfusionMatrix:
    cm = ConfusionMatrix(len(palette), palette.unknown)
    ucfg = cfg.uncertainty_config()
    for s in samples:
        pred = predict_image(model, s.image, ucfg, seed=cfg.seed)
        cm.accumulate(pred.classes, s.mask, s.valid)
    return cm


def save_checkpoint(path: Path, trainer: Trainer, cfg: RunConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, trainer.state_entries() + [checkpoint.text_entry(cfg.dumps())])


# ------------------------------------------------------------------ commands


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    palette = Palette.default().subset(cfg.synth_classes)
    size = (cfg.synth_size, cfg.synth_size)
    splits = [("train", cfg.synth_count, cfg.seed), ("val", cfg.synth_val_count, cfg.seed + 1_000_003)]
    for split, count, seed in splits:
        for s in synth_generate(count, size, cfg.synth_classes, seed, cfg.synth_unknown_fraction):
            save_sample(out / split, s, palette)
    (out / "palette.txt").write_text(palette.dumps())
    log.info("wrote %d train / %d val samples under %s", cfg.synth_count, cfg.synth_val_count, out)
    return 0


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    palette = load_palette(cfg)
    data = load_dataset(cfg.path("train_dir"), palette)
    if not data:
        raise ValueError(f"no training samples in {cfg.path('train_dir')}")
    model = build_model(cfg, palette.num_classes)
    trainer = Trainer(model, cfg.train_config(), cfg.uncertainty_config())
    if cfg.resume:
        trainer.load_entries(checkpoint.load(cfg.resume))
        log.info("resumed from %s at epoch %d (step %d)", cfg.resume, trainer.epoch, trainer.step)
    metrics_path = out / "metrics.log"
    while trainer.epoch < cfg.epochs:
        em = trainer.train_epoch(data)
        with metrics_path.open("a") as fh:
            fh.write(em.log_line() + "\n")
        log.info(em.log_line())
        save_checkpoint(out / "epochs" / f"epoch_{em.epoch:03d}.ugn", trainer, cfg)
        save_checkpoint(out / "checkpoint.ugn", trainer, cfg)
    val_dir = cfg.path("val_dir")
    if val_dir.is_dir():
        cm = evaluate(model, load_dataset(val_dir, palette), cfg, palette)
        _, mean = miou(cm, cfg.absent_as_zero)
        with metrics_path.open("a") as fh:
            fh.write(f"final miou={mean:.6f}\n")
        log.info("validation miou=%.6f", mean)
    return 0


def _images(directory: Path) -> List[Tuple[str, np.ndarray]]:
    files = sorted(p for p in directory.iterdir() if p.stem.endswith("_sat") and p.suffix.lower() in (".png", ".ppm"))
    return [(p.stem[:-4], (read_rgb(p).astype(np.float32) / 255.0).transpose(2, 0, 1)) for p in files]


def cmd_infer(cfg: RunConfig) -> int:
    model, _ = model_from_checkpoint(cfg.path("checkpoint"))
    palette = load_palette(cfg)
    ucfg = cfg.uncertainty_config()
    dest = Path(cfg.output_dir) / "infer"
    dest.mkdir(parents=True, exist_ok=True)
    scale = 255.0 / math.log(model.num_classes)
    for stem, image in _images(cfg.path("infer_dir")):
        pred = predict_image(model, np.ascontiguousarray(image), ucfg, seed=cfg.seed)
        write_rgb(dest / f"{stem}_pred.png", encode_mask(pred.classes, palette))
        h = image.shape[1]
        for j, g in enumerate(pred.gammas):
            f = h // g.shape[0]
            heat = np.clip(np.round(g * scale), 0, 255).repeat(f, 0).repeat(f, 1)
            write_gray(dest / f"{stem}_gamma_l{j}.png", heat)
    log.info("wrote predictions to %s", dest)
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    palette = load_palette(cfg)
    samples = load_dataset(cfg.path("infer_dir"), palette)
    if cfg.predictions:
        cm = ConfusionMatrix(len(palette), palette.unknown)
        pdir = Path(cfg.predictions)
        for s in samples:
            pred = decode_mask(read_rgb(pdir / f"{s.stem}_pred.png"), palette)
            cm.accumulate(pred, s.mask, s.valid)
    else:
        model, _ = model_from_checkpoint(cfg.path("checkpoint"))
        cm = evaluate(model, samples, cfg, palette)
    text = report(cm, palette.names, cfg.absent_as_zero)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .selfcheck import run_all

    results = run_all(cfg.gradcheck_trials, cfg.seed, log=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)} passed, {len(failed)} failed")
    return 1 if failed else 0


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="ugn", description="Uncertainty-gated land-cover segmentation.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value config file")
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        cfg = config_mod.parse_config(args.config, rest)
        return HANDLERS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, FloatingPointError) as e:
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
