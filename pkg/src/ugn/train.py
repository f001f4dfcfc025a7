"""Per-level loss, WNAdam, learning-rate schedule, augmentation, and the epoch loop."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from . import nn
from . import tensor as T
from .dataio import SegSample
from .model import GateLevelOutput, UGNet, downsample_labels
from .tensor import Tensor
from .uncertainty import UncertaintyConfig, uncertainty_loss


@dataclass
class TrainConfig:
    epochs: int = 30
    crops_per_image: int = 8
    crop_size: int = 64
    lr: float = 0.5
    lr_milestones: Tuple[float, ...] = (0.6, 0.85)
    lr_factors: Tuple[float, ...] = (0.1, 0.01)
    hue_shift: float = 0.05
    contrast: Tuple[float, float] = (0.8, 1.25)
    brightness: float = 0.1
    noise_std: float = 0.02
    lambda_unc: float = 1.0
    lambda_ce: float = 1.0
    beta1: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.crop_size % 32:
            raise ValueError(f"crop_size {self.crop_size} must be divisible by 32")
        if self.epochs < 1 or self.crops_per_image < 1:
            raise ValueError("epochs and crops_per_image must be >= 1")
        if len(self.lr_milestones) != len(self.lr_factors):
            raise ValueError("lr_milestones and lr_factors must have equal length")
        if not 0 < self.contrast[0] <= self.contrast[1]:
            raise ValueError("contrast range must be positive and ordered")
        if not 0 <= self.hue_shift <= 0.5 or self.brightness < 0 or self.noise_std < 0:
            raise ValueError("augmentation ranges out of domain")
        if not 0 <= self.beta1 < 1:
            raise ValueError("beta1 must lie in [0, 1)")


# ----------------------------------------------------------------------- loss


def level_losses(
    levels: Sequence[GateLevelOutput], labels: np.ndarray, valid: np.ndarray, cfg: TrainConfig
) -> List[Tuple[int, Tensor]]:
    """``(level, lambda_unc * L_unc + lambda_ce * mean_t CE(l_hat_t))`` per level."""
    out = []
    in_h = labels.shape[-2]
    for lv in levels:
        t, n, c, h, w = lv.lhat.shape
        f = in_h // h
        lab = downsample_labels(labels, f)
        val = downsample_labels(valid, f)
        terms = []
        if cfg.lambda_unc:
            terms.append(T.scale(uncertainty_loss(lv.gamma, val), cfg.lambda_unc))
        if cfg.lambda_ce:
            flat = T.reshape(lv.lhat, (t * n, c, h, w))
            lab_t = np.broadcast_to(lab, (t,) + lab.shape).reshape(t * n, h, w)
            val_t = np.broadcast_to(val, (t,) + val.shape).reshape(t * n, h, w)
            terms.append(T.scale(nn.crossentropy_from_logits(flat, lab_t, val_t), cfg.lambda_ce))
        loss = terms[0] if terms else Tensor(np.zeros((), dtype=lv.l.dtype))
        for term in terms[1:]:
            loss = T.add(loss, term)
        out.append((lv.level, loss))
    return out


def total_loss(levels: Sequence[GateLevelOutput], labels: np.ndarray, valid: np.ndarray, cfg: TrainConfig) -> Tensor:
    parts = level_losses(levels, labels, valid, cfg)
    loss = parts[0][1]
    for _, p in parts[1:]:
        loss = T.add(loss, p)
    return loss


# ------------------------------------------------------------------ optimizer


class WNAdam:
    """Adam-style first moment with a WNGrad accumulator as the step normalizer.

    Per coordinate::

        m <- beta1 * m + (1 - beta1) * g
        m_hat <- m / (1 - beta1 ** t)
        b <- b + g ** 2 / b
        p <- p - lr * m_hat / b

    with ``t`` counting steps from 1 and ``b`` starting at 1.
    """

    def __init__(self, params: Iterable[Tuple[str, Tensor]], beta1: float = 0.9):
        self.params: Dict[str, Tensor] = dict(params)
        self.beta1 = beta1
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.b = {k: np.ones_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        grads = {}
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k}; step rejected")
            grads[k] = g
        self.t += 1
        b1 = self.beta1
        corr = 1.0 - b1**self.t
        for k, p in self.params.items():
            g = grads[k]
            dt = p.data.dtype
            m = self.m[k] = (b1 * self.m[k] + (1.0 - b1) * g).astype(dt)
            b = self.b[k] = (self.b[k] + g * g / self.b[k]).astype(dt)
            p.data = (p.data - lr * (m / corr) / b).astype(dt)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def lr_schedule(epoch: int, epochs: int, base: float, milestones=(0.6, 0.85), factors=(0.1, 0.01)) -> float:
    """Piecewise-constant decay: ``base * factors[i]`` from epoch ``ceil(milestones[i] * epochs)`` on."""
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    rate = base
    for frac, factor in zip(milestones, factors):
        if epoch >= math.ceil(frac * epochs - 1e-9):
            rate = base * factor
    return rate


# --------------------------------------------------------------- augmentation


def rotate90(s: SegSample, k: int) -> SegSample:
    return SegSample(
        np.rot90(s.image, k, axes=(1, 2)).copy(), np.rot90(s.mask, k).copy(), np.rot90(s.valid, k).copy(), s.stem
    )


def flip(s: SegSample, axis: int) -> SegSample:
    """``axis`` 0 flips rows (vertical), 1 flips columns (horizontal)."""
    return SegSample(np.flip(s.image, axis + 1).copy(), np.flip(s.mask, axis).copy(), np.flip(s.valid, axis).copy(), s.stem)


def random_crop(s: SegSample, size: int, rng: np.random.Generator) -> SegSample:
    h, w = s.shape
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than source {h}x{w}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return SegSample(
        s.image[:, y : y + size, x : x + size].copy(),
        s.mask[y : y + size, x : x + size].copy(),
        s.valid[y : y + size, x : x + size].copy(),
        s.stem,
    )


def geometric_augment(s: SegSample, size: int, rng: np.random.Generator) -> SegSample:
    s = random_crop(s, size, rng)
    s = rotate90(s, int(rng.integers(0, 4)))
    if rng.random() < 0.5:
        s = flip(s, 1)
    if rng.random() < 0.5:
        s = flip(s, 0)
    return s


def shift_hue(image: np.ndarray, delta: float) -> np.ndarray:
    """Rotate hue by ``delta`` (fraction of the full circle) on a ``[3, H, W]`` image."""
    hsv = rgb_to_hsv(np.clip(image, 0, 1).transpose(1, 2, 0))
    hsv[..., 0] = np.mod(hsv[..., 0] + delta, 1.0)
    return hsv_to_rgb(hsv).transpose(2, 0, 1).astype(image.dtype)


def photometric_augment(image: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    img = image.astype(np.float64)
    img = img + rng.normal(0.0, cfg.noise_std, img.shape)
    img = shift_hue(np.clip(img, 0, 1), rng.uniform(-cfg.hue_shift, cfg.hue_shift))
    factor = rng.uniform(*cfg.contrast)
    mu = img.mean()
    img = (img - mu) * factor + mu
    img = img + rng.uniform(-cfg.brightness, cfg.brightness)
    return np.clip(img, 0, 1).astype(image.dtype)


def augment_sample(s: SegSample, cfg: TrainConfig, rng: np.random.Generator) -> SegSample:
    s = geometric_augment(s, cfg.crop_size, rng)
    return SegSample(photometric_augment(s.image, cfg, rng), s.mask, s.valid, s.stem)


# ---------------------------------------------------------------------- loop

_CROP_STREAM, _SAMPLE_STREAM, _ORDER_STREAM = 1, 2, 3


def crop_rng(seed: int, epoch: int, image: int, crop: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _CROP_STREAM, epoch, image, crop]))


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    gamma: List[float]
    lr: float
    step_losses: List[float] = field(default_factory=list)

    def log_line(self) -> str:
        gam = " ".join(f"gamma_l{j}={g:.6f}" for j, g in enumerate(self.gamma))
        return f"epoch={self.epoch} loss={self.loss:.6f} {gam} lr={self.lr:.6g}"


class Trainer:
    """Owns the model, optimizer state, and step counter for one training run."""

    def __init__(self, model: UGNet, cfg: TrainConfig, ucfg: UncertaintyConfig):
        self.model = model
        self.cfg = cfg
        self.ucfg = ucfg
        self.opt = WNAdam(model.named_parameters(), cfg.beta1)
        self.step = 0
        self.epoch = 0

    def make_batch(self, dataset: Sequence[SegSample], index: int) -> SegSample:
        crops = [
            augment_sample(dataset[index], self.cfg, crop_rng(self.cfg.seed, self.epoch, index, k))
            for k in range(self.cfg.crops_per_image)
        ]
        return SegSample(
            np.stack([c.image for c in crops]),
            np.stack([c.mask for c in crops]),
            np.stack([c.valid for c in crops]),
        )

    def train_step(self, batch: SegSample, lr: float) -> Tuple[float, List[float]]:
        model = self.model
        model.train()
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, _SAMPLE_STREAM, self.step]))
        labels = batch.mask if self.ucfg.gamma_class_mode == "label" else None
        levels = model.forward(Tensor(batch.image), self.ucfg, rng, labels)
        parts = level_losses(levels, batch.mask, batch.valid, self.cfg)
        for level, part in parts:
            if not np.isfinite(part.data):
                raise FloatingPointError(f"non-finite loss at level {level} (step {self.step})")
        loss = parts[0][1]
        for _, p in parts[1:]:
            loss = T.add(loss, p)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step(lr)
        self.step += 1
        gammas = [0.0] * len(levels)
        for lv in levels:
            gammas[lv.level] = float(lv.gamma.data.mean())
        return float(loss.data), gammas

    def train_epoch(self, dataset: Sequence[SegSample]) -> EpochMetrics:
        if not dataset:
            raise ValueError("empty dataset")
        lr = lr_schedule(self.epoch, self.cfg.epochs, self.cfg.lr, self.cfg.lr_milestones, self.cfg.lr_factors)
        order = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, _ORDER_STREAM, self.epoch]))
        losses, gammas = [], []
        for index in order.permutation(len(dataset)):
            loss, gam = self.train_step(self.make_batch(dataset, int(index)), lr)
            losses.append(loss)
            gammas.append(gam)
        self.epoch += 1
        return EpochMetrics(self.epoch, float(np.mean(losses)), list(np.mean(gammas, axis=0)), lr, losses)

    # -------------------------------------------------------- checkpointing

    def state_entries(self) -> List[Tuple[str, np.ndarray]]:
        entries = [(f"param/{k}", p.data) for k, p in self.model.named_parameters()]
        entries += [(f"buffer/{k}", b) for k, b in self.model.named_buffers()]
        entries += [(f"optim/m/{k}", v) for k, v in self.opt.m.items()]
        entries += [(f"optim/b/{k}", v) for k, v in self.opt.b.items()]
        entries += [
            ("optim/t", np.array(self.opt.t)),
            ("optim/beta1", np.array(self.opt.beta1)),
            ("train/step", np.array(self.step)),
            ("train/epoch", np.array(self.epoch)),
        ]
        return entries

    def load_entries(self, entries: Dict[str, np.ndarray]) -> None:
        load_model_entries(self.model, entries)
        for k in self.opt.m:
            self.opt.m[k] = entries[f"optim/m/{k}"].astype(self.opt.m[k].dtype).copy()
            self.opt.b[k] = entries[f"optim/b/{k}"].astype(self.opt.b[k].dtype).copy()
        self.opt.t = int(entries["optim/t"])
        # beta1 comes from the config; the stored copy is float32 and only checked
        if np.float32(self.opt.beta1) != entries["optim/beta1"]:
            raise ValueError(f"checkpoint beta1 {float(entries['optim/beta1'])} differs from configured {self.opt.beta1}")
        self.step = int(entries["train/step"])
        self.epoch = int(entries["train/epoch"])


def load_model_entries(model: UGNet, entries: Dict[str, np.ndarray]) -> None:
    for k, p in model.named_parameters():
        src = entries[f"param/{k}"]
        if src.shape != p.shape:
            raise ValueError(f"checkpoint shape {src.shape} for {k} does not match model {p.shape}")
        p.data = src.astype(p.dtype).copy()
    for k, b in model.named_buffers():
        b[...] = entries[f"buffer/{k}"]


def model_checksum(model: UGNet) -> str:
    h = hashlib.sha256()
    for k, p in model.named_parameters():
        h.update(k.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    for k, b in model.named_buffers():
        h.update(k.encode())
        h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()
