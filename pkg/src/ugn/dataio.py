"""Raster samples, palette codec, resolution reduction, loading, and the synthetic generator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import ShapeError

UNKNOWN_NAME = "unknown"


class DecodeError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class SegSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] int64
    valid: np.ndarray  # [H, W] bool
    stem: str = ""

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class PaletteEntry:
    index: int
    name: str
    rgb: Tuple[int, int, int]


class Palette:
    def __init__(self, entries: Sequence[PaletteEntry], unknown: Optional[int] = None):
        entries = sorted(entries, key=lambda e: e.index)
        if [e.index for e in entries] != list(range(len(entries))):
            raise ValueError("palette indices must be contiguous from 0")
        colors = [e.rgb for e in entries]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colors must be pairwise distinct")
        if unknown is None:
            named = [e.index for e in entries if e.name.lower() == UNKNOWN_NAME]
            unknown = named[0] if named else None
        if unknown is not None and unknown != len(entries) - 1:
            raise ValueError("the unknown class must be the last palette entry")
        self.entries = list(entries)
        self.unknown = unknown

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, Palette) and self.entries == other.entries and self.unknown == other.unknown

    @property
    def active(self) -> List[int]:
        return [e.index for e in self.entries if e.index != self.unknown]

    @property
    def num_classes(self) -> int:
        """Classes the network predicts (everything except unknown)."""
        return len(self.active)

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    def colors(self) -> np.ndarray:
        return np.array([e.rgb for e in self.entries], dtype=np.uint8)

    def subset(self, k: int) -> "Palette":
        """First ``k`` active classes, with unknown re-indexed to ``k``."""
        act = [e for e in self.entries if e.index != self.unknown]
        if k > len(act):
            raise ValueError(f"palette has only {len(act)} classes, {k} requested")
        entries = [PaletteEntry(i, e.name, e.rgb) for i, e in enumerate(act[:k])]
        if self.unknown is not None:
            u = self.entries[self.unknown]
            entries.append(PaletteEntry(k, u.name, u.rgb))
            return Palette(entries, unknown=k)
        return Palette(entries)

    def dumps(self) -> str:
        lines = ["# index,name,R,G,B"]
        lines += [f"{e.index},{e.name},{e.rgb[0]},{e.rgb[1]},{e.rgb[2]}" for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "Palette":
        entries = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 5:
                raise ValueError(f"palette line {lineno}: expected index,name,R,G,B")
            idx, name, *rgb = parts
            try:
                rgb_t = tuple(int(v) for v in rgb)
                entry = PaletteEntry(int(idx), name, rgb_t)
            except ValueError as e:
                raise ValueError(f"palette line {lineno}: {e}") from None
            if any(not 0 <= v <= 255 for v in rgb_t):
                raise ValueError(f"palette line {lineno}: color out of 0..255")
            entries.append(entry)
        return cls(entries)

    @classmethod
    def load(cls, path) -> "Palette":
        return cls.parse(Path(path).read_text())

    @classmethod
    def default(cls) -> "Palette":
        return cls.parse(resources.files("ugn.palettes").joinpath("deepglobe.txt").read_text())


def _pack(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


def decode_mask(rgb: np.ndarray, palette: Palette, coerce: bool = False) -> np.ndarray:
    """``[H, W, 3]`` uint8 color image to an integer class mask."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[-1] != 3 or rgb.dtype != np.uint8:
        raise DecodeError(f"expected 8-bit RGB [H, W, 3], got {rgb.dtype} {rgb.shape}")
    keys = _pack(palette.colors())
    order = np.argsort(keys)
    packed = _pack(rgb)
    pos = np.clip(np.searchsorted(keys[order], packed), 0, len(keys) - 1)
    hit = keys[order][pos] == packed
    mask = order[pos]
    if not hit.all():
        if not coerce or palette.unknown is None:
            y, x = np.argwhere(~hit)[0]
            raise DecodeError(f"pixel ({y}, {x}) has off-palette color {tuple(int(v) for v in rgb[y, x])}")
        mask = np.where(hit, mask, palette.unknown)
    return mask.astype(np.int64)


def encode_mask(mask: np.ndarray, palette: Palette) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= len(palette)):
        raise ValueError(f"mask values must lie in [0, {len(palette)})")
    return palette.colors()[mask]


def valid_mask(mask: np.ndarray, palette: Palette) -> np.ndarray:
    if palette.unknown is None:
        return np.ones(mask.shape, bool)
    return mask != palette.unknown


def downscale(s: SegSample, factor: int) -> SegSample:
    """Area-mean image reduction; mask and validity take each block's top-left cell."""
    h, w = s.shape
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} is not divisible by {factor}")
    c = s.image.shape[0]
    img = s.image.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return SegSample(
        img.astype(s.image.dtype),
        s.mask[::factor, ::factor].copy(),
        s.valid[::factor, ::factor].copy(),
        s.stem,
    )


# ------------------------------------------------------------------------ IO


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as e:
        raise OSError(f"cannot read {path}: {e}") from e


def write_rgb(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(path)


def write_gray(path, values: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(values, dtype=np.uint8), "L").save(path)


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)


def save_sample(directory, s: SegSample, palette: Palette) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_rgb(d / f"{s.stem}_sat.png", image_to_uint8(s.image))
    write_rgb(d / f"{s.stem}_mask.png", encode_mask(s.mask, palette))


_SUFFIXES = (".png", ".ppm")


def load_dataset(directory, palette: Palette, coerce: bool = False) -> List[SegSample]:
    """Load ``<stem>_sat.<ext>`` / ``<stem>_mask.<ext>`` pairs sorted by stem."""
    d = Path(directory)
    if not d.is_dir():
        raise OSError(f"dataset directory {d} does not exist")
    sats, masks = {}, {}
    for f in d.iterdir():
        if f.suffix.lower() not in _SUFFIXES:
            continue
        if f.stem.endswith("_sat"):
            sats[f.stem[:-4]] = f
        elif f.stem.endswith("_mask"):
            masks[f.stem[:-5]] = f
    orphans = sorted(str(sats[k]) for k in sats.keys() - masks.keys())
    orphans += sorted(str(masks[k]) for k in masks.keys() - sats.keys())
    if orphans:
        raise DatasetError("orphan files without a partner: " + ", ".join(orphans))
    out = []
    for stem in sorted(sats):
        img = read_rgb(sats[stem])
        rgb = read_rgb(masks[stem])
        if img.shape != rgb.shape:
            raise DatasetError(f"{stem}: image {img.shape[:2]} and mask {rgb.shape[:2]} extents differ")
        mask = decode_mask(rgb, palette, coerce)
        image = (img.astype(np.float32) / 255.0).transpose(2, 0, 1)
        out.append(SegSample(np.ascontiguousarray(image), mask, valid_mask(mask, palette), stem))
    return out


# ----------------------------------------------------------------- synthetic

# Per-class base colors for rendering (not the label palette); chosen far apart.
_BASE_COLORS = np.array(
    [
        [0.80, 0.25, 0.20],
        [0.25, 0.70, 0.25],
        [0.20, 0.30, 0.85],
        [0.85, 0.80, 0.25],
        [0.30, 0.80, 0.85],
        [0.80, 0.35, 0.80],
        [0.45, 0.45, 0.45],
    ],
    dtype=np.float64,
)
_TEXTURE_FREQ = np.array([1.0, 2.0, 3.0, 4.5, 6.0, 7.5, 9.0])


def synth_generate(
    n: int,
    size: Tuple[int, int],
    k: int,
    seed: int,
    unknown_fraction: float = 0.02,
    points_per_image: Optional[int] = None,
    noise_std: float = 0.05,
) -> List[SegSample]:
    """Voronoi land-cover mosaics with exact masks.

    Class ``k`` marks unknown pixels, which appear as bright cloud-like blobs.
    Every image contains all ``k`` classes: the first ``k`` Voronoi sites get a
    permutation of the classes, the rest are drawn at random.
    """
    h, w = size
    if h % 32 or w % 32:
        raise ValueError(f"size {h}x{w} must be divisible by 32")
    if k < 2:
        raise ValueError("need k >= 2 classes")
    if k > len(_BASE_COLORS):
        raise ValueError(f"at most {len(_BASE_COLORS)} synthetic classes are available, {k} requested")
    m = points_per_image or max(k + 2, round(h * w / 512))
    yy, xx = np.mgrid[0:h, 0:w]
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        flat_sites = rng.choice(h * w, size=m, replace=False)
        sy, sx = np.divmod(flat_sites, w)
        d2 = (yy[..., None] - sy) ** 2 + (xx[..., None] - sx) ** 2
        region = np.argmin(d2, axis=-1)
        site_class = np.concatenate([rng.permutation(k), rng.integers(0, k, m - k)])
        mask = site_class[region]

        img = _BASE_COLORS[mask].transpose(2, 0, 1).copy()
        theta = rng.uniform(0, np.pi, size=k)
        phase = rng.uniform(0, 2 * np.pi, size=k)
        for c in range(k):
            sel = mask == c
            wave = np.sin(
                2 * np.pi * _TEXTURE_FREQ[c] * (xx * np.cos(theta[c]) + yy * np.sin(theta[c])) / w + phase[c]
            )
            img[:, sel] += 0.06 * wave[sel]
        img += rng.normal(0, noise_std, img.shape)

        if unknown_fraction > 0:
            field = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 16, mode="wrap")
            cut = np.quantile(field, 1 - unknown_fraction)
            blob = field > cut
            mask = np.where(blob, k, mask)
            img[:, blob] = 0.95 + rng.normal(0, 0.02, (3, int(blob.sum())))

        img = np.clip(img, 0, 1).astype(np.float32)
        out.append(SegSample(img, mask.astype(np.int64), mask != k, f"synth_{seed}_{i:04d}"))
    return out
