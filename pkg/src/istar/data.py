"""Image I/O, bicubic degradation and training patch sampling.

Images are float32 arrays of shape (3, H, W) with values in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


# -- PNG ---------------------------------------------------------------------

def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format != "PNG":
            raise ValueError(f"{path}: not a PNG file")
        if im.mode != "RGB":
            raise ValueError(f"{path}: expected an 8-bit RGB PNG, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / np.float32(255), dtype=np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and round half away from zero onto the 8-bit grid."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    return (to_uint8(img) / np.float32(255)).astype(np.float32)


def save_png(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {img.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


# -- bicubic -------------------------------------------------------------------

def cubic(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return np.where(ax <= 1, (a + 2) * ax3 - (a + 3) * ax2 + 1,
                    np.where(ax < 2, a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, 0.0))


def resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """(out_size, in_size) interpolation matrix along one axis.

    Pixel centres are aligned (u = (i + 0.5) / s - 0.5).  When shrinking
    the kernel is stretched by 1/s, which low-pass filters before
    decimation.  Taps beyond the border are folded onto the edge pixel.
    """
    s = out_size / in_size
    stretch = min(s, 1.0)
    width = 4.0 / stretch
    M = np.zeros((out_size, in_size))
    for i in range(out_size):
        u = (i + 0.5) / s - 0.5
        left = math.floor(u - width / 2)
        taps = np.arange(left, left + int(math.ceil(width)) + 2)
        w = stretch * cubic(stretch * (u - taps))
        w /= w.sum()
        np.add.at(M[i], np.clip(taps, 0, in_size - 1), w)
    return M


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        return bicubic_resize(img[None], out_h, out_w)[0]
    _, h, w = img.shape
    if min(h, w) < 4 or out_h < 1 or out_w < 1:
        raise ValueError(f"cannot resize {h}x{w} to {out_h}x{out_w}")
    Mh = resize_matrix(h, out_h)
    Mw = resize_matrix(w, out_w)
    out = np.einsum("ih,chw,jw->cij", Mh, img.astype(np.float64), Mw, optimize=True)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float32)


def bicubic_upscale(lr: np.ndarray, scale: int) -> np.ndarray:
    return np.clip(bicubic_resize(lr, lr.shape[-2] * scale, lr.shape[-1] * scale), 0, 1)


# -- pairs and patches ---------------------------------------------------------

@dataclass
class ImagePair:
    hr: np.ndarray
    lr: np.ndarray
    scale: int
    source: str = ""


def crop_to_multiple(hr: np.ndarray, scale: int) -> np.ndarray:
    _, h, w = hr.shape
    dh, dw = h % scale, w % scale
    return hr[:, dh // 2:h - (dh - dh // 2), dw // 2:w - (dw - dw // 2)]


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic downscale by ``scale``; hr extents must be multiples of scale."""
    _, h, w = hr.shape
    return np.clip(bicubic_resize(hr, h // scale, w // scale), 0, 1).astype(np.float32)


def make_pair(hr: np.ndarray, scale: int, source: str = "") -> ImagePair:
    hr = np.ascontiguousarray(crop_to_multiple(np.asarray(hr, dtype=np.float32), scale))
    return ImagePair(hr=hr, lr=degrade(hr, scale), scale=scale, source=source)


@dataclass
class PatchSampler:
    """Deterministic patch stream: batch ``step`` depends only on (seed, step)."""

    patch: int = 48
    seed: int = 0
    augment: bool = True
    step: int = 0


def sample_batch(sampler: PatchSampler, pairs: list[ImagePair], batch: int):
    """Cut ``batch`` aligned LR/HR patches and advance the sampler one step.

    Images are drawn in a fresh seeded permutation each pass over the
    corpus; offsets and the rotation/flip augmentation come from a
    generator keyed on (seed, step).
    """
    if not pairs:
        raise ValueError("empty dataset")
    p, n = sampler.patch, len(pairs)
    r = pairs[0].scale
    rng = np.random.default_rng([sampler.seed, sampler.step, 1])
    lrs, hrs = [], []
    for i in range(batch):
        flat = sampler.step * batch + i
        perm = np.random.default_rng([sampler.seed, flat // n, 0]).permutation(n)
        pair = pairs[perm[flat % n]]
        _, h, w = pair.lr.shape
        if h < p or w < p:
            raise ValueError(f"{pair.source or 'image'}: {h}x{w} smaller than patch {p}")
        y, x = int(rng.integers(0, h - p + 1)), int(rng.integers(0, w - p + 1))
        lr = pair.lr[:, y:y + p, x:x + p]
        hr = pair.hr[:, r * y:r * (y + p), r * x:r * (x + p)]
        if sampler.augment:
            k, flip = int(rng.integers(0, 4)), bool(rng.integers(0, 2))
            lr, hr = np.rot90(lr, k, axes=(1, 2)), np.rot90(hr, k, axes=(1, 2))
            if flip:
                lr, hr = lr[:, :, ::-1], hr[:, :, ::-1]
        lrs.append(lr)
        hrs.append(hr)
    sampler.step += 1
    return (np.ascontiguousarray(np.stack(lrs), dtype=np.float32),
            np.ascontiguousarray(np.stack(hrs), dtype=np.float32))


# -- datasets ------------------------------------------------------------------

def load_dataset(root, scale: int, use_cache: bool = True) -> list[ImagePair]:
    """Read ``<root>/HR/*.png``; LR comes from ``<root>/LRx{scale}`` when cached."""
    root = Path(root)
    files = sorted((root / "HR").glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG files under {root / 'HR'}")
    pairs = []
    for f in files:
        pair = make_pair(load_png(f), scale, source=f.stem)
        cached = root / f"LRx{scale}" / f.name
        if use_cache and cached.exists():
            lr = load_png(cached)
            if lr.shape != pair.lr.shape:
                raise ValueError(f"{cached}: cached LR has shape {lr.shape}, expected {pair.lr.shape}")
            pair.lr = lr
        pairs.append(pair)
    return pairs


def write_lr_cache(root, scale: int) -> int:
    root = Path(root)
    n = 0
    for f in sorted((root / "HR").glob("*.png")):
        save_png(make_pair(load_png(f), scale).lr, root / f"LRx{scale}" / f.name)
        n += 1
    return n


def _smooth_noise(size: int, cell: int, rng: np.random.Generator) -> np.ndarray:
    n = size // cell + 4
    up = bicubic_resize(rng.standard_normal((1, n, n)), n * cell, n * cell)[0]
    return up[2 * cell:2 * cell + size, 2 * cell:2 * cell + size]


def _motif(kind: str, size: int, rng: np.random.Generator, yy, xx) -> np.ndarray:
    theta = rng.uniform(0, np.pi)
    along = np.cos(theta) * xx + np.sin(theta) * yy
    if kind == "gradient":
        return along / np.sqrt(2) + 0.5 * yy * xx
    if kind == "checker":
        cell = rng.integers(5, 14)
        v = -np.sin(theta) * xx + np.cos(theta) * yy
        return (np.floor(along * size / cell) + np.floor(v * size / cell)) % 2
    if kind == "stripes":
        return (np.sin(2 * np.pi * rng.uniform(4, 12) * along) > 0).astype(float)
    if kind == "rings":
        cy, cx = rng.uniform(0.3, 0.7, 2)
        rad = np.hypot(yy - cy, xx - cx)
        return (np.sin(2 * np.pi * rng.uniform(5, 10) * rad) > 0).astype(float)
    if kind == "shapes":
        return np.zeros((size, size))
    if kind == "texture":
        return 0.5 + 0.35 * _smooth_noise(size, 8, rng) + 0.15 * np.sin(2 * np.pi * 6 * along)
    raise ValueError(f"unknown pattern {kind!r}")


def synthetic_image(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """A layered scene: a two-colour motif, occluding shapes, then fine grain.

    Every kind carries edges and texture so that no image is trivially easy
    for interpolation; ``kind`` only picks the dominant background motif.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    mask = np.clip(_motif(kind, size, rng, yy, xx), 0, 1)
    img = c0[:, None, None] * (1 - mask) + c1[:, None, None] * mask
    for _ in range(rng.integers(6, 12) if kind == "shapes" else rng.integers(2, 6)):
        col = rng.uniform(0, 1, 3)[:, None, None]
        cy, cx, rr = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.25)
        if rng.integers(0, 2):
            m = np.hypot(yy - cy, xx - cx) < rr
        else:
            m = (np.abs(yy - cy) < rr) & (np.abs(xx - cx) < rr * rng.uniform(0.3, 1.5))
        img = np.where(m[None], col, img)
    img = img + 0.08 * _smooth_noise(size, 2, rng)[None]
    return np.clip(img, 0, 1).astype(np.float32)


PATTERNS = ("gradient", "checker", "stripes", "rings", "shapes", "texture")


def make_corpus(count: int = 20, size: int = 96, seed: int = 0) -> list[np.ndarray]:
    """Offline mini-corpus of synthetic HR images, quantized to 8 bits."""
    rng = np.random.default_rng(seed)
    return [quantize(synthetic_image(PATTERNS[i % len(PATTERNS)], size, rng))
            for i in range(count)]


def write_corpus(root, count: int = 20, size: int = 96, seed: int = 0) -> list[Path]:
    out = []
    for i, img in enumerate(make_corpus(count, size, seed)):
        path = Path(root) / "HR" / f"img_{i:03d}.png"
        save_png(img, path)
        out.append(path)
    return out
