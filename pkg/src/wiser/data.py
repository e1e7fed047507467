"""Image decoding, geometry, augmentation, and dataset ingestion.

Pixels travel through the pipeline as float32 arrays of shape
(3, H, W) with values in [0, 1].  Files on disk are binary PPM (P6,
maxval 255); a dataset is a directory tree

    <root>/classes.txt                 one class name per line
    <root>/<split>/<index>_<name>/     one directory per class
    <root>/<split>/<index>_<name>/<id>.ppm

Augmentation draws all randomness from a per-(sample, epoch) substream,
so any sample's augmented pixels can be replayed exactly without
touching the rest of the run, and samples could be prepared in any
order or in parallel without changing the result.  Draw order within
one augmentation pass is fixed: crop-kind coin, crop offsets, flip
coin, photometric factors, color shift.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .rng import Stream


class FormatError(ValueError):
    """Malformed image bytes or dataset layout."""


# ---------------------------------------------------------------------------
# PPM codec (P6, maxval 255)

_WS = b" \t\r\n\x0b\x0c"


def decode_ppm(data: bytes) -> np.ndarray:
    """P6 bytes -> (3, H, W) float32 in [0, 1].

    Header tokens may be separated by any whitespace and `#` comments;
    exactly one whitespace byte separates the maxval from the payload.
    """
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c in _WS:
                pos += 1
            elif c == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and data[pos:pos + 1] not in _WS and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"truncated header at byte {start}")
        return data[start:pos]

    if token() != b"P6":
        raise FormatError("not a P6 image (bad magic)")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except FormatError:
        raise  # truncation; already carries the byte offset
    except ValueError as e:
        raise FormatError(f"non-numeric header field near byte {pos}") from e
    if w < 1 or h < 1:
        raise FormatError(f"bad dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255)")
    if pos >= len(data) or data[pos:pos + 1] not in _WS:
        raise FormatError(f"missing whitespace after maxval at byte {pos}")
    pos += 1
    need = 3 * w * h
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"payload has {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def encode_ppm(pixels: np.ndarray) -> bytes:
    """(3, H, W) floats in [0, 1] -> P6 bytes (values rounded to 8 bits)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise FormatError(f"expected (3, H, W), got {pixels.shape}")
    if not np.isfinite(pixels).all() or pixels.min() < 0 or pixels.max() > 1:
        raise FormatError("pixel values must be finite and within [0, 1]")
    _, h, w = pixels.shape
    u8 = np.clip(np.round(pixels.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + u8.transpose(1, 2, 0).tobytes()


# ---------------------------------------------------------------------------
# geometry

def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centered source coordinates."""
    c, h, w = pixels.shape
    if out_h < 1 or out_w < 1:
        raise FormatError(f"bad target size {out_h}x{out_w}")
    src = pixels.astype(np.float64)
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    p00 = src[:, y0][:, :, x0]
    p01 = src[:, y0][:, :, x1]
    p10 = src[:, y1][:, :, x0]
    p11 = src[:, y1][:, :, x1]
    top = p00 * (1.0 - wx) + p01 * wx
    bot = p10 * (1.0 - wx) + p11 * wx
    return (top * (1.0 - wy) + bot * wy).astype(np.float32)


def resize_min_side(pixels: np.ndarray, target: int) -> np.ndarray:
    """Scale so the shorter side equals `target`, preserving aspect ratio
    (long side rounded to nearest); identity when already at size."""
    _, h, w = pixels.shape
    if target < 1:
        raise FormatError(f"bad target {target}")
    if h <= w:
        nh, nw = target, int(math.floor(w * target / h + 0.5))
    else:
        nh, nw = int(math.floor(h * target / w + 0.5)), target
    if (nh, nw) == (h, w):
        return pixels.copy()
    return bilinear_resize(pixels, nh, nw)


def _crop_size(size) -> Tuple[int, int]:
    if isinstance(size, (int, np.integer)):
        return int(size), int(size)
    return int(size[0]), int(size[1])


def center_crop(pixels: np.ndarray, size) -> np.ndarray:
    th, tw = _crop_size(size)
    _, h, w = pixels.shape
    if th > h or tw > w:
        raise FormatError(f"crop {th}x{tw} exceeds image {h}x{w}")
    oy, ox = (h - th) // 2, (w - tw) // 2
    return pixels[:, oy:oy + th, ox:ox + tw].copy()


def random_crop(pixels: np.ndarray, size, stream: Stream) -> np.ndarray:
    """Uniform window; the vertical offset is drawn before the horizontal."""
    th, tw = _crop_size(size)
    _, h, w = pixels.shape
    if th > h or tw > w:
        raise FormatError(f"crop {th}x{tw} exceeds image {h}x{w}")
    oy = int(stream.integers(1, 0, h - th + 1)[0])
    ox = int(stream.integers(1, 0, w - tw + 1)[0])
    return pixels[:, oy:oy + th, ox:ox + tw].copy()


def scale_aspect_crop(pixels: np.ndarray, size: int, stream: Stream,
                      area_range=(0.08, 1.0), aspect_range=(3.0 / 4.0, 4.0 / 3.0),
                      attempts: int = 10) -> np.ndarray:
    """Random area fraction and log-uniform aspect ratio, then resize to
    a square of `size`; falls back to a center min-side crop when no
    candidate fits after `attempts` tries."""
    _, h, w = pixels.shape
    size = int(size)
    for _ in range(attempts):
        frac = area_range[0] + stream.uniform(1)[0] * (area_range[1] - area_range[0])
        la, lb = math.log(aspect_range[0]), math.log(aspect_range[1])
        aspect = math.exp(la + stream.uniform(1)[0] * (lb - la))
        target = frac * h * w
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 1 <= ch <= h and 1 <= cw <= w:
            oy = int(stream.integers(1, 0, h - ch + 1)[0])
            ox = int(stream.integers(1, 0, w - cw + 1)[0])
            window = pixels[:, oy:oy + ch, ox:ox + cw]
            return bilinear_resize(window, size, size)
    side = min(h, w)
    return bilinear_resize(center_crop(pixels, side), size, size)


def flip_horizontal(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, :, ::-1].copy()


def ten_crop(pixels: np.ndarray, size) -> List[np.ndarray]:
    """Four corners + center, then the same five mirrored; fixed order
    [tl, tr, bl, br, c, tl*, tr*, bl*, br*, c*]."""
    th, tw = _crop_size(size)
    _, h, w = pixels.shape
    if th > h or tw > w:
        raise FormatError(f"crop {th}x{tw} exceeds image {h}x{w}")
    offsets = [(0, 0), (0, w - tw), (h - th, 0), (h - th, w - tw),
               ((h - th) // 2, (w - tw) // 2)]
    crops = [pixels[:, oy:oy + th, ox:ox + tw].copy() for oy, ox in offsets]
    return crops + [flip_horizontal(c) for c in crops]


# ---------------------------------------------------------------------------
# photometric

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32).reshape(3, 1, 1)


def photometric_distort(pixels: np.ndarray, stream: Stream,
                        brightness: float = 0.4, contrast: float = 0.4,
                        saturation: float = 0.4) -> np.ndarray:
    """Brightness shift, contrast scale about the image mean, saturation
    blend toward the luma gray image, in that order, each clamped to
    [0, 1].  A zero amplitude skips its transform entirely (bit-exact
    identity at all-zero amplitudes)."""
    for name, a in (("brightness", brightness), ("contrast", contrast),
                    ("saturation", saturation)):
        if not (0.0 <= a <= 1.0):
            raise FormatError(f"{name} amplitude must lie in [0, 1], got {a}")
    x = pixels
    if brightness > 0:
        delta = np.float32((stream.uniform(1)[0] * 2.0 - 1.0) * brightness)
        x = np.clip(x + delta, 0.0, 1.0)
    if contrast > 0:
        f = np.float32(1.0 + (stream.uniform(1)[0] * 2.0 - 1.0) * contrast)
        m = x.mean(dtype=np.float64).astype(np.float32)
        x = np.clip((x - m) * f + m, 0.0, 1.0)
    if saturation > 0:
        f = np.float32(1.0 + (stream.uniform(1)[0] * 2.0 - 1.0) * saturation)
        gray = (x * _LUMA).sum(axis=0, keepdims=True)
        x = np.clip(x * f + gray * (np.float32(1.0) - f), 0.0, 1.0)
    return x if x is not pixels else pixels.copy()


# ---------------------------------------------------------------------------
# PCA color augmentation

def jacobi_eigh3(matrix: np.ndarray, tol: float = 1e-12, max_sweeps: int = 64):
    """Eigendecomposition of a symmetric 3x3 by cyclic Jacobi rotations.

    Returns (eigenvalues desc, eigenvectors as columns).  Iterates until
    the off-diagonal Frobenius mass falls below `tol`.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.shape != (3, 3):
        raise FormatError(f"expected a 3x3 matrix, got {a.shape}")
    if np.abs(a - a.T).max() > 1e-9:
        raise FormatError("matrix is not symmetric")
    a = (a + a.T) / 2.0
    v = np.eye(3)
    for _ in range(max_sweeps):
        off = math.sqrt(a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2)
        if off < tol:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if abs(apq) < tol * 1e-3:
                continue
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


def color_covariance(samples) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and 3x3 covariance over every pixel of `samples`."""
    n = 0
    s1 = np.zeros(3, dtype=np.float64)
    s2 = np.zeros((3, 3), dtype=np.float64)
    for sample in samples:
        flat = sample.pixels.reshape(3, -1).astype(np.float64)
        n += flat.shape[1]
        s1 += flat.sum(axis=1)
        s2 += flat @ flat.T
    if n == 0:
        raise FormatError("no pixels to build color statistics from")
    mean = s1 / n
    cov = s2 / n - np.outer(mean, mean)
    return mean, cov


def pca_color_augment(pixels: np.ndarray, eigvals: np.ndarray, eigvecs: np.ndarray,
                      sigma: float, stream: Stream) -> np.ndarray:
    """Add V @ (alpha * lambda) along the color axes, alpha ~ N(0, sigma).

    `eigvecs` columns must be orthonormal within 1e-9.  sigma = 0 is a
    bit-exact identity (no draws consumed)."""
    eigvecs = np.asarray(eigvecs, dtype=np.float64)
    eigvals = np.asarray(eigvals, dtype=np.float64)
    if eigvecs.shape != (3, 3) or eigvals.shape != (3,):
        raise FormatError("need 3 eigenvalues and a 3x3 basis")
    if np.abs(eigvecs.T @ eigvecs - np.eye(3)).max() > 1e-9:
        raise FormatError("eigenvector basis is not orthonormal")
    if sigma == 0.0:
        return pixels.copy()
    alpha = stream.normal(3) * sigma
    shift = (eigvecs @ (alpha * eigvals)).astype(np.float32)
    return np.clip(pixels + shift.reshape(3, 1, 1), 0.0, 1.0)


# ---------------------------------------------------------------------------
# dataset ingestion

@dataclass
class ImageSample:
    pixels: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: int
    id: str


def class_dir_name(index: int, name: str) -> str:
    return f"{index}_{name}"


def load_classes(root: str) -> List[str]:
    path = os.path.join(root, "classes.txt")
    if not os.path.isfile(path):
        raise FormatError(f"missing class list {path}")
    with open(path, "r", encoding="utf-8") as f:
        names = [line.strip() for line in f if line.strip()]
    if not names:
        raise FormatError(f"{path} lists no classes")
    return names


def load_dataset(root: str, split: str) -> Tuple[List[ImageSample], List[str]]:
    """Read every sample of one split, ordered by (class, file name)."""
    names = load_classes(root)
    samples: List[ImageSample] = []
    for idx, name in enumerate(names):
        d = os.path.join(root, split, class_dir_name(idx, name))
        if not os.path.isdir(d):
            raise FormatError(f"missing class directory {d}")
        for fname in sorted(os.listdir(d)):
            if not fname.endswith(".ppm"):
                continue
            with open(os.path.join(d, fname), "rb") as f:
                pixels = decode_ppm(f.read())
            samples.append(ImageSample(pixels=pixels, label=idx, id=fname[:-4]))
    if not samples:
        raise FormatError(f"split {split!r} under {root} holds no samples")
    return samples, names


def channel_stats(samples: Sequence[ImageSample]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over every pixel.

    The deviation is floored at 1e-6 so constant channels stay usable."""
    n = 0
    s1 = np.zeros(3, dtype=np.float64)
    s2 = np.zeros(3, dtype=np.float64)
    for sample in samples:
        flat = sample.pixels.reshape(3, -1).astype(np.float64)
        n += flat.shape[1]
        s1 += flat.sum(axis=1)
        s2 += (flat * flat).sum(axis=1)
    mean = s1 / n
    var = np.maximum(s2 / n - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


# ---------------------------------------------------------------------------
# the augmentation pipeline

def make_augmenter(cfg, base_seed: int, pca_basis=None):
    """Build `augment(sample, epoch) -> pixels` from an AugmentConfig.

    Each call derives its own substream from (seed, sample id, epoch);
    see the module docstring for the fixed draw order.  `pca_basis` is
    an (eigvals, eigvecs) pair, required when cfg.pca_sigma > 0.
    """
    if cfg.pca_sigma > 0 and pca_basis is None:
        raise FormatError("pca_sigma > 0 needs a color basis; compute one at ingestion")
    root = Stream(base_seed)

    def augment(sample: ImageSample, epoch: int) -> np.ndarray:
        stream = root.spawn("augment", sample.id, epoch)
        px = sample.pixels
        if cfg.resize_min_side:
            px = resize_min_side(px, cfg.resize_min_side)
        if stream.uniform(1)[0] < 0.5:
            px = scale_aspect_crop(px, cfg.crop, stream,
                                   area_range=cfg.area_range, aspect_range=cfg.aspect_range)
        else:
            px = random_crop(px, cfg.crop, stream)
        if stream.uniform(1)[0] < cfg.flip_prob:
            px = flip_horizontal(px)
        px = photometric_distort(px, stream, cfg.brightness, cfg.contrast, cfg.saturation)
        if cfg.pca_sigma > 0:
            px = pca_color_augment(px, pca_basis[0], pca_basis[1], cfg.pca_sigma, stream)
        return px

    return augment
