"""Crop-rescale ensembling, bit-depth reduction and a JPEG quantization codec."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imagecore import InvalidInputError, SeedStream

# ITU-T T.81 Annex K tables
LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)

# JFIF full-range YCbCr
_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCC2RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix: (C @ v) is the DCT of v, C.T inverts it."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c


_DCT8 = dct_matrix(8)


@dataclass(frozen=True)
class JpegConfig:
    quality: int = 75

    def __post_init__(self):
        if not 1 <= int(self.quality) <= 100:
            raise InvalidInputError(f"JPEG quality must be in [1, 100], got {self.quality}")


@dataclass(frozen=True)
class CropConfig:
    num_crops: int = 30
    crop_fraction: float = 90 / 224
    stream: SeedStream = field(default_factory=lambda: SeedStream(0))

    def __post_init__(self):
        if self.num_crops < 1:
            raise InvalidInputError("num_crops must be >= 1")
        if not 0 < self.crop_fraction <= 1:
            raise InvalidInputError("crop_fraction must be in (0, 1]")


def bit_depth_reduce(x: np.ndarray, bits: int) -> np.ndarray:
    """Quantize to 2**bits levels; v -> round(v * (2^b - 1)) / (2^b - 1), halves rounded up."""
    if not 1 <= int(bits) <= 8:
        raise InvalidInputError(f"bits must be in [1, 8], got {bits}")
    levels = float(2 ** int(bits) - 1)
    x = np.asarray(x, np.float64)
    # inputs are non-negative, so floor(v + 0.5) rounds ties away from zero
    return (np.floor(x * levels + 0.5) / levels).astype(np.float32)


def quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    quality = int(quality)
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def jpeg_roundtrip(x: np.ndarray, cfg: JpegConfig = JpegConfig()) -> np.ndarray:
    """Encode-decode through YCbCr, 8x8 block DCT and quality-scaled quantization.

    No chroma subsampling and no entropy coding; borders are padded to a
    multiple of 8 by edge replication and cropped back.
    """
    x = np.asarray(x, np.float64)
    if x.ndim != 3 or x.shape[2] not in (1, 3):
        raise InvalidInputError(f"JPEG expects (H, W, 1|3) images, got {x.shape}")
    h, w, c = x.shape
    ph, pw = -h % 8, -w % 8
    px = np.pad(x * 255.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    if c == 3:
        ycc = px @ _RGB2YCC.T
        ycc[..., 1:] += 128.0
        tables = [quant_table(LUMA_TABLE, cfg.quality)] + [quant_table(CHROMA_TABLE, cfg.quality)] * 2
    else:
        ycc = px
        tables = [quant_table(LUMA_TABLE, cfg.quality)]
    H, W = ycc.shape[:2]
    # (H/8, 8, W/8, 8, C) -> (H/8, W/8, C, 8, 8)
    blocks = (ycc - 128.0).reshape(H // 8, 8, W // 8, 8, c).transpose(0, 2, 4, 1, 3)
    coef = _DCT8 @ blocks @ _DCT8.T
    q = np.stack(tables)[None, None]
    coef = np.round(coef / q) * q
    rec = (_DCT8.T @ coef @ _DCT8).transpose(0, 3, 1, 4, 2).reshape(H, W, c) + 128.0
    if c == 3:
        rec[..., 1:] -= 128.0
        rec = rec @ _YCC2RGB.T
    rec = rec[:h, :w] / 255.0
    return np.clip(rec, 0.0, 1.0).astype(np.float32)


def _bilinear_axis(n_out, n_in):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centred sample positions and edge clamping."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    y0, y1, fy = _bilinear_axis(out_h, h)
    x0, x1, fx = _bilinear_axis(out_w, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def crop_resize(img: np.ndarray, oy: int, ox: int, side: int) -> np.ndarray:
    h, w = img.shape[:2]
    return resize_bilinear(img[oy : oy + side, ox : ox + side], h, w)


def batch_crop_resize(xb: np.ndarray, oy: np.ndarray, ox: np.ndarray, side: int) -> np.ndarray:
    """crop_resize for a batch with per-image offsets."""
    n, h, w, _ = xb.shape
    y0, y1, fy = _bilinear_axis(h, side)
    x0, x1, fx = _bilinear_axis(w, side)
    idx = np.arange(n)[:, None, None]
    r0, r1 = (oy[:, None] + y0)[:, :, None], (oy[:, None] + y1)[:, :, None]
    c0, c1 = (ox[:, None] + x0)[:, None, :], (ox[:, None] + x1)[:, None, :]
    fx = fx[None, None, :, None].astype(xb.dtype)
    fy = fy[None, :, None, None].astype(xb.dtype)
    top = xb[idx, r0, c0] * (1 - fx) + xb[idx, r0, c1] * fx
    bot = xb[idx, r1, c0] * (1 - fx) + xb[idx, r1, c1] * fx
    return top * (1 - fy) + bot * fy


def crop_side(shape, crop_fraction: float) -> int:
    side = int(round(crop_fraction * min(shape[0], shape[1])))
    if side < 1:
        raise InvalidInputError(f"crop fraction {crop_fraction} gives an empty crop on {shape[:2]}")
    return side


def crop_rescale_samples(x: np.ndarray, cfg: CropConfig) -> list[np.ndarray]:
    """``num_crops`` random square crops of x, each resized back to x's size."""
    x = np.asarray(x, np.float32)
    h, w = x.shape[:2]
    side = crop_side(x.shape, cfg.crop_fraction)
    rng = cfg.stream.generator()
    out = []
    for _ in range(cfg.num_crops):
        oy = int(rng.integers(0, h - side + 1))
        ox = int(rng.integers(0, w - side + 1))
        out.append(crop_resize(x, oy, ox, side))
    return out


def crop_ensemble_predict(model, x: np.ndarray, cfg: CropConfig) -> np.ndarray:
    """Mean of the softmax outputs over the crop samples of x."""
    crops = np.stack(crop_rescale_samples(x, cfg))
    return model.probabilities(crops).mean(axis=0)
