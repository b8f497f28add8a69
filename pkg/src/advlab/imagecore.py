"""Image arrays, seeded randomness, dissimilarity and the raw tensor file format.

Images are plain ``numpy`` arrays of shape (H, W, C) holding float32
intensities in [0, 1]; batches add a leading axis. Nothing here wraps them in
a class, every other module passes arrays around directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"ADVT"
_HEADER = struct.Struct("<4sIII")

_MASK64 = (1 << 64) - 1


class InvalidInputError(ValueError):
    """Raised when an array violates an operation's preconditions."""


class FormatError(ValueError):
    """Raised when a tensor, checkpoint or database file is malformed."""


def as_image(data, copy: bool = False) -> np.ndarray:
    """Validate ``data`` as an (H, W, C) image and return it as float32.

    Raises InvalidInputError on wrong rank, non-finite or out-of-range values.
    """
    arr = np.array(data, dtype=np.float32, copy=copy) if copy else np.asarray(data, dtype=np.float32)
    if arr.ndim != 3:
        raise InvalidInputError(f"image must have shape (H, W, C), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("image contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InvalidInputError("image values must lie in [0, 1]")
    return arr


def clip01(image: np.ndarray) -> np.ndarray:
    """Saturate every element to [0, 1]; values already inside are untouched."""
    arr = np.asarray(image)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("clip01 received non-finite values")
    return np.clip(arr, 0.0, 1.0)


def normalized_l2_dissimilarity(originals, perturbed) -> float:
    """Batch mean of ||x_n - x'_n||_2 / ||x_n||_2.

    ``originals`` and ``perturbed`` are sequences (or stacked arrays) of images
    with matching shapes.
    """
    if len(originals) == 0 or len(originals) != len(perturbed):
        raise InvalidInputError("need two non-empty batches of equal length")
    total = 0.0
    for x, xp in zip(originals, perturbed):
        x = np.asarray(x, dtype=np.float64)
        xp = np.asarray(xp, dtype=np.float64)
        if x.shape != xp.shape:
            raise InvalidInputError(f"shape mismatch {x.shape} vs {xp.shape}")
        norm = np.linalg.norm(x.ravel())
        if norm == 0.0:
            raise InvalidInputError("original image has zero norm")
        total += np.linalg.norm((x - xp).ravel()) / norm
    return total / len(originals)


def per_image_norms(originals: np.ndarray, perturbed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (L2, Linf) norms of the perturbation for each image in a batch."""
    diff = (np.asarray(perturbed, np.float64) - np.asarray(originals, np.float64)).reshape(len(originals), -1)
    return np.linalg.norm(diff, axis=1), np.abs(diff).max(axis=1, initial=0.0)


# -- randomness -------------------------------------------------------------


def splitmix64(value: int) -> int:
    """One round of the SplitMix64 finalizer on a 64-bit integer."""
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_stream_id(*parts: int) -> int:
    """Fold integer coordinates (image index, defense instance, repetition, ...)
    into a single 64-bit stream id.

    h_0 = 0, h_{i+1} = splitmix64(h_i XOR (part_i mod 2^64)). Order matters, so
    (1, 2) and (2, 1) land on different streams.
    """
    h = 0
    for part in parts:
        h = splitmix64(h ^ (int(part) & _MASK64))
    return h


@dataclass(frozen=True)
class SeedStream:
    """A reproducible random stream identified by (seed, stream_id).

    The generator is PCG64 seeded from ``SeedSequence([seed, stream_id])``, so
    the draw sequence depends only on the pair, never on call order elsewhere.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed & _MASK64, self.stream_id & _MASK64]))
        )

    def child(self, *parts: int) -> "SeedStream":
        return SeedStream(self.seed, derive_stream_id(self.stream_id, *parts))


# -- tensor files -----------------------------------------------------------


def save_tensor(image: np.ndarray, path) -> None:
    """Write an image as a 16-byte header (magic, H, W, C as little-endian u32)
    followed by row-major little-endian float32 data."""
    arr = as_image(image)
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TENSOR_MAGIC, h, w, c))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def tensor_bytes(arr: np.ndarray) -> bytes:
    """Serialize a 3-D float array in the tensor format without range checks."""
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise InvalidInputError(f"tensor must be 3-D, got shape {arr.shape}")
    h, w, c = arr.shape
    return _HEADER.pack(TENSOR_MAGIC, h, w, c) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def parse_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated tensor header")
    magic, h, w, c = _HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    n = h * w * c
    start = offset + _HEADER.size
    end = start + 4 * n
    if end > len(buf):
        raise FormatError(f"truncated tensor data: need {4 * n} bytes, have {len(buf) - start}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=start).reshape(h, w, c)
    return arr.astype(np.float32), end


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = parse_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor data")
    return arr


# -- PNG --------------------------------------------------------------------


def load_png(path) -> np.ndarray:
    """Read an 8-bit PNG as an RGB image scaled by 1/255."""
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float32)
    return data / np.float32(255.0)


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image as PILImage

    arr = as_image(image)
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    if q.shape[2] == 1:
        q = q[:, :, 0]
    PILImage.fromarray(q).save(path)
