"""Image quilting from a database of clean patches.

For each cell of a regular grid, the K nearest database patches (squared
Euclidean distance in pixel space) to the input's own patch are found, one is
picked uniformly at random, and it is stitched in with minimum-error boundary
cuts against the already placed left and top neighbours.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagecore import FormatError, InvalidInputError, SeedStream

DB_MAGIC = b"ADVQ"
DB_VERSION = 1
_DB_HEADER = struct.Struct("<4sIIIQQ")

VERTICAL, HORIZONTAL = "vertical", "horizontal"


@dataclass
class PatchDatabase:
    patch_size: int
    channels: int
    patches: np.ndarray  # (count, patch_size * patch_size * channels) float32
    source_seed: int = 0

    def __post_init__(self):
        self.patches = np.ascontiguousarray(self.patches, np.float32)
        if self.patches.ndim != 2 or self.patches.shape[1] != self.dim:
            raise InvalidInputError(f"patch store must be (count, {self.dim}), got {self.patches.shape}")
        if len(self.patches) < 1:
            raise InvalidInputError("patch database is empty")
        self._p64 = self.patches.astype(np.float64)
        self._sq = (self._p64**2).sum(axis=1)
        # float32 copies for the screening pass of the nearest-neighbour search
        self._p32t = np.ascontiguousarray(self.patches.T)
        self._sq32 = self._sq.astype(np.float32)

    @property
    def dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def count(self) -> int:
        return len(self.patches)

    def patch(self, index: int) -> np.ndarray:
        return self.patches[index].reshape(self.patch_size, self.patch_size, self.channels)

    def to_bytes(self) -> bytes:
        head = _DB_HEADER.pack(DB_MAGIC, DB_VERSION, self.patch_size, self.channels, self.count, self.source_seed)
        return head + self.patches.astype("<f4").tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PatchDatabase":
        buf = Path(path).read_bytes()
        if len(buf) < _DB_HEADER.size:
            raise FormatError("truncated patch database header")
        magic, version, ps, ch, count, seed = _DB_HEADER.unpack_from(buf)
        if magic != DB_MAGIC:
            raise FormatError(f"bad patch database magic {magic!r}")
        if version != DB_VERSION:
            raise FormatError(f"unsupported patch database version {version}")
        dim = ps * ps * ch
        if len(buf) != _DB_HEADER.size + 4 * dim * count:
            raise FormatError("patch database size does not match its header")
        data = np.frombuffer(buf, "<f4", offset=_DB_HEADER.size).reshape(count, dim)
        return cls(ps, ch, data.astype(np.float32), seed)


def extract_patches(images: np.ndarray, idx, oy, ox, patch_size: int) -> np.ndarray:
    r = np.arange(patch_size)
    rows = (np.asarray(oy)[:, None] + r)[:, :, None]
    cols = (np.asarray(ox)[:, None] + r)[:, None, :]
    return images[np.asarray(idx)[:, None, None], rows, cols].reshape(len(idx), -1)


def build_patch_database(images, patch_size: int = 5, count: int = 100_000, seed: int = 0, path=None) -> PatchDatabase:
    """Sample ``count`` patches uniformly over (image, row offset, column offset)."""
    images = np.asarray(images, np.float32)
    if count < 1:
        raise InvalidInputError("patch count must be >= 1")
    if images.ndim != 4 or len(images) == 0:
        raise InvalidInputError("need a non-empty (N, H, W, C) image batch")
    n, h, w, c = images.shape
    if h < patch_size or w < patch_size:
        raise InvalidInputError(f"images {h}x{w} smaller than patch size {patch_size}")
    rng = SeedStream(seed, 0xDB).generator()
    idx = rng.integers(0, n, size=count)
    oy = rng.integers(0, h - patch_size + 1, size=count)
    ox = rng.integers(0, w - patch_size + 1, size=count)
    db = PatchDatabase(patch_size, c, extract_patches(images, idx, oy, ox, patch_size), seed)
    if path is not None:
        db.save(path)
    return db


def _sqdist(patches64: np.ndarray, query64: np.ndarray) -> np.ndarray:
    return ((patches64 - query64) ** 2).sum(axis=1)


def knn_batch(db: PatchDatabase, queries: np.ndarray, k: int, chunk: int = 64) -> np.ndarray:
    """Exact K nearest neighbours for each row of ``queries``; ties go to the lower index.

    Distances are screened in float32 with the ||d||^2 - 2 d.q + ||q||^2
    expansion, then every candidate within rounding slack of the K-th value is
    re-scored directly in float64, so the result equals a linear scan of
    direct squared distances.
    """
    queries = np.asarray(queries, np.float64).reshape(-1, db.dim)
    if not 1 <= k <= db.count:
        raise InvalidInputError(f"K must be in [1, {db.count}], got {k}")
    out = np.empty((len(queries), k), np.int64)
    scale = float(db._sq.max())
    for s in range(0, len(queries), chunk):
        q = queries[s : s + chunk]
        qsq = (q**2).sum(axis=1)
        approx = q.astype(np.float32) @ db._p32t
        approx *= -2.0
        approx += db._sq32[None, :]
        kth = approx.min(axis=1) if k == 1 else np.partition(approx, k - 1, axis=1)[:, k - 1]
        # float32 error of the expansion is below 75 * 2**-24 * 2|d||q| < 5e-6 (||d||^2 + ||q||^2),
        # so twice that bound (screened value and K-th value) fits in the slack
        slack = (1e-5 * (scale + qsq)).astype(np.float32)
        rows, cand = np.nonzero(approx <= (kth + slack)[:, None])
        bounds = np.searchsorted(rows, np.arange(len(q) + 1))
        for i in range(len(q)):
            c = cand[bounds[i] : bounds[i + 1]]
            exact = _sqdist(db._p64[c], q[i])
            order = np.lexsort((c, exact))[:k]
            out[s + i] = c[order]
    return out


def knn_patches(db: PatchDatabase, query: np.ndarray, k: int) -> np.ndarray:
    query = np.asarray(query)
    if query.size != db.dim:
        raise InvalidInputError(f"query has {query.size} values, database patches have {db.dim}")
    return knn_batch(db, query.reshape(1, -1), k)[0]


def min_error_boundary_cut(existing: np.ndarray, candidate: np.ndarray, orientation: str = VERTICAL) -> np.ndarray:
    """Minimum-error seam through an overlap strip.

    For a vertical cut (left overlap) the strips are (rows, width[, C]) and the
    result holds one column index per row; for a horizontal cut (top overlap)
    they are (height, cols[, C]) and the result holds one row index per column.
    Consecutive indices differ by at most 1. Pixels before the seam keep the
    existing values, the seam pixel and everything after take the candidate.
    """
    e = (np.asarray(existing, np.float64) - np.asarray(candidate, np.float64)) ** 2
    if e.ndim == 3:
        e = e.sum(axis=2)
    if e.ndim != 2 or np.shape(existing) != np.shape(candidate):
        raise InvalidInputError("overlap strips must have equal 2-D or 3-D shapes")
    if orientation == HORIZONTAL:
        e = e.T
    elif orientation != VERTICAL:
        raise InvalidInputError(f"unknown orientation {orientation!r}")
    rows, width = e.shape
    if width < 1:
        raise InvalidInputError("overlap width must be >= 1")
    cost = e.copy()
    back = np.zeros((rows, width), np.int64)
    for i in range(1, rows):
        prev = cost[i - 1]
        # candidates j-1, j, j+1 in that order so argmin prefers the leftmost
        options = np.full((3, width), np.inf)
        options[0, 1:] = prev[:-1]
        options[1] = prev
        options[2, :-1] = prev[1:]
        pick = options.argmin(axis=0)
        back[i] = np.arange(width) + pick - 1
        cost[i] = e[i] + options[pick, np.arange(width)]
    seam = np.empty(rows, np.int64)
    seam[-1] = int(np.argmin(cost[-1]))
    for i in range(rows - 1, 0, -1):
        seam[i - 1] = back[i, seam[i]]
    return seam


def seam_cost(existing, candidate, seam, orientation=VERTICAL) -> float:
    e = (np.asarray(existing, np.float64) - np.asarray(candidate, np.float64)) ** 2
    if e.ndim == 3:
        e = e.sum(axis=2)
    if orientation == HORIZONTAL:
        e = e.T
    return float(e[np.arange(len(seam)), seam].sum())


@dataclass(frozen=True)
class QuiltConfig:
    patch_size: int = 5
    overlap: int = 2
    k: int = 1
    stream: SeedStream = SeedStream(0)

    def __post_init__(self):
        if not 0 < self.overlap < self.patch_size:
            raise InvalidInputError("overlap must satisfy 0 < overlap < patch_size")
        if self.k < 1:
            raise InvalidInputError("K must be >= 1")


def grid_positions(length: int, patch_size: int, stride: int) -> list[int]:
    """Top/left coordinates of grid cells; the last cell is clamped to the edge."""
    pos = list(range(0, length - patch_size + 1, stride))
    if pos[-1] != length - patch_size:
        pos.append(length - patch_size)
    return pos


@dataclass
class QuiltResult:
    image: np.ndarray
    source_index: np.ndarray  # (H, W) database patch index per pixel
    source_offset: np.ndarray  # (H, W, 2) (row, col) inside that patch
    choices: np.ndarray  # (cells,) chosen database index per grid cell


def quilt_detailed(x: np.ndarray, db: PatchDatabase, cfg: QuiltConfig) -> QuiltResult:
    x = np.asarray(x, np.float32)
    ps = cfg.patch_size
    if db.patch_size != ps or db.channels != x.shape[2]:
        raise InvalidInputError("database patch geometry does not match the config/image")
    if not 1 <= cfg.k <= db.count:
        raise InvalidInputError(f"K must be in [1, {db.count}]")
    h, w, c = x.shape
    if h < ps or w < ps:
        raise InvalidInputError(f"image {h}x{w} smaller than patch size {ps}")
    stride = ps - cfg.overlap
    ys, xs = grid_positions(h, ps, stride), grid_positions(w, ps, stride)
    cells = [(y, xx) for y in ys for xx in xs]
    queries = np.stack([x[y : y + ps, xx : xx + ps].ravel() for y, xx in cells])
    nn = knn_batch(db, queries, cfg.k)
    if cfg.k == 1:
        choices = nn[:, 0]
    else:
        pick = cfg.stream.generator().integers(0, cfg.k, size=len(cells))
        choices = nn[np.arange(len(cells)), pick]

    out = np.zeros_like(x)
    src = np.full((h, w), -1, np.int64)
    off = np.zeros((h, w, 2), np.int64)
    local = np.stack(np.mgrid[0:ps, 0:ps], axis=-1)
    for n, (y, xx) in enumerate(cells):
        cand = db.patch(choices[n])
        iy, ix = ys.index(y), xs.index(xx)
        ov_left = xs[ix - 1] + ps - xx if ix > 0 else 0
        ov_top = ys[iy - 1] + ps - y if iy > 0 else 0
        region = out[y : y + ps, xx : xx + ps]
        take = np.ones((ps, ps), bool)
        if ov_left > 0:
            seam = min_error_boundary_cut(region[:, :ov_left], cand[:, :ov_left], VERTICAL)
            take[:, :ov_left] &= np.arange(ov_left)[None, :] >= seam[:, None]
        if ov_top > 0:
            seam = min_error_boundary_cut(region[:ov_top, :], cand[:ov_top, :], HORIZONTAL)
            take[:ov_top, :] &= np.arange(ov_top)[:, None] >= seam[None, :]
        region[take] = cand[take]
        src[y : y + ps, xx : xx + ps][take] = choices[n]
        off[y : y + ps, xx : xx + ps][take] = local[take]
    if np.any(src < 0):
        raise RuntimeError("quilting left uncovered pixels")
    return QuiltResult(out, src, off, choices)


def quilt(x: np.ndarray, db: PatchDatabase, cfg: QuiltConfig) -> np.ndarray:
    """Rebuild x from database patches; output pixels all come from the database."""
    return quilt_detailed(x, db, cfg).image
