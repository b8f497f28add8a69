"""Pixel dropout followed by total-variation reconstruction.

The reconstruction minimizes

    J(z) = ||X * (z - x)||_2 + lam * TV_p(z)

where X is the Bernoulli keep-mask and TV_p sums the p-norms of whole
row-difference and column-difference vectors per channel. The solver is a
split-Bregman / ADMM scheme with three auxiliary copies (fidelity copy, row
differences, column differences); the z-update is a Neumann-Laplacian solve
diagonalized by the DCT, so a batch of images is solved in lockstep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imagecore import InvalidInputError, SeedStream
from .pixeltransforms import dct_matrix


@dataclass(frozen=True)
class TvmConfig:
    lam: float = 0.03
    p: int = 2
    keep_prob: float = 0.5
    tol: float = 1e-6
    max_iter: int = 500
    mu: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidInputError("lambda_tv must be positive")
        if self.p not in (1, 2):
            raise InvalidInputError(f"TV norm order must be 1 or 2, got {self.p}")
        if not 0 < self.keep_prob <= 1:
            raise InvalidInputError("keep_prob must lie in (0, 1]")
        if not self.tol > 0 or self.max_iter < 1 or not self.mu > 0:
            raise InvalidInputError("tol, max_iter and mu must be positive")


@dataclass
class TvmSolution:
    """``history`` is the objective of the incumbent (best iterate so far),
    starting with the input itself and extended after each iteration;
    ``raw_history`` holds the objective of every ADMM iterate, which is not
    monotone. Both have ``iterations + 1`` entries."""

    z: np.ndarray
    objective: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    raw_history: list = field(default_factory=list)


def sample_mask(shape, keep_prob: float, stream: SeedStream) -> np.ndarray:
    """I.i.d. Bernoulli(keep_prob) keep-mask of the given shape (1 = pixel kept)."""
    if not 0 < keep_prob <= 1:
        raise InvalidInputError("keep_prob must lie in (0, 1]")
    rng = stream.generator()
    return (rng.random(shape) < keep_prob).astype(np.float32)


def _row_diff(z):
    return z[..., 1:, :, :] - z[..., :-1, :, :]


def _col_diff(z):
    return z[..., :, 1:, :] - z[..., :, :-1, :]


def _row_diff_t(d):
    # adjoint of _row_diff
    pad = [(0, 0)] * (d.ndim - 3) + [(1, 1), (0, 0), (0, 0)]
    dp = np.pad(d, pad)
    return dp[..., :-1, :, :] - dp[..., 1:, :, :]


def _col_diff_t(d):
    pad = [(0, 0)] * (d.ndim - 3) + [(0, 0), (1, 1), (0, 0)]
    dp = np.pad(d, pad)
    return dp[..., :, :-1, :] - dp[..., :, 1:, :]


def _tv_terms(z, p):
    """Per-image TV_p for a batch (N, H, W, C)."""
    dr = _row_diff(z)  # groups: (image, row i, channel), vector over columns
    dc = _col_diff(z)  # groups: (image, column j, channel), vector over rows
    if p == 1:
        return np.abs(dr).sum(axis=(1, 2, 3)) + np.abs(dc).sum(axis=(1, 2, 3))
    return np.sqrt((dr**2).sum(axis=2)).sum(axis=(1, 2)) + np.sqrt((dc**2).sum(axis=1)).sum(axis=(1, 2))


def tv_norm(z: np.ndarray, p: int = 2) -> float:
    """TV_p of one (H, W, C) array: p-norms of every row-difference and
    column-difference vector, summed over rows, columns and channels."""
    if p not in (1, 2):
        raise InvalidInputError(f"TV norm order must be 1 or 2, got {p}")
    z = np.asarray(z, np.float64)
    if z.ndim != 3:
        raise InvalidInputError("tv_norm expects an (H, W, C) array")
    return float(_tv_terms(z[None], p)[0])


def objective(z, x, mask, lam, p) -> np.ndarray:
    """J(z) per image for batches of shape (N, H, W, C)."""
    fid = np.sqrt((((z - x) * mask) ** 2).sum(axis=(1, 2, 3)))
    return fid + lam * _tv_terms(z, p)


def _group_shrink(v, thresh, axis):
    norm = np.sqrt((v**2).sum(axis=axis, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norm > thresh, 1.0 - thresh / norm, 0.0)
    return v * scale


def _soft(v, thresh):
    return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)


CONVERGENCE_WINDOW = 10


def _admm_state(x, mask):
    """Planar (N, C, H, W) working copies; row differences run along H, column differences along W."""
    z = x.copy()
    return {
        "x": x,
        "m": mask,
        "z": z,
        "w": z.copy(),
        "dr": np.diff(z, axis=2),
        "dc": np.diff(z, axis=3),
        "bw": np.zeros_like(z),
        "br": np.zeros((*z.shape[:2], z.shape[2] - 1, z.shape[3])),
        "bc": np.zeros((*z.shape[:3], z.shape[3] - 1)),
    }


def _planar_objective(z, x, m, lam, p):
    fid = np.sqrt((((z - x) * m) ** 2).sum(axis=(1, 2, 3)))
    dr, dc = np.diff(z, axis=2), np.diff(z, axis=3)
    if p == 1:
        tv = np.abs(dr).sum(axis=(1, 2, 3)) + np.abs(dc).sum(axis=(1, 2, 3))
    else:
        tv = np.sqrt((dr**2).sum(axis=3)).sum(axis=(1, 2)) + np.sqrt((dc**2).sum(axis=2)).sum(axis=(1, 2))
    return fid + lam * tv


def _diff_t(d, axis):
    # adjoint of np.diff along ``axis``
    pad = [(0, 0)] * d.ndim
    pad[axis] = (1, 1)
    dp = np.pad(d, pad)
    n = dp.shape[axis]
    return np.take(dp, range(0, n - 1), axis=axis) - np.take(dp, range(1, n), axis=axis)


def tvm_reconstruct_batch(x: np.ndarray, mask: np.ndarray, cfg: TvmConfig) -> list[TvmSolution]:
    """Solve the masked TV problem for each image of a batch (N, H, W, C).

    An image stops once its objective changed by at most cfg.tol (relative)
    over the last ``CONVERGENCE_WINDOW`` iterations; images stop independently,
    so results do not depend on batch composition. The best iterate seen is
    returned.
    """
    x = np.asarray(x, np.float64)
    mask = np.asarray(mask, np.float64)
    if x.ndim != 4 or x.shape != mask.shape:
        raise InvalidInputError(f"image batch {x.shape} and mask {mask.shape} must match")
    n, h, w, c = x.shape
    lam, mu, p = cfg.lam, cfg.mu, cfg.p
    ch, cw = dct_matrix(h), dct_matrix(w)
    eig_h = 2.0 - 2.0 * np.cos(np.pi * np.arange(h) / h)
    eig_w = 2.0 - 2.0 * np.cos(np.pi * np.arange(w) / w)
    inv_denom = 1.0 / (1.0 + eig_h[:, None] + eig_w[None, :])

    def solve(rhs):
        # (I + Dr'Dr + Dc'Dc) z = rhs per plane, diagonal in the 2-D DCT basis
        return ch.T @ ((ch @ rhs @ cw.T) * inv_denom) @ cw

    xp = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
    mp = np.ascontiguousarray(mask.transpose(0, 3, 1, 2))
    st = _admm_state(xp, mp)
    ids = np.arange(n)
    best = _planar_objective(xp, xp, mp, lam, p)
    best_z = xp.copy()
    raw = [[float(v)] for v in best]
    history = [[float(v)] for v in best]
    iters = np.zeros(n, np.int64)
    converged = np.zeros(n, bool)
    for it in range(1, cfg.max_iter + 1):
        if len(ids) == 0:
            break
        z = solve(st["w"] - st["bw"] + _diff_t(st["dr"] - st["br"], 2) + _diff_t(st["dc"] - st["bc"], 3))
        # fidelity copy: prox of (1/mu) * ||M (w - x)||_2, block shrinkage toward x on kept pixels
        v = z + st["bw"]
        r = (v - st["x"]) * st["m"]
        rn = np.sqrt((r**2).sum(axis=(1, 2, 3)))
        with np.errstate(divide="ignore", invalid="ignore"):
            keep = np.where(rn > 1.0 / mu, 1.0 - 1.0 / (mu * rn), 0.0)
        wv = v - r * (1.0 - keep)[:, None, None, None]
        vr = np.diff(z, axis=2) + st["br"]
        vc = np.diff(z, axis=3) + st["bc"]
        if p == 2:
            # row-difference vectors run along W, column-difference vectors along H
            dr, dc = _group_shrink(vr, lam / mu, axis=3), _group_shrink(vc, lam / mu, axis=2)
        else:
            dr, dc = _soft(vr, lam / mu), _soft(vc, lam / mu)
        st["bw"] += z - wv
        st["br"], st["bc"] = vr - dr, vc - dc
        st["z"], st["w"], st["dr"], st["dc"] = z, wv, dr, dc
        iters[ids] = it
        cur = _planar_objective(z, st["x"], st["m"], lam, p)
        better = cur < best[ids]
        best[ids[better]] = cur[better]
        best_z[ids[better]] = z[better]
        done = np.zeros(len(ids), bool)
        for k, idx in enumerate(ids):
            raw[idx].append(float(cur[k]))
            history[idx].append(float(best[idx]))
            if it >= CONVERGENCE_WINDOW:
                old = raw[idx][-1 - CONVERGENCE_WINDOW]
                done[k] = abs(cur[k] - old) <= cfg.tol * (1.0 + abs(cur[k]))
        if done.any():
            converged[ids[done]] = True
            keep_rows = ~done
            ids = ids[keep_rows]
            st = {key: val[keep_rows] for key, val in st.items()}
    # clipping to the box containing x never increases either term
    zb = np.clip(best_z, 0.0, 1.0)
    final = _planar_objective(zb, xp, mp, lam, p)
    z_out = zb.transpose(0, 2, 3, 1).astype(np.float32)
    return [
        TvmSolution(z_out[i], float(final[i]), int(iters[i]), bool(converged[i]), history[i], raw[i])
        for i in range(n)
    ]


def tvm_reconstruct(x: np.ndarray, mask: np.ndarray, cfg: TvmConfig) -> TvmSolution:
    x = np.asarray(x)
    if x.ndim != 3:
        raise InvalidInputError("expected one (H, W, C) image")
    return tvm_reconstruct_batch(x[None], np.asarray(mask)[None], cfg)[0]


def tvm_defense(x: np.ndarray, cfg: TvmConfig, stream: SeedStream) -> np.ndarray:
    """Randomized TVM: draw a keep-mask from ``stream`` and reconstruct."""
    mask = sample_mask(np.shape(x), cfg.keep_prob, stream)
    return tvm_reconstruct(x, mask, cfg).z


def tvm_defense_batch(xb: np.ndarray, cfg: TvmConfig, streams) -> np.ndarray:
    masks = np.stack([sample_mask(np.shape(x), cfg.keep_prob, s) for x, s in zip(xb, streams)])
    return np.stack([s.z for s in tvm_reconstruct_batch(xb, masks, cfg)])
