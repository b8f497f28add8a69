"""Non-targeted FGSM, I-FGSM, DeepFool and Carlini-Wagner L2, plus strength calibration.

Every attack works on a single input or a batch and accepts any model object
exposing ``forward``, ``predict``, ``loss_and_input_gradient``,
``logit_jacobian`` and ``vjp`` (see :mod:`advlab.smallnet`).
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .imagecore import InvalidInputError, normalized_l2_dissimilarity, per_image_norms

log = logging.getLogger(__name__)

FGSM, IFGSM, DEEPFOOL, CWL2 = "fgsm", "ifgsm", "deepfool", "cw"
METHODS = (FGSM, IFGSM, DEEPFOOL, CWL2)

KNOB_BOUNDS = {
    FGSM: (1e-4, 0.5),
    IFGSM: (1e-4, 0.5),
    DEEPFOOL: (1.0, 32.0),
    CWL2: (1.0, 32.0),
}


class DegenerateGradientError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class CalibrationError(RuntimeError):
    def __init__(self, message: str, bracket: tuple[float, float], achieved: tuple[float, float]):
        super().__init__(f"{message}: knob bracket {bracket} gives dissimilarity {achieved}")
        self.bracket = bracket
        self.achieved = achieved


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters of one attack.

    ``eps`` is the step size for FGSM/I-FGSM and the step multiplier (DeepFool)
    or perturbation post-scale (CW-L2) otherwise.
    """

    method: str = IFGSM
    eps: float = 0.01
    iterations: int = 10
    kappa: float = 0.0
    lambda_f: float = 10.0
    opt_iterations: int = 100
    opt_lr: float = 0.001
    overshoot: float = 0.02
    budget: Optional[float] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown attack {self.method!r}")
        if self.eps < 0:
            raise InvalidInputError("eps must be non-negative")
        if self.method in (IFGSM, DEEPFOOL) and self.iterations < 1:
            raise InvalidInputError("iterative attacks need iterations >= 1")
        if self.method in (DEEPFOOL, CWL2) and self.eps < 1:
            raise InvalidInputError("DeepFool/CW scale eps must be >= 1")
        if self.lambda_f < 0:
            raise InvalidInputError("lambda_f must be non-negative")

    @classmethod
    def default(cls, method: str) -> "AttackConfig":
        """Per-method defaults: M = 10 for I-FGSM, M = 5 for DeepFool, kappa = 0 and lambda_f = 10 for CW."""
        if method == FGSM:
            return cls(FGSM, eps=0.01, iterations=1)
        if method == IFGSM:
            return cls(IFGSM, eps=0.005, iterations=10)
        if method == DEEPFOOL:
            return cls(DEEPFOOL, eps=1.0, iterations=5)
        if method == CWL2:
            return cls(CWL2, eps=1.0, kappa=0.0, lambda_f=10.0)
        raise InvalidInputError(f"unknown attack {method!r}")

    def with_knob(self, value: float) -> "AttackConfig":
        return dataclasses.replace(self, eps=float(value))


@dataclass
class AttackResult:
    images: np.ndarray
    success: np.ndarray
    dissimilarity: float
    linf: np.ndarray
    l2: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success))


def _out_dtype(x):
    return x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64


def _finish(x, xp):
    return np.clip(xp, 0.0, 1.0).astype(_out_dtype(np.asarray(x)))


def fgsm(model, x, y, eps: float) -> np.ndarray:
    """x' = clip01(x + eps * sign(grad_x loss(x, y))), with sign(0) = 0."""
    if eps < 0:
        raise InvalidInputError("eps must be non-negative")
    x = np.asarray(x)
    _, grad = model.loss_and_input_gradient(x, y)
    return _finish(x, x.astype(np.float64) + eps * np.sign(grad))


def ifgsm(model, x, y, eps: float, iterations: int) -> np.ndarray:
    """Repeat the FGSM step ``iterations`` times, clipping to [0, 1] after each step."""
    if iterations < 1:
        raise InvalidInputError("I-FGSM needs at least one iteration")
    if eps < 0:
        raise InvalidInputError("eps must be non-negative")
    x = np.asarray(x)
    xm = x.astype(np.float64)
    for _ in range(iterations):
        _, grad = model.loss_and_input_gradient(xm, y)
        xm = np.clip(xm + eps * np.sign(grad), 0.0, 1.0)
    return xm.astype(_out_dtype(x))


def deepfool(model, x, eps: float = 1.0, iterations: int = 5, overshoot: float = 0.02) -> np.ndarray:
    """Multi-class DeepFool with step multiplier ``eps`` and overshoot (1 + overshoot).

    Each iteration linearizes f_k = Z_k - Z_k0 around the current iterate for
    every k != k0, steps onto the closest linearized boundary, and clips.
    Images stop moving once their prediction differs from the original one.
    """
    if iterations < 1:
        raise InvalidInputError("DeepFool needs at least one iteration")
    x = np.asarray(x)
    single = np.ndim(model.forward(x)) == 1
    xb = (x[None] if single else x).astype(np.float64)
    cur = xb.copy()
    orig = np.atleast_1d(model.predict(xb))
    active = np.ones(len(xb), bool)
    for _ in range(iterations):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        xa = cur[idx]
        logits = np.atleast_2d(model.forward(xa))
        jac = model.logit_jacobian(xa)
        jac = jac.reshape(len(idx), logits.shape[1], -1)
        k0 = orig[idx]
        rows = np.arange(len(idx))
        f = logits - logits[rows, k0][:, None]
        w = jac - jac[rows, k0][:, None, :]
        wnorm = np.linalg.norm(w, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.where(wnorm > 0, np.abs(f) / wnorm, np.inf)
        dist[rows, k0] = np.inf
        if np.any(np.all(~np.isfinite(dist), axis=1)):
            raise DegenerateGradientError("all boundary gradients vanish")
        l = np.argmin(dist, axis=1)
        fl = np.abs(f[rows, l])
        wl = w[rows, l]
        step = (eps * (1.0 + overshoot) * fl / wnorm[rows, l] ** 2)[:, None] * wl
        cur[idx] = np.clip(xa + step.reshape(xa.shape), 0.0, 1.0)
        changed = np.atleast_1d(model.predict(cur[idx])) != k0
        active[idx[changed]] = False
    out = cur.astype(_out_dtype(x))
    return out[0] if single else out


def cw_l2_raw(model, x, kappa=0.0, lambda_f=10.0, iterations=100, lr=0.001, beta1=0.9, beta2=0.999) -> np.ndarray:
    """Adam minimization of ||x - x'||^2 + lambda_f * max(-kappa, Z_c - max_{k != c} Z_k),
    c = h(x), projecting x' onto [0, 1] after every step. Returns x' in float64."""
    x = np.asarray(x)
    single = np.ndim(model.forward(x)) == 1
    x0 = (x[None] if single else x).astype(np.float64)
    cls = np.atleast_1d(model.predict(x0))
    rows = np.arange(len(x0))
    xp = x0.copy()
    m = np.zeros_like(xp)
    v = np.zeros_like(xp)
    for t in range(1, iterations + 1):
        logits = np.atleast_2d(model.forward(xp))
        other = logits.copy()
        other[rows, cls] = -np.inf
        j = other.argmax(axis=1)
        margin = logits[rows, cls] - logits[rows, j]
        dist = ((xp - x0) ** 2).reshape(len(xp), -1).sum(axis=1)
        objective = dist + lambda_f * np.maximum(-kappa, margin)
        if not np.all(np.isfinite(objective)):
            raise NumericalError("non-finite CW objective", t)
        grad = 2.0 * (xp - x0)
        hinge = (margin > -kappa) & (lambda_f > 0)
        if np.any(hinge):
            d = np.zeros_like(logits)
            d[rows, cls] = 1.0
            d[rows, j] = -1.0
            d[~hinge] = 0.0
            grad = grad + lambda_f * model.vjp(xp, d).reshape(xp.shape)
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad**2
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        xp = np.clip(xp - lr * mhat / (np.sqrt(vhat) + 1e-8), 0.0, 1.0)
    return xp[0] if single else xp


def scale_perturbation(x, x_adv, eps: float) -> np.ndarray:
    x64 = np.asarray(x, np.float64)
    return _finish(x, x64 + eps * (np.asarray(x_adv, np.float64) - x64))


def cw_l2(model, x, cfg: AttackConfig) -> np.ndarray:
    """CW-L2 followed by scaling the perturbation by cfg.eps (>= 1) and clipping."""
    if cfg.eps < 1:
        raise InvalidInputError("CW post-scale eps must be >= 1")
    raw = cw_l2_raw(model, x, cfg.kappa, cfg.lambda_f, cfg.opt_iterations, cfg.opt_lr)
    return scale_perturbation(x, raw, cfg.eps)


def generate(model, x, y, cfg: AttackConfig) -> np.ndarray:
    if cfg.method == FGSM:
        return fgsm(model, x, y, cfg.eps)
    if cfg.method == IFGSM:
        return ifgsm(model, x, y, cfg.eps, cfg.iterations)
    if cfg.method == DEEPFOOL:
        return deepfool(model, x, cfg.eps, cfg.iterations, cfg.overshoot)
    return cw_l2(model, x, cfg)


def summarize(model, x, x_adv) -> AttackResult:
    x = np.asarray(x)
    l2, linf = per_image_norms(x, x_adv)
    success = np.atleast_1d(model.predict(x_adv)) != np.atleast_1d(model.predict(x))
    return AttackResult(np.asarray(x_adv), success, normalized_l2_dissimilarity(x, x_adv), linf, l2)


def run_attack(model, x, y, cfg: AttackConfig) -> AttackResult:
    return summarize(model, x, generate(model, x, y, cfg))


class _KnobEvaluator:
    """Dissimilarity as a function of the calibration knob, with the expensive
    CW optimization shared across knob values."""

    def __init__(self, model, x, y, cfg):
        self.model, self.x, self.y, self.cfg = model, np.asarray(x), y, cfg
        self._raw = None
        self.calls = 0

    def images(self, knob):
        cfg = self.cfg.with_knob(knob)
        if cfg.method == CWL2:
            if self._raw is None:
                self._raw = cw_l2_raw(self.model, self.x, cfg.kappa, cfg.lambda_f, cfg.opt_iterations, cfg.opt_lr)
            return scale_perturbation(self.x, self._raw, knob)
        return generate(self.model, self.x, self.y, cfg)

    def __call__(self, knob) -> float:
        self.calls += 1
        return normalized_l2_dissimilarity(self.x, self.images(knob))


def calibrate_to_dissimilarity(cfg: AttackConfig, model, x, y, target: float, rel_tol: float = 0.02, max_bisections: int = 20):
    """Bisect the attack's knob until the batch dissimilarity is within
    ``rel_tol`` (relative) of ``target``.

    Returns (adjusted config, achieved dissimilarity). Raises CalibrationError
    when the target lies outside what the knob bounds can reach.
    """
    if not target > 0:
        raise InvalidInputError("target dissimilarity must be positive")
    lo, hi = KNOB_BOUNDS[cfg.method]
    achieved = _KnobEvaluator(model, x, y, cfg)

    def close(d):
        return abs(d - target) <= rel_tol * target

    best = None
    k0 = cfg.eps
    if lo <= k0 <= hi:
        d0 = achieved(k0)
        if close(d0):
            return cfg, d0
        best = (abs(d0 - target), k0, d0)
        if d0 < target:
            lo_k, hi_k = k0, hi
        else:
            lo_k, hi_k = lo, k0
    else:
        lo_k, hi_k = lo, hi
    d_lo = achieved(lo_k)
    d_hi = achieved(hi_k)
    for k, d in ((lo_k, d_lo), (hi_k, d_hi)):
        if close(d):
            return cfg.with_knob(k), d
        if best is None or abs(d - target) < best[0]:
            best = (abs(d - target), k, d)
    if d_hi < target or d_lo > target:
        raise CalibrationError(f"target {target} unreachable for {cfg.method}", (lo_k, hi_k), (d_lo, d_hi))
    for _ in range(max_bisections):
        mid = 0.5 * (lo_k + hi_k)
        d = achieved(mid)
        if abs(d - target) < best[0]:
            best = (abs(d - target), mid, d)
        if close(d):
            break
        if d < target:
            lo_k = mid
        else:
            hi_k = mid
    log.debug("calibrated %s to knob %.6g (dissimilarity %.5f) after %d evaluations", cfg.method, best[1], best[2], achieved.calls)
    return cfg.with_knob(best[1]), best[2]
