"""Dual-branch occlusion loss kernels.

total = (visible_term + alpha * occluded_term) / n, where each per-keypoint
term compares predicted and ground-truth heatmaps on its branch. The
default reduction is the mean of squared differences per channel (MSE); a
per-channel L2 norm is selectable. Because wrong-branch ground truth is
zero, peaks predicted in the wrong branch are penalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DivergenceError, NonDifferentiableError
from .heatmaps import Heatmap, HeatmapPair
from .seeding import substream

MODE_MSE = "mse"
MODE_L2NORM = "l2norm"

DEFAULT_ALPHA = 1.5


@dataclass(frozen=True)
class LossConfig:
    alpha: float = DEFAULT_ALPHA
    norm_mode: str = MODE_MSE
    n: int = 14  # keypoint count in the denominator

    def __post_init__(self):
        if self.alpha <= 0:
            raise DimensionError(f"alpha must be positive, got {self.alpha}")
        if self.n < 1:
            raise DimensionError(f"n must be >= 1, got {self.n}")
        if self.norm_mode not in (MODE_MSE, MODE_L2NORM):
            raise DimensionError(f"unknown norm mode {self.norm_mode!r}")


@dataclass(frozen=True)
class LossValue:
    total: float
    visible_term: float
    occluded_term: float


def _check_shapes(p: HeatmapPair, g: HeatmapPair, cfg: LossConfig) -> None:
    if p.shape != g.shape:
        raise DimensionError(f"prediction shape {p.shape} != ground truth {g.shape}")
    if cfg.n != p.shape[0]:
        raise DimensionError(f"cfg.n = {cfg.n} but pair has {p.shape[0]} keypoints")


def _branch_terms(p: np.ndarray, g: np.ndarray, mode: str) -> np.ndarray:
    diff = p - g
    if mode == MODE_MSE:
        return np.mean(diff * diff, axis=(1, 2))
    return np.sqrt(np.sum(diff * diff, axis=(1, 2)))


def loss(p: HeatmapPair, g: HeatmapPair, cfg: LossConfig) -> LossValue:
    """Evaluate the weighted dual-branch loss."""
    _check_shapes(p, g, cfg)
    vis = float(np.sum(_branch_terms(p.visible.values, g.visible.values, cfg.norm_mode)))
    occ = float(np.sum(_branch_terms(p.occluded.values, g.occluded.values, cfg.norm_mode)))
    return LossValue(total=(vis + cfg.alpha * occ) / cfg.n,
                     visible_term=vis, occluded_term=occ)


def loss_grad(p: HeatmapPair, g: HeatmapPair, cfg: LossConfig) -> HeatmapPair:
    """Analytic gradient of loss().total with respect to the prediction."""
    _check_shapes(p, g, cfg)
    if cfg.norm_mode == MODE_MSE:
        _, h, w = p.shape
        cells = h * w
        gvis = 2.0 * (p.visible.values - g.visible.values) / (cfg.n * cells)
        gocc = 2.0 * cfg.alpha * (p.occluded.values - g.occluded.values) / (cfg.n * cells)
        return HeatmapPair(Heatmap(gvis), Heatmap(gocc))
    out = []
    for branch_p, branch_g, weight in ((p.visible.values, g.visible.values, 1.0),
                                       (p.occluded.values, g.occluded.values, cfg.alpha)):
        diff = branch_p - branch_g
        norms = np.sqrt(np.sum(diff * diff, axis=(1, 2)))
        if np.any(norms == 0.0):
            raise NonDifferentiableError(
                "L2 norm is not differentiable at a zero residual channel")
        out.append(weight * diff / (cfg.n * norms[:, None, None]))
    return HeatmapPair(Heatmap(out[0]), Heatmap(out[1]))


def _random_pair(rng: np.random.Generator, k: int, h: int, w: int) -> HeatmapPair:
    return HeatmapPair(Heatmap(rng.standard_normal((k, h, w))),
                       Heatmap(rng.standard_normal((k, h, w))))


def grad_check(cfg: LossConfig, trials: int = 100, fd_step: float = 1e-4,
               seed: int = 0, shape: tuple[int, int, int] = (3, 16, 12)) -> float:
    """Worst relative error between analytic and central FD gradients.

    Random prediction/target pairs at a reduced size; every cell of both
    branches is perturbed by +-fd_step. Relative error per cell is
    |analytic - fd| / max(|analytic|, |fd|, 1e-3); the 1e-3 floor sits at
    the typical gradient magnitude, so near-zero cells are still held to an
    absolute deviation of 1e-8 at the 1e-5 acceptance bound instead of
    dividing FD rounding noise by itself.
    """
    if trials < 1:
        raise DimensionError(f"trials must be >= 1, got {trials}")
    if fd_step <= 0:
        raise DimensionError(f"fd_step must be positive, got {fd_step}")
    k, h, w = shape
    cfg = LossConfig(alpha=cfg.alpha, norm_mode=cfg.norm_mode, n=k)
    rng = substream(seed, "grad_check")
    worst = 0.0
    for _ in range(trials):
        p = _random_pair(rng, k, h, w)
        g = _random_pair(rng, k, h, w)
        analytic = loss_grad(p, g, cfg)
        for branch_name in ("visible", "occluded"):
            values = getattr(p, branch_name).values
            grad = getattr(analytic, branch_name).values
            flat = values.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + fd_step
                up = loss(p, g, cfg).total
                flat[idx] = orig - fd_step
                down = loss(p, g, cfg).total
                flat[idx] = orig
                fd = (up - down) / (2.0 * fd_step)
                a = grad.reshape(-1)[idx]
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
                if rel > worst:
                    worst = rel
    return worst


def fit_direct(g: HeatmapPair, init: HeatmapPair, cfg: LossConfig, lr: float,
               steps: int) -> tuple[HeatmapPair, list[float]]:
    """Plain gradient descent treating the prediction as free parameters.

    Returns the final prediction and the loss trajectory (length steps + 1,
    including the initial loss). Raises DivergenceError when the loss blows
    past 1e6x its initial value.
    """
    if lr <= 0:
        raise DimensionError(f"learning rate must be positive, got {lr}")
    if cfg.norm_mode != MODE_MSE:
        raise NonDifferentiableError("direct fit requires the MSE mode")
    p = HeatmapPair(Heatmap(init.visible.values.copy()),
                    Heatmap(init.occluded.values.copy()))
    trajectory = [loss(p, g, cfg).total]
    initial = trajectory[0]
    for _ in range(steps):
        grad = loss_grad(p, g, cfg)
        p.visible.values -= lr * grad.visible.values
        p.occluded.values -= lr * grad.occluded.values
        current = loss(p, g, cfg).total
        trajectory.append(current)
        if initial > 0 and current > 1e6 * initial:
            raise DivergenceError(f"gradient descent diverged at lr={lr}")
    return p, trajectory


def stable_lr(cfg: LossConfig, h: int, w: int) -> float:
    """Half the quadratic stability bound for the MSE objective."""
    curvature = 2.0 * max(1.0, cfg.alpha) / (cfg.n * h * w)
    return 1.0 / curvature  # = 0.5 * (2 / curvature)
