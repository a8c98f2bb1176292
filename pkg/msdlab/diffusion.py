"""
EDM-style diffusion components.

Provides:
- NoiseSchedule and sigma_at: rho-warped sigma discretization
- Denoiser: preconditioned, class-conditioned network
- dsm_loss_and_grad and train_teacher: denoising score matching
- heun_sample: deterministic 2nd-order probability-flow ODE sampler
- AnalyticGaussian oracle and score_from_denoiser
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Protocol

import numpy as np
from tqdm import tqdm

from msdlab.errors import NumericalError, ShapeError, ValidationError
from msdlab.nn_core import (
    AdamWState,
    ForwardCache,
    Gradients,
    Mlp,
    adamw_step,
    clip_grad_norm,
    mlp_backward,
    mlp_forward,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized sigma grid, index 0 = sigma_max, last index = sigma_min."""

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    num_steps: int = 1000
    rho: float = 7.0

    def __post_init__(self) -> None:
        if self.sigma_min <= 0:
            raise ValidationError(f"sigma_min must be positive, got {self.sigma_min}")
        if self.sigma_max < self.sigma_min:
            raise ValidationError("sigma_max must not be below sigma_min")
        if self.num_steps < 1:
            raise ValidationError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.num_steps > 1 and self.sigma_max == self.sigma_min:
            raise ValidationError("a multi-step schedule needs sigma_max > sigma_min")
        if self.num_steps == 1 and self.sigma_max != self.sigma_min:
            raise ValidationError("a single-step schedule needs sigma_max == sigma_min")
        if self.rho <= 0:
            raise ValidationError(f"rho must be positive, got {self.rho}")

    @cached_property
    def sigmas(self) -> np.ndarray:
        if self.num_steps == 1:
            return np.array([self.sigma_max])
        inv = 1.0 / self.rho
        frac = np.arange(self.num_steps) / (self.num_steps - 1)
        lo, hi = self.sigma_min**inv, self.sigma_max**inv
        grid = (hi + frac * (lo - hi)) ** self.rho
        grid[0], grid[-1] = self.sigma_max, self.sigma_min
        grid.setflags(write=False)
        return grid

    def with_steps(self, num_steps: int) -> NoiseSchedule:
        return replace(self, num_steps=num_steps)


def sigma_at(schedule: NoiseSchedule, i: int) -> float:
    if not 0 <= i < schedule.num_steps:
        raise ValidationError(f"step index {i} outside [0, {schedule.num_steps})")
    return float(schedule.sigmas[i])


def corrupt(x: np.ndarray, sigma: float | np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Forward corruption with alpha = 1: x + sigma * noise."""
    if x.shape != noise.shape:
        raise ShapeError(f"data shape {x.shape} vs noise shape {noise.shape}")
    return x + sigma * noise


def noise_embedding(sigma: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of ln(sigma) / 4, shape (batch, dim)."""
    c = np.log(sigma) / 4.0
    freqs = np.arange(1, dim // 2 + 1, dtype=np.float64)
    angles = c * freqs
    return np.concatenate([np.cos(angles), np.sin(angles)], axis=1)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def check_labels(labels: np.ndarray | int, num_classes: int, batch: int) -> np.ndarray:
    """Broadcast a scalar or per-row label to an int array and range-check it."""
    arr = np.asarray(labels)
    if arr.ndim == 0:
        arr = np.full(batch, int(arr))
    if arr.shape != (batch,):
        raise ShapeError(f"labels shape {arr.shape}, expected ({batch},)")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValidationError("labels must be integers")
    if np.any(arr < 0) or np.any(arr >= num_classes):
        bad = arr[(arr < 0) | (arr >= num_classes)][0]
        raise ValidationError(f"unknown label {bad} (num_classes={num_classes})")
    return arr.astype(np.int64)


def sigma_column(sigma: float | np.ndarray, batch: int) -> np.ndarray:
    arr = np.asarray(sigma, dtype=np.float64)
    if arr.ndim == 0:
        return np.full((batch, 1), float(arr))
    return arr.reshape(batch, 1)


def loss_weight(sigma: np.ndarray, sigma_data: float) -> np.ndarray:
    """lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


class SupportsDenoise(Protocol):
    def denoise(self, x_t: np.ndarray, sigma: float | np.ndarray, labels: np.ndarray | int) -> np.ndarray: ...


@dataclass
class DenoiserCache:
    net_cache: ForwardCache
    c_skip: np.ndarray
    c_out: np.ndarray
    c_in: np.ndarray


@dataclass
class Denoiser:
    """mu(x_t, sigma, y) = c_skip x_t + c_out net(c_in x_t, onehot(y), embed(sigma))."""

    net: Mlp
    num_classes: int
    sigma_data: float = 0.5
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    embed_dim: int = 16

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")
        if self.sigma_data <= 0:
            raise ValidationError("sigma_data must be positive")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValidationError(f"noise embedding dim must be even and >= 2, got {self.embed_dim}")
        expected = self.data_dim + self.num_classes + self.embed_dim
        if self.net.input_dim != expected:
            raise ShapeError(f"network input dim {self.net.input_dim}, expected {expected}", layer=0)

    @classmethod
    def init(
        cls,
        num_classes: int,
        hidden_sizes: list[int],
        rng: np.random.Generator,
        *,
        data_dim: int = 2,
        sigma_data: float = 0.5,
        schedule: NoiseSchedule | None = None,
        embed_dim: int = 16,
    ) -> Denoiser:
        sizes = [data_dim + num_classes + embed_dim, *hidden_sizes, data_dim]
        return cls(Mlp.init(sizes, rng), num_classes, sigma_data, schedule or NoiseSchedule(), embed_dim)

    @property
    def data_dim(self) -> int:
        return self.net.output_dim

    def copy(self) -> Denoiser:
        return replace(self, net=self.net.copy())

    def precondition(self, sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        sd2 = self.sigma_data**2
        denom = sigma**2 + sd2
        return sd2 / denom, sigma * self.sigma_data / np.sqrt(denom), 1.0 / np.sqrt(denom)

    def _check_sigma(self, sigma: np.ndarray) -> None:
        lo = self.schedule.sigma_min * (1.0 - 1e-9)
        hi = self.schedule.sigma_max * (1.0 + 1e-9)
        if np.any(sigma < lo) or np.any(sigma > hi):
            raise ValidationError(
                f"sigma outside [{self.schedule.sigma_min}, {self.schedule.sigma_max}]"
            )

    def net_input(
        self, x_t: np.ndarray, sigma: np.ndarray, labels: np.ndarray, c_in: np.ndarray
    ) -> np.ndarray:
        return np.concatenate(
            [c_in * x_t, one_hot(labels, self.num_classes), noise_embedding(sigma, self.embed_dim)],
            axis=1,
        )

    def _prepare(self, x_t, sigma, labels):
        if x_t.ndim != 2 or x_t.shape[1] != self.data_dim:
            raise ShapeError(f"x_t shape {x_t.shape}, expected (batch, {self.data_dim})")
        n = x_t.shape[0]
        sig = sigma_column(sigma, n)
        self._check_sigma(sig)
        return sig, check_labels(labels, self.num_classes, n)

    def forward(
        self, x_t: np.ndarray, sigma: float | np.ndarray, labels: np.ndarray | int
    ) -> tuple[np.ndarray, DenoiserCache]:
        sig, lab = self._prepare(x_t, sigma, labels)
        c_skip, c_out, c_in = self.precondition(sig)
        raw, net_cache = mlp_forward(self.net, self.net_input(x_t, sig, lab, c_in))
        return c_skip * x_t + c_out * raw, DenoiserCache(net_cache, c_skip, c_out, c_in)

    def backward(self, cache: DenoiserCache, out_grad: np.ndarray) -> Gradients:
        """Parameter gradients; input_grad holds d/dx_t through both skip and network paths."""
        grads = mlp_backward(self.net, cache.net_cache, cache.c_out * out_grad)
        grads.input_grad = cache.c_skip * out_grad + cache.c_in * grads.input_grad[:, : self.data_dim]
        return grads

    def denoise(
        self, x_t: np.ndarray, sigma: float | np.ndarray, labels: np.ndarray | int
    ) -> np.ndarray:
        return self.forward(x_t, sigma, labels)[0]

    def features(
        self, x_t: np.ndarray, sigma: float | np.ndarray, labels: np.ndarray | int
    ) -> tuple[np.ndarray, DenoiserCache]:
        """Penultimate hidden activations (the bottleneck a discriminator head reads)."""
        sig, lab = self._prepare(x_t, sigma, labels)
        c_skip, c_out, c_in = self.precondition(sig)
        feats, net_cache = mlp_forward(self.net.trunk(), self.net_input(x_t, sig, lab, c_in))
        return feats, DenoiserCache(net_cache, c_skip, c_out, c_in)

    def features_backward(self, cache: DenoiserCache, feature_grad: np.ndarray) -> np.ndarray:
        """d/dx_t of sum(feature_grad * features); network parameters are treated as constants."""
        grads = mlp_backward(self.net.trunk(), cache.net_cache, feature_grad)
        return cache.c_in * grads.input_grad[:, : self.data_dim]


def denoise(
    d: Denoiser, x_t: np.ndarray, sigma: float | np.ndarray, labels: np.ndarray | int
) -> np.ndarray:
    return d.denoise(x_t, sigma, labels)


def weighted_denoising_loss(
    d: Denoiser,
    x_t: np.ndarray,
    sigma: np.ndarray,
    labels: np.ndarray,
    target: np.ndarray,
) -> tuple[float, Gradients]:
    """mean_rows lambda(sigma) * ||mu(x_t) - target||^2 and its exact gradients."""
    out, cache = d.forward(x_t, sigma, labels)
    lam = loss_weight(sigma_column(sigma, x_t.shape[0]), d.sigma_data)
    diff = out - target
    loss = float(np.mean(lam[:, 0] * np.sum(diff * diff, axis=1)))
    if not np.isfinite(loss):
        raise NumericalError("non-finite denoising loss")
    grads = d.backward(cache, 2.0 * lam * diff / x_t.shape[0])
    return loss, grads


def dsm_loss_and_grad(
    d: Denoiser,
    x: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    *,
    step_indices: np.ndarray | None = None,
    noise: np.ndarray | None = None,
) -> tuple[float, Gradients]:
    """Denoising score matching with step indices uniform over the schedule."""
    if x.shape[0] == 0:
        raise ValidationError("empty batch")
    if step_indices is None:
        step_indices = rng.integers(0, d.schedule.num_steps, size=x.shape[0])
    if noise is None:
        noise = rng.standard_normal(x.shape)
    sigma = d.schedule.sigmas[step_indices][:, None]
    return weighted_denoising_loss(d, corrupt(x, sigma, noise), sigma, labels, x)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings for denoiser training (teacher, TSM)."""

    iterations: int = 10_000
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 256
    grad_clip: float | None = None

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.batch_size < 1:
            raise ValidationError("iterations must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValidationError("lr must be positive and weight_decay non-negative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError("grad_clip must be positive when set")


def train_teacher(
    d: Denoiser,
    draw_batch: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    rng: np.random.Generator,
    *,
    opt: AdamWState | None = None,
    start_iteration: int = 0,
    on_step: Callable[[int, float, AdamWState], None] | None = None,
    progress: bool = True,
    log_every: int = 0,
) -> AdamWState:
    """Run DSM training from start_iteration up to cfg.iterations; mutates d.net."""
    opt = opt or AdamWState.for_net(d.net, cfg.betas)
    logger.info("Teacher training: iterations %d -> %d", start_iteration, cfg.iterations)
    loss = None
    for it in tqdm(range(start_iteration, cfg.iterations), desc="teacher", disable=not progress):
        x, labels = draw_batch(rng, cfg.batch_size)
        loss, grads = dsm_loss_and_grad(d, x, labels, rng)
        if cfg.grad_clip is not None:
            grads, _ = clip_grad_norm(grads, cfg.grad_clip)
        adamw_step(opt, d.net, grads, cfg.lr, cfg.weight_decay)
        if on_step is not None:
            on_step(it + 1, loss, opt)
        if log_every and (it + 1) % log_every == 0:
            logger.info("teacher step %d: dsm_loss=%.4g", it + 1, loss)
    if loss is not None:
        logger.info("Teacher training finished at iteration %d, last loss %.4g", cfg.iterations, loss)
    return opt


def heun_sample(
    d: SupportsDenoise,
    z: np.ndarray,
    labels: np.ndarray | int,
    num_steps: int,
    *,
    schedule: NoiseSchedule | None = None,
    final_euler: bool = False,
) -> np.ndarray:
    """Integrate dx/dsigma = (x - mu(x, sigma)) / sigma from sigma_max to sigma_min.

    Returns the state at sigma_min, or, with final_euler, after one more Euler
    step into sigma = 0 (which lands exactly on mu(x, sigma_min)). num_steps counts
    grid points; num_steps=1 on a schedule with sigma_max > sigma_min takes a single
    Heun step straight from sigma_max to sigma_min, and returns z when they coincide.
    """
    if num_steps < 1:
        raise ValidationError(f"num_steps must be >= 1, got {num_steps}")
    base = schedule if schedule is not None else getattr(d, "schedule", None)
    if base is None:
        raise ValidationError("heun_sample needs a schedule for this denoiser")
    if num_steps == 1 and base.sigma_max != base.sigma_min:
        sigmas = np.array([base.sigma_max, base.sigma_min])
    else:
        sigmas = base.with_steps(num_steps).sigmas
    x = np.array(z, dtype=np.float64, copy=True)
    for i in range(len(sigmas) - 1):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        slope = (x - d.denoise(x, s, labels)) / s
        x_euler = x + (s_next - s) * slope
        slope_next = (x_euler - d.denoise(x_euler, s_next, labels)) / s_next
        x = x + (s_next - s) * 0.5 * (slope + slope_next)
        if not np.all(np.isfinite(x)):
            raise NumericalError("sampler state became non-finite", step=i)
    if final_euler:
        s = float(sigmas[-1])
        x = x - s * (x - d.denoise(x, s, labels)) / s
        if not np.all(np.isfinite(x)):
            raise NumericalError("sampler state became non-finite", step=num_steps - 1)
    return x


@dataclass
class AnalyticGaussian:
    """Isotropic Gaussian data N(mean, variance I) with closed-form posterior mean."""

    mean: np.ndarray
    variance: float

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.variance <= 0:
            raise ValidationError("variance must be positive")

    def denoise(self, x_t: np.ndarray, sigma: float | np.ndarray, labels=None) -> np.ndarray:
        return analytic_gaussian_denoiser(self, x_t, sigma)

    def score(self, x_t: np.ndarray, sigma: float | np.ndarray) -> np.ndarray:
        return -(x_t - self.mean) / (self.variance + np.asarray(sigma) ** 2)


def analytic_gaussian_denoiser(
    g: AnalyticGaussian, x_t: np.ndarray, sigma: float | np.ndarray
) -> np.ndarray:
    """E[x | x_t] = (v x_t + sigma^2 m) / (v + sigma^2)."""
    s2 = np.asarray(sigma, dtype=np.float64) ** 2
    if np.any(np.asarray(sigma) <= 0):
        raise ValidationError("sigma must be positive")
    return (g.variance * x_t + s2 * g.mean) / (g.variance + s2)


def score_from_denoiser(
    x_t: np.ndarray, mu: np.ndarray, sigma: float | np.ndarray, alpha: float = 1.0
) -> np.ndarray:
    """s = -(x_t - alpha mu) / sigma^2."""
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig <= 0):
        raise ValidationError("sigma must be positive to form a score")
    return -(x_t - alpha * mu) / sig**2
