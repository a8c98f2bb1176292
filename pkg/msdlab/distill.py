"""
Distillation losses and update rules for single-step generators.

Provides:
- Generator: one network evaluation per sample, (z, label) -> x
- dmd_weight / dmd_cotangent / dmd_generator_grad: distribution-matching gradient
- fake_score_update and regression_loss_and_grad
- ttur_distill_step and run_distillation: N fake updates per generator update
- DiscriminatorHead and gan_losses: adversarial head on the fake model's bottleneck
- tsm_loss_and_grad and train_tsm: teacher score matching for smaller students
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from msdlab.diffusion import (
    Denoiser,
    NoiseSchedule,
    SupportsDenoise,
    check_labels,
    corrupt,
    dsm_loss_and_grad,
    noise_embedding,
    one_hot,
    score_from_denoiser,
    sigma_column,
    weighted_denoising_loss,
)
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

ConditionSampler = Callable[[np.random.Generator, int], np.ndarray]
PairSampler = Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray, np.ndarray]]
RealSampler = Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]


# -----------------------------------------------------------------------------
# Generator
# -----------------------------------------------------------------------------


@dataclass
class Generator:
    """Single-step generator G(z, y) over inputs [z, onehot(y)]."""

    net: Mlp
    num_classes: int
    latent_dim: int = 2
    latent_scale: float = 80.0
    rows_generated: int = field(default=0, compare=False)
    forward_calls: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if self.num_classes < 1 or self.latent_dim < 1:
            raise ValidationError("num_classes and latent_dim must be positive")
        expected = self.latent_dim + self.num_classes
        if self.net.input_dim != expected:
            raise ShapeError(f"generator input dim {self.net.input_dim}, expected {expected}", layer=0)

    @classmethod
    def init(
        cls,
        num_classes: int,
        hidden_sizes: list[int],
        rng: np.random.Generator,
        *,
        latent_dim: int = 2,
        data_dim: int = 2,
        latent_scale: float = 80.0,
    ) -> Generator:
        sizes = [latent_dim + num_classes, *hidden_sizes, data_dim]
        return cls(Mlp.init(sizes, rng), num_classes, latent_dim, latent_scale)

    @classmethod
    def from_denoiser(cls, d: Denoiser) -> Generator:
        """G(z, y) = mu(z, sigma_max, y) - c_skip(sigma_max) z, folded into one network.

        The sigma_max preconditioning and noise embedding become constants:
        latent columns absorb c_in, embedding columns fold into the first bias,
        and the output layer absorbs c_out.
        """
        sigma = d.schedule.sigma_max
        dim, ncls = d.data_dim, d.num_classes
        _, c_out, c_in = (float(c) for c in d.precondition(np.array(sigma)))
        emb = noise_embedding(np.array([[sigma]]), d.embed_dim)[0]

        net = d.net.copy()
        w0 = net.weights[0]
        net.biases[0] = net.biases[0] + w0[:, dim + ncls :] @ emb
        net.weights[0] = np.concatenate([w0[:, :dim] * c_in, w0[:, dim : dim + ncls]], axis=1)
        net.layer_sizes[0] = dim + ncls
        net.weights[-1] = net.weights[-1] * c_out
        net.biases[-1] = net.biases[-1] * c_out
        return cls(net, ncls, dim, sigma)

    @property
    def data_dim(self) -> int:
        return self.net.output_dim

    def copy(self) -> Generator:
        return replace(self, net=self.net.copy(), rows_generated=0, forward_calls=0)

    def with_net(self, net: Mlp) -> Generator:
        return replace(self, net=net, rows_generated=0, forward_calls=0)

    def sample_latents(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(0.0, self.latent_scale, size=(n, self.latent_dim))

    def forward(self, z: np.ndarray, labels: np.ndarray | int) -> tuple[np.ndarray, ForwardCache]:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent shape {z.shape}, expected (batch, {self.latent_dim})")
        lab = check_labels(labels, self.num_classes, z.shape[0])
        out, cache = mlp_forward(self.net, np.concatenate([z, one_hot(lab, self.num_classes)], axis=1))
        self.rows_generated += z.shape[0]
        self.forward_calls += 1
        return out, cache

    def backward(self, cache: ForwardCache, out_grad: np.ndarray) -> Gradients:
        return mlp_backward(self.net, cache, out_grad)

    def generate(self, z: np.ndarray, labels: np.ndarray | int) -> np.ndarray:
        return self.forward(z, labels)[0]


def generate(g: Generator, z: np.ndarray, labels: np.ndarray | int) -> np.ndarray:
    return g.generate(z, labels)


# -----------------------------------------------------------------------------
# Distribution matching
# -----------------------------------------------------------------------------


def dmd_weight(sigma: float, alpha: float, teacher_out: np.ndarray, x: np.ndarray) -> float:
    """w = sigma^2 / alpha * CS / mean_rows ||teacher_out - x||_1, CS = data dim."""
    if sigma <= 0 or alpha == 0:
        raise ValidationError("dmd_weight needs sigma > 0 and alpha != 0")
    l1 = float(np.mean(np.sum(np.abs(teacher_out - x), axis=1)))
    if not np.isfinite(l1):
        raise NumericalError("non-finite teacher output in dmd_weight")
    if l1 <= 0.0:
        raise NumericalError("teacher output equals generator output; DMD weight undefined")
    return sigma**2 / alpha * x.shape[1] / l1


def _check_pair(teacher: SupportsDenoise, fake: SupportsDenoise) -> None:
    t_sched, f_sched = getattr(teacher, "schedule", None), getattr(fake, "schedule", None)
    if t_sched is not None and f_sched is not None and t_sched != f_sched:
        raise ValidationError("teacher and fake score models use different schedules")
    t_dim, f_dim = getattr(teacher, "data_dim", None), getattr(fake, "data_dim", None)
    if t_dim is not None and f_dim is not None and t_dim != f_dim:
        raise ShapeError(f"teacher data dim {t_dim} vs fake data dim {f_dim}")


def dmd_cotangent(
    teacher: SupportsDenoise,
    fake: SupportsDenoise,
    x: np.ndarray,
    labels: np.ndarray | int,
    sigma: float,
    noise: np.ndarray,
    alpha: float = 1.0,
) -> tuple[np.ndarray, float, np.ndarray]:
    """Returns (w alpha (s_fake - s_real), w, x_t) with both score models frozen."""
    x_t = corrupt(x, sigma, noise)
    mu_real = teacher.denoise(x_t, sigma, labels)
    mu_fake = fake.denoise(x_t, sigma, labels)
    s_real = score_from_denoiser(x_t, mu_real, sigma, alpha)
    s_fake = score_from_denoiser(x_t, mu_fake, sigma, alpha)
    if not (np.all(np.isfinite(s_real)) and np.all(np.isfinite(s_fake))):
        raise NumericalError("non-finite score in distribution matching")
    w = dmd_weight(sigma, alpha, mu_real, x)
    return w * alpha * (s_fake - s_real), w, x_t


def _window_sigma(
    schedule: NoiseSchedule, rng: np.random.Generator, t_min_index: int, t_max_index: int
) -> tuple[int, float]:
    if not 0 <= t_min_index < t_max_index <= schedule.num_steps:
        raise ValidationError(
            f"step window [{t_min_index}, {t_max_index}) invalid for {schedule.num_steps} steps"
        )
    i = int(rng.integers(t_min_index, t_max_index))
    return i, float(schedule.sigmas[i])


def dmd_generator_grad(
    teacher: SupportsDenoise,
    fake: SupportsDenoise,
    g: Generator,
    z: np.ndarray,
    labels: np.ndarray | int,
    rng: np.random.Generator,
    *,
    t_min_index: int = 0,
    t_max_index: int | None = None,
    step_index: int | None = None,
    noise: np.ndarray | None = None,
    schedule: NoiseSchedule | None = None,
    alpha: float = 1.0,
) -> Gradients:
    """Gradient of the surrogate mean_rows <w alpha (s_fake - s_real), G(z)> w.r.t. G only."""
    _check_pair(teacher, fake)
    schedule = schedule or getattr(teacher, "schedule", None)
    if schedule is None:
        raise ValidationError("a noise schedule is required to draw the step index")
    x, cache = g.forward(z, labels)
    if step_index is None:
        t_max = schedule.num_steps if t_max_index is None else t_max_index
        step_index, sigma = _window_sigma(schedule, rng, t_min_index, t_max)
    else:
        sigma = float(schedule.sigmas[step_index])
    if noise is None:
        noise = rng.standard_normal(x.shape)
    cot, _, _ = dmd_cotangent(teacher, fake, x, labels, sigma, noise, alpha)
    return g.backward(cache, cot / x.shape[0])


def dmd_surrogate(cotangent: np.ndarray, g: Generator, z: np.ndarray, labels: np.ndarray | int) -> float:
    """Scalar whose generator gradient equals dmd_generator_grad when the cotangent is frozen."""
    return float(np.mean(np.sum(cotangent * g.generate(z, labels), axis=1)))


# -----------------------------------------------------------------------------
# Config and per-step updates
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class DistillConfig:
    iterations: int = 20_000
    generator_lr: float = 1e-5
    fake_lr: float = 1e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    regression_weight: float = 0.25
    ttur_n: int = 1
    gan_gen_weight: float = 0.0
    gan_disc_weight: float = 0.0
    t_min_index: int = 0
    t_max_index: int = 750
    batch_size: int = 256
    grad_clip: float = 10.0

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValidationError("iterations must be non-negative")
        if self.generator_lr <= 0:
            raise ValidationError("generator_lr must be positive")
        # fake_lr == 0 freezes the fake model
        if self.fake_lr < 0 or self.weight_decay < 0:
            raise ValidationError("fake_lr and weight_decay must be non-negative")
        if self.regression_weight < 0 or self.gan_gen_weight < 0 or self.gan_disc_weight < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.ttur_n < 1:
            raise ValidationError(f"ttur_n must be >= 1, got {self.ttur_n}")
        if not 0 <= self.t_min_index < self.t_max_index:
            raise ValidationError(f"step window [{self.t_min_index}, {self.t_max_index}) is empty")
        if self.batch_size < 1 or self.grad_clip <= 0:
            raise ValidationError("batch_size must be >= 1 and grad_clip positive")

    def check_schedule(self, schedule: NoiseSchedule) -> None:
        if self.t_max_index > schedule.num_steps:
            raise ValidationError(
                f"t_max_index {self.t_max_index} exceeds schedule length {schedule.num_steps}"
            )


def fake_score_update(
    fake: Denoiser,
    opt: AdamWState,
    g: Generator,
    z: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    cfg: DistillConfig,
) -> float:
    """One DSM step of the fake model on frozen generator output."""
    x = g.generate(z, labels)
    loss, grads = dsm_loss_and_grad(fake, x, labels, rng)
    if cfg.fake_lr > 0:
        grads, _ = clip_grad_norm(grads, cfg.grad_clip)
        adamw_step(opt, fake.net, grads, cfg.fake_lr, cfg.weight_decay)
    return loss


def regression_loss_and_grad(
    g: Generator, z: np.ndarray, labels: np.ndarray, y: np.ndarray
) -> tuple[float, Gradients]:
    """mean_rows ||G(z) - y||^2 over paired samples."""
    if z.shape[0] == 0:
        raise ValidationError("empty regression batch")
    out, cache = g.forward(z, labels)
    if y.shape != out.shape:
        raise ShapeError(f"target shape {y.shape} vs output shape {out.shape}")
    diff = out - y
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    if not np.isfinite(loss):
        raise NumericalError("non-finite regression loss")
    return loss, g.backward(cache, 2.0 * diff / z.shape[0])


# -----------------------------------------------------------------------------
# Adversarial head
# -----------------------------------------------------------------------------


@dataclass
class DiscriminatorHead:
    """Maps fake-model bottleneck features to one logit."""

    net: Mlp

    def __post_init__(self) -> None:
        if self.net.output_dim != 1:
            raise ShapeError(f"discriminator head must output 1 logit, got {self.net.output_dim}")

    @classmethod
    def init(cls, feature_dim: int, hidden: int | None, rng: np.random.Generator) -> DiscriminatorHead:
        sizes = [feature_dim, 1] if not hidden else [feature_dim, hidden, 1]
        return cls(Mlp.init(sizes, rng))

    def copy(self) -> DiscriminatorHead:
        return DiscriminatorHead(self.net.copy())

    def logits(self, features: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        out, cache = mlp_forward(self.net, features)
        if not np.all(np.isfinite(out)):
            raise NumericalError("non-finite discriminator logits")
        return out[:, 0], cache


@dataclass
class GanLosses:
    gen_loss: float
    disc_loss: float
    head_grads: Gradients
    fake_feature_grad: np.ndarray


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def gan_losses(head: DiscriminatorHead, fake_features: np.ndarray, real_features: np.ndarray) -> GanLosses:
    """Non-saturating logistic GAN.

    head_grads is d disc_loss / d head; fake_feature_grad is d gen_loss / d fake_features.
    """
    logit_fake, cache_fake = head.logits(fake_features)
    logit_real, cache_real = head.logits(real_features)
    n_fake, n_real = logit_fake.shape[0], logit_real.shape[0]

    disc_loss = float(np.mean(softplus(-logit_real)) + np.mean(softplus(logit_fake)))
    gen_loss = float(np.mean(softplus(-logit_fake)))

    d_real = (expit(logit_real) - 1.0) / n_real
    d_fake = expit(logit_fake) / n_fake
    head_grads = mlp_backward(head.net, cache_real, d_real[:, None]).plus(
        mlp_backward(head.net, cache_fake, d_fake[:, None])
    )
    g_fake = -expit(-logit_fake) / n_fake
    fake_feature_grad = mlp_backward(head.net, cache_fake, g_fake[:, None]).input_grad
    return GanLosses(gen_loss, disc_loss, head_grads, fake_feature_grad)


# -----------------------------------------------------------------------------
# TTUR loop
# -----------------------------------------------------------------------------


@dataclass
class DistillState:
    """Everything one student's distillation owns; the teacher is shared read-only."""

    teacher: Denoiser
    generator: Generator
    fake: Denoiser
    generator_opt: AdamWState
    fake_opt: AdamWState
    draw_conditions: ConditionSampler
    draw_pairs: PairSampler | None = None
    draw_real: RealSampler | None = None
    head: DiscriminatorHead | None = None
    head_opt: AdamWState | None = None
    fake_updates: int = 0
    generator_updates: int = 0

    @classmethod
    def create(
        cls,
        teacher: Denoiser,
        generator: Generator,
        fake: Denoiser,
        cfg: DistillConfig,
        draw_conditions: ConditionSampler,
        **kwargs,
    ) -> DistillState:
        head = kwargs.get("head")
        if head is not None and kwargs.get("head_opt") is None:
            kwargs["head_opt"] = AdamWState.for_net(head.net, cfg.betas)
        return cls(
            teacher,
            generator,
            fake,
            AdamWState.for_net(generator.net, cfg.betas),
            AdamWState.for_net(fake.net, cfg.betas),
            draw_conditions,
            **kwargs,
        )


@dataclass
class StepMetrics:
    generator_step: int
    step_index: int
    dmd_weight: float
    fake_loss: float
    grad_norm: float
    clip_scale: float
    regression_loss: float | None = None
    gan_gen_loss: float | None = None
    gan_disc_loss: float | None = None


def _discriminator_update(
    state: DistillState, cfg: DistillConfig, rng: np.random.Generator, z: np.ndarray, labels: np.ndarray
) -> float:
    """Head-only step on noised fake vs noised real samples at one window sigma."""
    n = z.shape[0]
    x_fake = state.generator.generate(z, labels)
    x_real, real_labels = state.draw_real(rng, n)
    _, sigma = _window_sigma(state.fake.schedule, rng, cfg.t_min_index, cfg.t_max_index)
    xt_fake = corrupt(x_fake, sigma, rng.standard_normal(x_fake.shape))
    xt_real = corrupt(x_real, sigma, rng.standard_normal(x_real.shape))
    feats_fake, _ = state.fake.features(xt_fake, sigma, labels)
    feats_real, _ = state.fake.features(xt_real, sigma, real_labels)
    losses = gan_losses(state.head, feats_fake, feats_real)
    if cfg.fake_lr > 0 and cfg.gan_disc_weight > 0:
        grads, _ = clip_grad_norm(losses.head_grads.scaled(cfg.gan_disc_weight), cfg.grad_clip)
        adamw_step(state.head_opt, state.head.net, grads, cfg.fake_lr, cfg.weight_decay)
    return losses.disc_loss


def ttur_distill_step(state: DistillState, cfg: DistillConfig, rng: np.random.Generator) -> StepMetrics:
    """ttur_n fake-score updates, then one clipped generator update."""
    g, n = state.generator, cfg.batch_size
    adversarial = state.head is not None
    if adversarial and state.draw_real is None:
        raise ValidationError("adversarial distillation needs a real-data sampler")

    fake_losses, disc_losses = [], []
    for _ in range(cfg.ttur_n):
        labels = state.draw_conditions(rng, n)
        z = g.sample_latents(rng, n)
        fake_losses.append(fake_score_update(state.fake, state.fake_opt, g, z, labels, rng, cfg))
        state.fake_updates += 1
        if adversarial:
            disc_losses.append(_discriminator_update(state, cfg, rng, z, labels))

    labels = state.draw_conditions(rng, n)
    z = g.sample_latents(rng, n)
    x, cache = g.forward(z, labels)
    step_index, sigma = _window_sigma(state.teacher.schedule, rng, cfg.t_min_index, cfg.t_max_index)
    cot, w, x_t = dmd_cotangent(state.teacher, state.fake, x, labels, sigma, rng.standard_normal(x.shape))
    out_grad = cot / n

    gan_gen_loss = None
    if adversarial and cfg.gan_gen_weight > 0:
        feats, feat_cache = state.fake.features(x_t, sigma, labels)
        losses = gan_losses(state.head, feats, feats)
        gan_gen_loss = losses.gen_loss
        # x_t = x + sigma * noise, so d/dx = d/dx_t
        out_grad = out_grad + cfg.gan_gen_weight * state.fake.features_backward(
            feat_cache, losses.fake_feature_grad
        )

    grads = g.backward(cache, out_grad)
    reg_loss = None
    if cfg.regression_weight > 0:
        if state.draw_pairs is None:
            raise ValidationError("regression_weight > 0 needs a paired dataset")
        z_p, labels_p, y_p = state.draw_pairs(rng, n)
        reg_loss, reg_grads = regression_loss_and_grad(g, z_p, labels_p, y_p)
        grads = grads.plus(reg_grads, cfg.regression_weight)

    grads, scale = clip_grad_norm(grads, cfg.grad_clip)
    norm = grads.global_norm()
    adamw_step(state.generator_opt, g.net, grads, cfg.generator_lr, cfg.weight_decay)
    state.generator_updates += 1
    return StepMetrics(
        generator_step=state.generator_updates,
        step_index=step_index,
        dmd_weight=w,
        fake_loss=float(np.mean(fake_losses)),
        grad_norm=norm,
        clip_scale=scale,
        regression_loss=reg_loss,
        gan_gen_loss=gan_gen_loss,
        gan_disc_loss=float(np.mean(disc_losses)) if disc_losses else None,
    )


def run_distillation(
    state: DistillState,
    cfg: DistillConfig,
    rng: np.random.Generator,
    *,
    iterations: int | None = None,
    desc: str = "distill",
    progress: bool = True,
    log_every: int = 0,
) -> list[StepMetrics]:
    """Run `iterations` (default cfg.iterations) generator updates."""
    cfg.check_schedule(state.teacher.schedule)
    total = cfg.iterations if iterations is None else iterations
    history = []
    for _ in tqdm(range(total), desc=desc, disable=not progress):
        m = ttur_distill_step(state, cfg, rng)
        history.append(m)
        if log_every and m.generator_step % log_every == 0:
            logger.info(
                "%s step %d: fake_loss=%.4g reg_loss=%s w=%.3g",
                desc, m.generator_step, m.fake_loss, m.regression_loss, m.dmd_weight,
            )
    return history


# -----------------------------------------------------------------------------
# Teacher score matching
# -----------------------------------------------------------------------------


class SigmaSampling(Enum):
    DISCRETE = "discrete"
    LOGNORMAL = "lognormal"


@dataclass(frozen=True)
class TsmConfig:
    iterations: int = 5_000
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 256
    sigma_sampling: SigmaSampling = SigmaSampling.DISCRETE
    p_mean: float = -1.2
    p_std: float = 1.2
    grad_clip: float | None = None

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.batch_size < 1:
            raise ValidationError("iterations must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or self.p_std <= 0:
            raise ValidationError("lr and p_std must be positive, weight_decay non-negative")


def draw_tsm_sigma(
    schedule: NoiseSchedule, rng: np.random.Generator, n: int, cfg: TsmConfig
) -> np.ndarray:
    if cfg.sigma_sampling is SigmaSampling.LOGNORMAL:
        sigma = np.exp(rng.normal(cfg.p_mean, cfg.p_std, size=n))
        return np.clip(sigma, schedule.sigma_min, schedule.sigma_max)[:, None]
    return schedule.sigmas[rng.integers(0, schedule.num_steps, size=n)][:, None]


def tsm_loss_and_grad(
    student: Denoiser,
    teacher: SupportsDenoise,
    x: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    *,
    sigma: float | np.ndarray | None = None,
    noise: np.ndarray | None = None,
    cfg: TsmConfig | None = None,
) -> tuple[float, Gradients]:
    """lambda-weighted regression of the student onto the frozen teacher at noised real data."""
    if x.shape[0] == 0:
        raise ValidationError("empty batch")
    t_sched = getattr(teacher, "schedule", None)
    if t_sched is not None and t_sched != student.schedule:
        raise ValidationError("student and teacher use different schedules")
    if sigma is None:
        sigma = draw_tsm_sigma(student.schedule, rng, x.shape[0], cfg or TsmConfig())
    sigma = sigma_column(sigma, x.shape[0])
    if noise is None:
        noise = rng.standard_normal(x.shape)
    x_t = corrupt(x, sigma, noise)
    target = teacher.denoise(x_t, sigma, labels)
    return weighted_denoising_loss(student, x_t, sigma, labels, target)


def train_tsm(
    student: Denoiser,
    teacher: Denoiser,
    draw_real: RealSampler,
    cfg: TsmConfig,
    rng: np.random.Generator,
    *,
    desc: str = "tsm",
    progress: bool = True,
) -> list[float]:
    """Pretrain a student denoiser on the teacher's outputs; mutates student.net."""
    opt = AdamWState.for_net(student.net, cfg.betas)
    losses = []
    for _ in tqdm(range(cfg.iterations), desc=desc, disable=not progress):
        x, labels = draw_real(rng, cfg.batch_size)
        loss, grads = tsm_loss_and_grad(student, teacher, x, labels, rng, cfg=cfg)
        if cfg.grad_clip is not None:
            grads, _ = clip_grad_norm(grads, cfg.grad_clip)
        adamw_step(opt, student.net, grads, cfg.lr, cfg.weight_decay)
        losses.append(loss)
    if losses:
        logger.info("%s finished: first loss %.4g, last loss %.4g", desc, losses[0], losses[-1])
    return losses
