"""
Multi-student distillation of a conditional diffusion teacher on a 2D toy.

Each student is a single-step generator serving a disjoint block of classes.
"""

from msdlab.nn_core import Mlp, AdamWState, Gradients, mlp_forward, mlp_backward, adamw_step, clip_grad_norm
from msdlab.diffusion import (
    NoiseSchedule,
    Denoiser,
    AnalyticGaussian,
    sigma_at,
    corrupt,
    denoise,
    dsm_loss_and_grad,
    heun_sample,
    score_from_denoiser,
    train_teacher,
)
from msdlab.distill import (
    Generator,
    DiscriminatorHead,
    DistillConfig,
    TsmConfig,
    generate,
    dmd_weight,
    dmd_generator_grad,
    fake_score_update,
    regression_loss_and_grad,
    ttur_distill_step,
    gan_losses,
    tsm_loss_and_grad,
)
from msdlab.data import MogSpec, PairedDataset, Checkpoint, sample_mog, generate_pairs, save_checkpoint, load_checkpoint
from msdlab.msd import (
    Partition,
    StudentBundle,
    FilteredData,
    partition_consecutive,
    partition_kmeans,
    partition_quadrant,
    filter_dm,
    filter_adm,
    train_msd,
    route_and_generate,
)
from msdlab.evaluation import Histogram2D, histogram2d, hist_l1, eval_bundle, export_csv

__all__ = [
    # Networks
    "Mlp",
    "AdamWState",
    "Gradients",
    "mlp_forward",
    "mlp_backward",
    "adamw_step",
    "clip_grad_norm",
    # Diffusion
    "NoiseSchedule",
    "Denoiser",
    "AnalyticGaussian",
    "sigma_at",
    "corrupt",
    "denoise",
    "dsm_loss_and_grad",
    "heun_sample",
    "score_from_denoiser",
    "train_teacher",
    # Distillation
    "Generator",
    "DiscriminatorHead",
    "DistillConfig",
    "TsmConfig",
    "generate",
    "dmd_weight",
    "dmd_generator_grad",
    "fake_score_update",
    "regression_loss_and_grad",
    "ttur_distill_step",
    "gan_losses",
    "tsm_loss_and_grad",
    # Data
    "MogSpec",
    "PairedDataset",
    "Checkpoint",
    "sample_mog",
    "generate_pairs",
    "save_checkpoint",
    "load_checkpoint",
    # Multi-student
    "Partition",
    "StudentBundle",
    "FilteredData",
    "partition_consecutive",
    "partition_kmeans",
    "partition_quadrant",
    "filter_dm",
    "filter_adm",
    "train_msd",
    "route_and_generate",
    # Evaluation
    "Histogram2D",
    "histogram2d",
    "hist_l1",
    "eval_bundle",
    "export_csv",
]
