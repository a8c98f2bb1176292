"""
Histogram metric for 2D sample distributions.

Provides:
- Histogram2D, histogram2d, merge: fixed-range square binning with conservation
- hist_l1: mean absolute bin difference (counts, or densities when totals differ)
- build_teacher_reference, eval_bundle, noise_floor: sharded sampling + comparison
- export_csv, read_histogram_csv, read_metric_series: plain CSV artifacts
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from msdlab.data import atomic_write_bytes
from msdlab.diffusion import Denoiser, heun_sample
from msdlab.errors import ValidationError
from msdlab.msd import Partition, StudentBundle, check_shared_partition, route_and_generate

logger = logging.getLogger(__name__)

Draw = Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]


@dataclass
class Histogram2D:
    """counts[i, j] holds points with x in bin i and y in bin j."""

    bins: int
    lo: float
    hi: float
    counts: np.ndarray
    total_samples: int
    out_of_range: int = 0

    def __post_init__(self) -> None:
        if self.counts.shape != (self.bins, self.bins):
            raise ValidationError(f"counts shape {self.counts.shape}, expected ({self.bins}, {self.bins})")
        if int(self.counts.sum()) + self.out_of_range != self.total_samples:
            raise ValidationError("histogram counts and out-of-range do not add up to the total")

    def same_grid(self, other: Histogram2D) -> bool:
        return self.bins == other.bins and self.lo == other.lo and self.hi == other.hi


def histogram2d(samples: np.ndarray, bins: int = 200, lo: float = -0.75, hi: float = 0.75) -> Histogram2D:
    if bins < 1:
        raise ValidationError(f"bins must be >= 1, got {bins}")
    if not hi > lo:
        raise ValidationError(f"empty range [{lo}, {hi}]")
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    inside = np.all(np.isfinite(samples) & (samples >= lo) & (samples <= hi), axis=1)
    width = (hi - lo) / bins
    # the hi edge belongs to the last bin
    idx = np.minimum(np.floor((samples[inside] - lo) / width).astype(np.int64), bins - 1)
    flat = np.bincount(idx[:, 0] * bins + idx[:, 1], minlength=bins * bins)
    n = samples.shape[0]
    return Histogram2D(bins, lo, hi, flat.reshape(bins, bins).astype(np.int64), n, int(n - inside.sum()))


def merge(a: Histogram2D, b: Histogram2D) -> Histogram2D:
    if not a.same_grid(b):
        raise ValidationError("cannot merge histograms on different grids")
    return Histogram2D(
        a.bins, a.lo, a.hi, a.counts + b.counts,
        a.total_samples + b.total_samples, a.out_of_range + b.out_of_range,
    )


def empty_histogram(bins: int, lo: float, hi: float) -> Histogram2D:
    return Histogram2D(bins, lo, hi, np.zeros((bins, bins), dtype=np.int64), 0, 0)


def hist_l1(a: Histogram2D, b: Histogram2D) -> float:
    """Mean over bins of |a - b|; densities are compared when sample totals differ."""
    if not a.same_grid(b):
        raise ValidationError(
            f"histogram grids differ: {a.bins} bins on [{a.lo}, {a.hi}] vs {b.bins} on [{b.lo}, {b.hi}]"
        )
    if a.total_samples == b.total_samples:
        return float(np.mean(np.abs(a.counts - b.counts)))
    if a.total_samples == 0 or b.total_samples == 0:
        raise ValidationError("cannot compare densities of an empty histogram")
    logger.warning(
        "Comparing histograms with %d vs %d samples as densities", a.total_samples, b.total_samples
    )
    return float(np.mean(np.abs(a.counts / a.total_samples - b.counts / b.total_samples)))


# =============================================================================
# Sampling and comparison
# =============================================================================


@dataclass(frozen=True)
class GridSpec:
    bins: int = 200
    lo: float = -0.75
    hi: float = 0.75


@dataclass
class SampleHistograms:
    collective: Histogram2D
    per_student: dict[int, Histogram2D] = field(default_factory=dict)


def _histograms_of(x: np.ndarray, labels: np.ndarray, grid: GridSpec, partition: Partition | None) -> SampleHistograms:
    out = SampleHistograms(histogram2d(x, grid.bins, grid.lo, grid.hi))
    if partition is not None:
        owners = np.asarray(partition.assignment)[labels]
        for k in range(partition.num_students):
            out.per_student[k] = histogram2d(x[owners == k], grid.bins, grid.lo, grid.hi)
    return out


def sharded_histograms(
    draw: Draw,
    n_samples: int,
    seed: int | np.random.SeedSequence,
    grid: GridSpec,
    partition: Partition | None = None,
    shards: int = 1,
) -> SampleHistograms:
    """Draw n_samples across independent shard streams and sum the histograms.

    Shard results do not depend on thread scheduling.
    """
    if n_samples < 1 or shards < 1:
        raise ValidationError("n_samples and shards must be >= 1")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = root.spawn(shards)
    sizes = [len(part) for part in np.array_split(np.arange(n_samples), shards)]

    def work(i: int) -> SampleHistograms:
        if sizes[i] == 0:
            return SampleHistograms(empty_histogram(grid.bins, grid.lo, grid.hi))
        rng = np.random.default_rng(streams[i])
        x, labels = draw(rng, sizes[i])
        return _histograms_of(x, labels, grid, partition)

    if shards == 1:
        results = [work(0)]
    else:
        results: list[SampleHistograms | None] = [None] * shards
        with ThreadPoolExecutor(max_workers=shards) as executor:
            futures = {executor.submit(work, i): i for i in range(shards)}
            for future in as_completed(futures):
                results[futures[future]] = future.result()

    total = results[0]
    for r in results[1:]:
        total.collective = merge(total.collective, r.collective)
        for k, h in r.per_student.items():
            prev = total.per_student.get(k)
            total.per_student[k] = h if prev is None else merge(prev, h)
    return total


def teacher_draw(teacher: Denoiser, steps: int) -> Draw:
    def draw(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, teacher.num_classes, size=n)
        z = rng.normal(0.0, teacher.schedule.sigma_max, size=(n, teacher.data_dim))
        return heun_sample(teacher, z, labels, steps, final_euler=True), labels

    return draw


def student_draw(bundles: Sequence[StudentBundle]) -> Draw:
    partition = check_shared_partition(bundles)
    g0 = bundles[0].generator

    def draw(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, partition.num_classes, size=n)
        z = rng.normal(0.0, g0.latent_scale, size=(n, g0.latent_dim))
        return route_and_generate(bundles, z, labels), labels

    return draw


def build_teacher_reference(
    teacher: Denoiser,
    n_samples: int,
    seed: int | np.random.SeedSequence,
    *,
    steps: int = 128,
    grid: GridSpec = GridSpec(),
    partition: Partition | None = None,
    shards: int = 1,
) -> SampleHistograms:
    logger.info("Sampling %d teacher points with %d Heun steps", n_samples, steps)
    return sharded_histograms(teacher_draw(teacher, steps), n_samples, seed, grid, partition, shards)


@dataclass
class EvalReport:
    students: int
    l1: float
    n_samples: int
    per_student: dict[int, float] = field(default_factory=dict)
    histograms: SampleHistograms | None = field(default=None, repr=False)

    def summary_line(self) -> str:
        return f"students={self.students} l1={self.l1:.6g}"


def eval_bundle(
    bundles: Sequence[StudentBundle],
    reference: SampleHistograms,
    n_samples: int = 100_000,
    seed: int | np.random.SeedSequence = 0,
    shards: int = 1,
) -> EvalReport:
    """Collective l1 of routed student samples against the teacher reference.

    Per-student entries compare each student's samples with the teacher's
    samples on the same classes, as densities.
    """
    partition = check_shared_partition(bundles)
    ref = reference.collective
    grid = GridSpec(ref.bins, ref.lo, ref.hi)
    hists = sharded_histograms(student_draw(bundles), n_samples, seed, grid, partition, shards)
    per_student = {}
    for k, h in hists.per_student.items():
        ref_k = reference.per_student.get(k)
        if ref_k is None or ref_k.total_samples == 0 or h.total_samples == 0:
            continue
        per_student[k] = float(
            np.mean(np.abs(h.counts / h.total_samples - ref_k.counts / ref_k.total_samples))
        )
    return EvalReport(partition.num_students, hist_l1(hists.collective, ref), n_samples, per_student, hists)


def noise_floor(
    teacher: Denoiser,
    n_samples: int,
    seeds: tuple[int, int] = (0, 1),
    *,
    steps: int = 128,
    grid: GridSpec = GridSpec(),
    shards: int = 1,
) -> float:
    """l1 between two independent teacher draws of the same size."""
    a = build_teacher_reference(teacher, n_samples, seeds[0], steps=steps, grid=grid, shards=shards)
    b = build_teacher_reference(teacher, n_samples, seeds[1], steps=steps, grid=grid, shards=shards)
    return hist_l1(a.collective, b.collective)


# =============================================================================
# CSV artifacts
# =============================================================================


def histogram_frame(h: Histogram2D) -> pd.DataFrame:
    xi, yi = np.meshgrid(np.arange(h.bins), np.arange(h.bins), indexing="ij")
    return pd.DataFrame({"x_index": xi.ravel(), "y_index": yi.ravel(), "count": h.counts.ravel()})


def export_csv(data: Histogram2D | pd.DataFrame | Sequence[tuple[int, float]], path: Path) -> None:
    """Histograms as x_index,y_index,count rows; (step, metric) series as step,metric."""
    if isinstance(data, Histogram2D):
        df = histogram_frame(data)
    elif isinstance(data, pd.DataFrame):
        df = data
    else:
        df = pd.DataFrame(list(data), columns=["step", "metric"])
    atomic_write_bytes(Path(path), df.to_csv(index=False, lineterminator="\n").encode("utf-8"))


def read_histogram_csv(
    path: Path, lo: float = -0.75, hi: float = 0.75, out_of_range: int = 0
) -> Histogram2D:
    """Rebuild a histogram from its CSV.

    The CSV carries in-grid counts only; pass out_of_range (recorded in eval.json
    by the eval command) to restore the original sample total.
    """
    if out_of_range < 0:
        raise ValidationError(f"out_of_range must be >= 0, got {out_of_range}")
    df = pd.read_csv(path)
    if list(df.columns) != ["x_index", "y_index", "count"]:
        raise ValidationError(f"{path}: not a histogram CSV (columns {list(df.columns)})")
    bins = int(round(np.sqrt(len(df))))
    if bins * bins != len(df):
        raise ValidationError(f"{path}: {len(df)} rows is not a square grid")
    counts = np.zeros((bins, bins), dtype=np.int64)
    counts[df["x_index"].to_numpy(), df["y_index"].to_numpy()] = df["count"].to_numpy(dtype=np.int64)
    return Histogram2D(bins, lo, hi, counts, int(counts.sum()) + out_of_range, out_of_range)


def read_metric_series(path: Path) -> pd.DataFrame:
    return pd.read_csv(path)
