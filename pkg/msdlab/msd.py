"""
Multi-student orchestration.

Provides:
- Partition and the consecutive / kmeans / quadrant splitting strategies
- filter_dm, filter_adm: per-student views of paired, real and condition data
- train_msd: TSM -> DM -> ADM pipeline for K students, in eval rounds
- route_and_generate: single-student dispatch at inference
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.spatial.distance import cdist

from msdlab.data import MogSpec, PairedDataset, sample_mog
from msdlab.diffusion import Denoiser, check_labels
from msdlab.distill import (
    DiscriminatorHead,
    DistillConfig,
    DistillState,
    Generator,
    StepMetrics,
    TsmConfig,
    run_distillation,
    train_tsm,
)
from msdlab.errors import PartitionError, StageOrderError, ValidationError

logger = logging.getLogger(__name__)


# =============================================================================
# Partitions
# =============================================================================


@dataclass(frozen=True)
class Partition:
    """Total, disjoint map class -> student."""

    num_classes: int
    num_students: int
    assignment: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.num_students < 1:
            raise PartitionError("need at least one student")
        if len(self.assignment) != self.num_classes:
            raise PartitionError(
                f"assignment covers {len(self.assignment)} classes, expected {self.num_classes}"
            )
        if any(a < 0 or a >= self.num_students for a in self.assignment):
            raise PartitionError(f"assignment references a student outside [0, {self.num_students})")
        counts = np.bincount(np.asarray(self.assignment, dtype=np.int64), minlength=self.num_students)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise PartitionError(f"student {int(empty[0])} owns no classes")

    def classes_of(self, k: int) -> list[int]:
        self.check_student(k)
        return [c for c, a in enumerate(self.assignment) if a == k]

    def check_student(self, k: int) -> None:
        if not 0 <= k < self.num_students:
            raise ValidationError(f"student index {k} outside [0, {self.num_students})")

    def owner(self, label: int) -> int:
        if not 0 <= label < self.num_classes:
            raise ValidationError(f"label {label} not covered by the partition")
        return self.assignment[label]

    def sizes(self) -> list[int]:
        return np.bincount(np.asarray(self.assignment), minlength=self.num_students).tolist()

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "num_students": self.num_students,
                "assignment": list(self.assignment)}

    @classmethod
    def from_dict(cls, d: dict) -> Partition:
        return cls(int(d["num_classes"]), int(d["num_students"]), tuple(int(a) for a in d["assignment"]))


def _check_counts(num_classes: int, k: int) -> None:
    if num_classes < 1 or k < 1:
        raise PartitionError("class and student counts must be positive")
    if k > num_classes:
        raise PartitionError(f"{k} students for {num_classes} classes")


def partition_consecutive(num_classes: int, k: int) -> Partition:
    """Contiguous blocks in class order, sizes differing by at most one."""
    _check_counts(num_classes, k)
    assignment = np.empty(num_classes, dtype=np.int64)
    for student, block in enumerate(np.array_split(np.arange(num_classes), k)):
        assignment[block] = student
    return Partition(num_classes, k, tuple(assignment.tolist()))


def _canonical(labels: np.ndarray) -> tuple[int, ...]:
    """Renumber clusters in order of their lowest class index."""
    mapping: dict[int, int] = {}
    for lab in labels.tolist():
        mapping.setdefault(lab, len(mapping))
    return tuple(mapping[lab] for lab in labels.tolist())


def _farthest_point_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(0, x.shape[0]))]
    dist = cdist(x, x[chosen], "sqeuclidean").min(axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, cdist(x, x[[nxt]], "sqeuclidean")[:, 0])
    return x[chosen].copy()


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(0, x.shape[0]))]
    dist = cdist(x, x[chosen], "sqeuclidean")[:, 0]
    while len(chosen) < k:
        total = dist.sum()
        nxt = int(rng.integers(0, x.shape[0])) if total <= 0 else int(rng.choice(x.shape[0], p=dist / total))
        chosen.append(nxt)
        dist = np.minimum(dist, cdist(x, x[[nxt]], "sqeuclidean")[:, 0])
    return x[chosen].copy()


def _fill_empty(d: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Give every empty cluster its own point, farthest from its centroid among clusters with spares."""
    labels = labels.copy()
    rows = np.arange(labels.shape[0])
    taken = np.zeros(labels.shape[0], dtype=bool)
    for j in range(k):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=k)
        cost = np.where((counts[labels] > 1) & ~taken, d[rows, labels], -np.inf)
        far = int(np.argmax(cost))
        labels[far] = j
        taken[far] = True
    return labels


def _centroids(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    return np.stack([x[labels == j].mean(axis=0) for j in range(k)])


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int) -> tuple[np.ndarray, float]:
    """Lloyd iterations; every returned cluster is non-empty (needs len(x) >= k)."""
    k = centroids.shape[0]
    d = cdist(x, centroids, "sqeuclidean")
    labels = _fill_empty(d, np.argmin(d, axis=1), k)
    for _ in range(max_iters):
        d = cdist(x, _centroids(x, labels, k), "sqeuclidean")
        new = _fill_empty(d, np.argmin(d, axis=1), k)
        if np.array_equal(new, labels):
            break
        labels = new
    final = _centroids(x, labels, k)
    return labels, float(np.sum((x - final[labels]) ** 2))


def partition_kmeans(
    embeddings: np.ndarray, k: int, max_iters: int = 100, seed: int = 0, restarts: int = 10
) -> Partition:
    """Lloyd's algorithm over per-class embeddings, best of `restarts` seeded starts.

    Start 0 is farthest-point, the rest are D^2-weighted; the lowest inertia
    wins, earlier starts winning ties. A cluster that empties is reseeded on a
    distinct far point, so duplicate embeddings still yield K non-empty students.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"embeddings must be (classes, dim), got shape {x.shape}")
    _check_counts(x.shape[0], k)
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, np.inf
    for r in range(restarts):
        init = _farthest_point_init(x, k, rng) if r == 0 else _kmeanspp_init(x, k, rng)
        labels, inertia = _lloyd(x, init, max_iters)
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    logger.debug("kmeans: best inertia %.6g over %d starts", best_inertia, restarts)
    return Partition(x.shape[0], k, _canonical(best_labels))


def partition_quadrant(embeddings: np.ndarray) -> Partition:
    """Four students by sign of the first two embedding coordinates (counterclockwise from +,+)."""
    x = np.round(np.asarray(embeddings, dtype=np.float64), 12)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValidationError(f"quadrant split needs >= 2 embedding dims, got shape {x.shape}")
    right, up = x[:, 0] >= 0, x[:, 1] >= 0
    quadrant = np.where(up, np.where(right, 0, 1), np.where(right, 3, 2))
    return Partition(x.shape[0], 4, tuple(int(q) for q in quadrant))


# =============================================================================
# Stages and bundles
# =============================================================================


class Stage(Enum):
    TSM = "tsm"
    DM = "dm"
    ADM = "adm"

    @property
    def order(self) -> int:
        return list(Stage).index(self)


class Architecture(Enum):
    SAME_SIZE = "same-size"
    SMALLER = "smaller"


def parse_stages(names: Sequence[str | Stage], architecture: Architecture, allow_same_size_tsm: bool = False) -> tuple[Stage, ...]:
    try:
        stages = sorted({Stage(n) for n in names}, key=lambda s: s.order)
    except ValueError as e:
        raise ValidationError(f"unknown stage in {list(names)}") from e
    if not stages:
        raise StageOrderError("no stages requested")
    if Stage.ADM in stages and Stage.DM not in stages:
        raise StageOrderError("adm requires dm")
    if architecture is Architecture.SMALLER and Stage.TSM not in stages:
        raise StageOrderError("smaller students cannot initialize from teacher weights; add tsm")
    if Stage.TSM in stages and architecture is Architecture.SAME_SIZE and not allow_same_size_tsm:
        raise StageOrderError("tsm on a same-size student needs an explicit opt-in")
    return tuple(stages)


@dataclass
class StudentBundle:
    index: int
    partition: Partition
    generator: Generator
    fake: Denoiser
    architecture: Architecture = Architecture.SAME_SIZE
    stage: Stage | None = None
    disc_head: DiscriminatorHead | None = None
    tsm_student: Denoiser | None = None
    history: list[StepMetrics] = field(default_factory=list, repr=False)

    @property
    def classes(self) -> list[int]:
        return self.partition.classes_of(self.index)

    def advance(self, stage: Stage) -> None:
        if self.stage is not None and stage.order <= self.stage.order:
            raise StageOrderError(f"student {self.index}: cannot go from {self.stage.value} to {stage.value}")
        self.stage = stage


# =============================================================================
# Filtering
# =============================================================================


@dataclass(frozen=True)
class MogRealSampler:
    """Real data drawn from the mixture, optionally restricted to classes."""

    spec: MogSpec
    classes: tuple[int, ...] | None = None

    def __call__(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        return sample_mog(self.spec, n, rng, self.classes)

    def restricted(self, classes: Sequence[int]) -> MogRealSampler:
        return replace(self, classes=tuple(classes))


@dataclass(frozen=True)
class PairedRealSampler:
    """Teacher outputs of the paired dataset used as the real distribution."""

    paired: PairedDataset

    def __call__(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        _, labels, y = self.paired.sample(rng, n)
        return y, labels

    def restricted(self, classes: Sequence[int]) -> PairedRealSampler:
        subset = self.paired.labels[np.isin(self.paired.labels, classes)]
        if subset.size == 0:
            raise PartitionError(f"paired dataset has no rows for classes {list(classes)}")
        return PairedRealSampler(self.paired.restrict(list(classes)))


RealSource = MogRealSampler | PairedRealSampler


@dataclass
class FilteredData:
    conditions: tuple[int, ...]
    paired: PairedDataset | None = None
    real: RealSource | None = None

    def draw_conditions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        pool = np.asarray(self.conditions, dtype=np.int64)
        return pool[rng.integers(0, pool.size, size=n)]

    def draw_pairs(self, rng: np.random.Generator, n: int):
        if self.paired is None:
            raise ValidationError("no paired dataset attached")
        return self.paired.sample(rng, n)


def filter_dm(paired: PairedDataset | None, partition: Partition, k: int, strict: bool = False) -> FilteredData:
    """Conditions restricted to the student's classes; pairs kept whole unless strict."""
    classes = partition.classes_of(k)
    if strict and paired is not None:
        if not np.any(np.isin(paired.labels, classes)):
            raise PartitionError(f"strict filtering leaves student {k} without pairs")
        paired = paired.restrict(classes)
    return FilteredData(tuple(classes), paired)


def filter_adm(real_sampler: RealSource, partition: Partition, k: int) -> FilteredData:
    """Real draws and conditions both restricted to the student's classes."""
    classes = partition.classes_of(k)
    return FilteredData(tuple(classes), None, real_sampler.restricted(classes))


# =============================================================================
# Pipeline
# =============================================================================


@dataclass(frozen=True)
class MsdConfig:
    dm: DistillConfig = field(default_factory=DistillConfig)
    adm: DistillConfig | None = None
    tsm: TsmConfig | None = None
    stages: tuple[str, ...] = ("dm",)
    architecture: Architecture = Architecture.SAME_SIZE
    student_hidden: tuple[int, ...] | None = None
    allow_same_size_tsm: bool = False
    shared_tsm: bool = False
    strict_paired: bool = False
    real_source: str = "data"
    reinit_fake: bool = True
    head_hidden: int = 64
    eval_every: int = 0
    parallel: bool = False
    progress: bool = True

    def __post_init__(self) -> None:
        if self.real_source not in ("data", "paired"):
            raise ValidationError(f"real_source must be 'data' or 'paired', got {self.real_source!r}")
        if self.architecture is Architecture.SMALLER and not self.student_hidden:
            raise ValidationError("smaller students need hidden sizes")
        if self.eval_every < 0:
            raise ValidationError("eval_every must be non-negative")


RoundCallback = Callable[[Stage, int, list[StudentBundle]], None]


def _rounds(total: int, every: int) -> list[int]:
    if every <= 0 or every >= total:
        return [total] if total else []
    sizes = [every] * (total // every)
    if total % every:
        sizes.append(total % every)
    return sizes


def _run_stage(
    stage: Stage,
    states: list[DistillState],
    bundles: list[StudentBundle],
    rngs: list[np.random.Generator],
    cfg: DistillConfig,
    msd_cfg: MsdConfig,
    on_round: RoundCallback | None,
) -> None:
    done = 0
    for chunk in _rounds(cfg.iterations, msd_cfg.eval_every):

        def work(k: int) -> list[StepMetrics]:
            return run_distillation(
                states[k], cfg, rngs[k], iterations=chunk,
                desc=f"{stage.value}[{k}]", progress=msd_cfg.progress,
            )

        if msd_cfg.parallel and len(states) > 1:
            with ThreadPoolExecutor(max_workers=len(states)) as executor:
                futures = {executor.submit(work, k): k for k in range(len(states))}
                for future in as_completed(futures):
                    bundles[futures[future]].history.extend(future.result())
        else:
            for k in range(len(states)):
                bundles[k].history.extend(work(k))
        done += chunk
        if on_round is not None:
            on_round(stage, done, bundles)


def train_msd(
    teacher: Denoiser,
    partition: Partition,
    cfg: MsdConfig,
    seed: int | np.random.SeedSequence,
    *,
    paired: PairedDataset | None,
    data: MogRealSampler,
    on_round: RoundCallback | None = None,
) -> list[StudentBundle]:
    """Distill the teacher into one single-step generator per partition block.

    Each student gets an independent random stream, so sequential and parallel
    runs are bitwise identical.
    """
    stages = parse_stages(cfg.stages, cfg.architecture, cfg.allow_same_size_tsm)
    if Stage.TSM in stages and cfg.tsm is None:
        raise ValidationError("tsm stage requested without a tsm config")
    if Stage.ADM in stages and cfg.adm is None:
        raise ValidationError("adm stage requested without an adm config")
    needs_pairs = cfg.dm.regression_weight > 0 or (
        Stage.ADM in stages and cfg.adm is not None and cfg.adm.regression_weight > 0
    )
    if needs_pairs and paired is None:
        raise ValidationError("regression loss requested without a paired dataset")
    if cfg.real_source == "paired" and Stage.ADM in stages and paired is None:
        raise ValidationError("real_source=paired needs a paired dataset")
    cfg.dm.check_schedule(teacher.schedule)

    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(partition.num_students + 1)
    rngs = [np.random.default_rng(s) for s in children[:-1]]
    shared_rng = np.random.default_rng(children[-1])
    K = partition.num_students

    # --- initialization (and optional TSM) ---
    def new_tsm_student(rng: np.random.Generator) -> Denoiser:
        if cfg.architecture is Architecture.SAME_SIZE:
            return teacher.copy()
        return Denoiser.init(
            teacher.num_classes, list(cfg.student_hidden), rng,
            data_dim=teacher.data_dim, sigma_data=teacher.sigma_data,
            schedule=teacher.schedule, embed_dim=teacher.embed_dim,
        )

    tsm_students: list[Denoiser | None] = [None] * K
    if Stage.TSM in stages:
        if cfg.shared_tsm:
            shared = new_tsm_student(shared_rng)
            train_tsm(shared, teacher, data, cfg.tsm, shared_rng, desc="tsm[shared]", progress=cfg.progress)
            tsm_students = [shared] * K
        else:
            for k in range(K):
                student = new_tsm_student(rngs[k])
                sampler = data.restricted(partition.classes_of(k))
                train_tsm(student, teacher, sampler, cfg.tsm, rngs[k], desc=f"tsm[{k}]", progress=cfg.progress)
                tsm_students[k] = student

    bundles = []
    for k in range(K):
        source = tsm_students[k] if tsm_students[k] is not None else teacher
        bundle = StudentBundle(
            k, partition, Generator.from_denoiser(source), source.copy(), cfg.architecture,
            tsm_student=tsm_students[k],
        )
        if Stage.TSM in stages:
            bundle.advance(Stage.TSM)
        bundles.append(bundle)

    # --- DM ---
    if Stage.DM in stages:
        states = []
        for k, b in enumerate(bundles):
            b.advance(Stage.DM)
            fd = filter_dm(paired, partition, k, strict=cfg.strict_paired)
            states.append(
                DistillState.create(
                    teacher, b.generator, b.fake, cfg.dm, fd.draw_conditions,
                    draw_pairs=fd.draw_pairs if fd.paired is not None else None,
                )
            )
        _run_stage(Stage.DM, states, bundles, rngs, cfg.dm, cfg, on_round)

    # --- ADM ---
    if Stage.ADM in stages:
        adm_cfg = cfg.adm
        adm_cfg.check_schedule(teacher.schedule)
        real: RealSource = PairedRealSampler(paired) if cfg.real_source == "paired" else data
        states = []
        for k, b in enumerate(bundles):
            b.advance(Stage.ADM)
            if cfg.reinit_fake:
                b.fake = (b.tsm_student or teacher).copy()
            b.disc_head = DiscriminatorHead.init(b.fake.net.layer_sizes[-2], cfg.head_hidden, rngs[k])
            fd = filter_adm(real, partition, k)
            pairs = filter_dm(paired, partition, k, strict=cfg.strict_paired) if paired is not None else None
            states.append(
                DistillState.create(
                    teacher, b.generator, b.fake, adm_cfg, fd.draw_conditions,
                    draw_pairs=pairs.draw_pairs if pairs is not None else None,
                    draw_real=fd.real, head=b.disc_head,
                )
            )
        _run_stage(Stage.ADM, states, bundles, rngs, adm_cfg, cfg, on_round)

    logger.info("Trained %d students through stages %s", K, ",".join(s.value for s in stages))
    return bundles


def check_shared_partition(bundles: Sequence[StudentBundle]) -> Partition:
    if not bundles:
        raise ValidationError("no student bundles")
    partition = bundles[0].partition
    if any(b.partition != partition for b in bundles):
        raise ValidationError("student bundles disagree on the partition")
    if sorted(b.index for b in bundles) != list(range(partition.num_students)):
        raise ValidationError(
            f"expected students 0..{partition.num_students - 1}, got {sorted(b.index for b in bundles)}"
        )
    return partition


def route_and_generate(bundles: Sequence[StudentBundle], z: np.ndarray, labels: np.ndarray | int) -> np.ndarray:
    """Each row is generated by the one student owning its label."""
    partition = check_shared_partition(bundles)
    by_index = {b.index: b for b in bundles}
    z = np.atleast_2d(z)
    lab = check_labels(labels, partition.num_classes, z.shape[0])
    owners = np.asarray(partition.assignment, dtype=np.int64)[lab]
    out = np.empty((z.shape[0], by_index[0].generator.data_dim))
    for k in np.unique(owners).tolist():
        rows = owners == k
        out[rows] = by_index[k].generator.generate(z[rows], lab[rows])
    return out
