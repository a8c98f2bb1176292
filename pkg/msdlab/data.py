"""
Toy data, paired datasets and on-disk artifacts.

Provides:
- MogSpec, sample_mog: class-conditional mixture of Gaussians on two circles
- PairedDataset, generate_pairs, replay_pairs: teacher (z, label) -> y pairs
- Checkpoint, save_checkpoint, load_checkpoint: versioned binary container
- save_pairs, load_pairs: Parquet with provenance in the schema metadata
- hash_file: short content hash used for provenance
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.parquet as pq

from msdlab.diffusion import Denoiser, NoiseSchedule, heun_sample
from msdlab.distill import DiscriminatorHead, Generator
from msdlab.errors import (
    CorruptHeaderError,
    RoleMismatchError,
    TruncatedFileError,
    UnknownVersionError,
    ValidationError,
)
from msdlab.nn_core import Activation, AdamWState, Mlp

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MSDCKPT\x00"
CHECKPOINT_VERSION = 1
PAIRS_FORMAT_VERSION = "1"
_HEADER = struct.Struct("<II")


def hash_file(path: Path) -> str:
    """Compute SHA256 hash, return first 16 chars."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write to a temp file beside `path`, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# =============================================================================
# Mixture of Gaussians
# =============================================================================


@dataclass(frozen=True)
class MogSpec:
    """Class c sits on the outer circle; its components ring it on an inner circle."""

    num_classes: int = 8
    components_per_class: int = 8
    outer_radius: float = 0.5
    inner_radius: float = 0.1
    component_std: float = 0.005

    def __post_init__(self) -> None:
        if self.num_classes < 1 or self.components_per_class < 1:
            raise ValidationError("class and component counts must be positive")
        if not 0 < self.component_std < self.inner_radius < self.outer_radius:
            raise ValidationError(
                "need 0 < component_std < inner_radius < outer_radius, got "
                f"{self.component_std}, {self.inner_radius}, {self.outer_radius}"
            )


def _ring(radius: float, count: int) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(count) / count
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def class_centers(spec: MogSpec) -> np.ndarray:
    """(num_classes, 2) class means, counterclockwise from angle 0."""
    return _ring(spec.outer_radius, spec.num_classes)


def sample_mog(
    spec: MogSpec,
    n: int,
    rng: np.random.Generator,
    classes: np.ndarray | list[int] | None = None,
    *,
    inner_radius: float | None = None,
    component_std: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw n (x, label) rows, labels uniform over `classes` (default all).

    inner_radius/component_std override the spec without its ordering check,
    so degenerate geometries (e.g. zero spread) can be drawn.
    """
    if n < 1:
        raise ValidationError(f"sample count must be >= 1, got {n}")
    inner = spec.inner_radius if inner_radius is None else inner_radius
    std = spec.component_std if component_std is None else component_std
    if classes is None:
        labels = rng.integers(0, spec.num_classes, size=n)
    else:
        pool = np.asarray(classes, dtype=np.int64)
        if pool.size == 0 or np.any(pool < 0) or np.any(pool >= spec.num_classes):
            raise ValidationError(f"invalid class subset {pool.tolist()}")
        labels = pool[rng.integers(0, pool.size, size=n)]
    comps = rng.integers(0, spec.components_per_class, size=n)
    offsets = _ring(inner, spec.components_per_class)
    x = class_centers(spec)[labels] + offsets[comps] + std * rng.standard_normal((n, 2))
    return x, labels.astype(np.int64)


# =============================================================================
# Paired dataset
# =============================================================================


@dataclass
class PairedDataset:
    """Rows (z, label, y) with y = teacher sample from latent z."""

    z: np.ndarray
    labels: np.ndarray
    y: np.ndarray
    teacher_checksum: str = ""
    sampler_steps: int = 0
    final_euler: bool = True

    def __post_init__(self) -> None:
        n = self.labels.shape[0]
        if n == 0:
            raise ValidationError("paired dataset is empty")
        if self.z.shape[0] != n or self.y.shape[0] != n or self.labels.ndim != 1:
            raise ValidationError(
                f"row counts disagree: z {self.z.shape}, labels {self.labels.shape}, y {self.y.shape}"
            )
        if not np.all(np.isfinite(self.y)):
            raise ValidationError("paired dataset holds non-finite outputs")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def restrict(self, classes: list[int]) -> PairedDataset:
        mask = np.isin(self.labels, classes)
        return PairedDataset(
            self.z[mask], self.labels[mask], self.y[mask],
            self.teacher_checksum, self.sampler_steps, self.final_euler,
        )

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self), size=n)
        return self.z[idx], self.labels[idx], self.y[idx]


def generate_pairs(
    teacher: Denoiser,
    n: int,
    sampler_steps: int,
    rng: np.random.Generator,
    *,
    final_euler: bool = True,
    teacher_checksum: str | None = None,
) -> PairedDataset:
    """Labels uniform, z ~ N(0, sigma_max^2 I), y = heun_sample(teacher, z, label)."""
    if n < 1:
        raise ValidationError(f"pair count must be >= 1, got {n}")
    labels = rng.integers(0, teacher.num_classes, size=n)
    z = rng.normal(0.0, teacher.schedule.sigma_max, size=(n, teacher.data_dim))
    y = heun_sample(teacher, z, labels, sampler_steps, final_euler=final_euler)
    checksum = teacher.net.checksum() if teacher_checksum is None else teacher_checksum
    logger.info("Generated %d pairs with %d sampler steps", n, sampler_steps)
    return PairedDataset(z, labels.astype(np.int64), y, checksum, sampler_steps, final_euler)


def replay_pairs(teacher: Denoiser, ds: PairedDataset) -> np.ndarray:
    """Recompute y from the stored (z, label) with the recorded sampler settings."""
    return heun_sample(teacher, ds.z, ds.labels, ds.sampler_steps, final_euler=ds.final_euler)


def save_pairs(path: Path, ds: PairedDataset) -> None:
    df = pd.DataFrame(
        {
            "z0": ds.z[:, 0],
            "z1": ds.z[:, 1],
            "label": ds.labels.astype(np.int64),
            "y0": ds.y[:, 0],
            "y1": ds.y[:, 1],
        }
    )
    table = pa.Table.from_pandas(df, preserve_index=False)
    existing_metadata = table.schema.metadata or {}
    provenance = {
        b"msd_format": PAIRS_FORMAT_VERSION.encode(),
        b"teacher_checksum": ds.teacher_checksum.encode(),
        b"sampler_steps": str(ds.sampler_steps).encode(),
        b"final_euler": str(int(ds.final_euler)).encode(),
    }
    table = table.replace_schema_metadata({**existing_metadata, **provenance})
    sink = pa.BufferOutputStream()
    pq.write_table(table, sink)
    atomic_write_bytes(path, sink.getvalue().to_pybytes())


def load_pairs(path: Path) -> PairedDataset:
    try:
        table = pq.read_table(path)
    except (pa.ArrowInvalid, OSError) as e:
        if isinstance(e, FileNotFoundError):
            raise
        raise CorruptHeaderError(f"{path}: unreadable paired dataset ({e})") from e
    meta = table.schema.metadata or {}
    version = meta.get(b"msd_format")
    if version is None:
        raise CorruptHeaderError(f"{path}: missing paired-dataset provenance")
    if version.decode() != PAIRS_FORMAT_VERSION:
        raise UnknownVersionError(f"{path}: paired-dataset format {version.decode()!r}")
    df = table.to_pandas()
    missing = {"z0", "z1", "label", "y0", "y1"} - set(df.columns)
    if missing:
        raise CorruptHeaderError(f"{path}: missing columns {sorted(missing)}")
    return PairedDataset(
        df[["z0", "z1"]].to_numpy(dtype=np.float64),
        df["label"].to_numpy(dtype=np.int64),
        df[["y0", "y1"]].to_numpy(dtype=np.float64),
        meta.get(b"teacher_checksum", b"").decode(),
        int(meta.get(b"sampler_steps", b"0")),
        meta.get(b"final_euler", b"1") == b"1",
    )


# =============================================================================
# Checkpoints
# =============================================================================


class Role(Enum):
    TEACHER = "teacher"
    GENERATOR = "generator"
    FAKE = "fake"
    DISC_HEAD = "disc_head"
    TSM_STUDENT = "tsm_student"


@dataclass
class Checkpoint:
    role: Role
    architecture: dict
    params: np.ndarray
    seed: int | None = None
    iteration: int = 0
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    optimizer_step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = param_count(self.architecture["layer_sizes"])
        if self.params.shape != (expected,):
            raise ValidationError(
                f"payload has {self.params.size} values, architecture needs {expected}"
            )
        if (self.first_moment is None) != (self.second_moment is None):
            raise ValidationError("optimizer moments must be stored together")

    def optimizer_state(self, net: Mlp, betas: tuple[float, float]) -> AdamWState | None:
        if self.first_moment is None:
            return None
        m = Mlp.from_flat(net.layer_sizes, self.first_moment).parameters()
        v = Mlp.from_flat(net.layer_sizes, self.second_moment).parameters()
        return AdamWState(m, v, self.optimizer_step, betas[0], betas[1])


def param_count(layer_sizes: list[int]) -> int:
    return sum(o * i + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    sections = [ckpt.params]
    if ckpt.first_moment is not None:
        sections += [ckpt.first_moment, ckpt.second_moment]
    meta = {
        "role": ckpt.role.value,
        "architecture": ckpt.architecture,
        "seed": ckpt.seed,
        "iteration": ckpt.iteration,
        "sections": [int(s.size) for s in sections],
        "optimizer_step": ckpt.optimizer_step,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(s, dtype="<f8").tobytes() for s in sections)
    header = CHECKPOINT_MAGIC + _HEADER.pack(CHECKPOINT_VERSION, len(meta_bytes))
    atomic_write_bytes(path, header + meta_bytes + payload)


def load_checkpoint(path: Path, expected_role: Role | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    head_len = len(CHECKPOINT_MAGIC) + _HEADER.size
    if len(data) < len(CHECKPOINT_MAGIC):
        if CHECKPOINT_MAGIC.startswith(data) and data:
            raise TruncatedFileError(f"{path}: file ends inside the header")
        raise CorruptHeaderError(f"{path}: not a checkpoint")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic bytes")
    if len(data) < head_len:
        raise TruncatedFileError(f"{path}: file ends inside the header")
    version, meta_len = _HEADER.unpack_from(data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise UnknownVersionError(f"{path}: checkpoint version {version}")
    if len(data) < head_len + meta_len:
        raise TruncatedFileError(f"{path}: file ends inside the metadata block")
    try:
        meta = json.loads(data[head_len : head_len + meta_len].decode("utf-8"))
        role = Role(meta["role"])
        sizes = [int(s) for s in meta["sections"]]
        architecture = meta["architecture"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
        raise CorruptHeaderError(f"{path}: unreadable metadata ({e})") from e

    body = data[head_len + meta_len :]
    expected_bytes = 8 * sum(sizes)
    if len(body) < expected_bytes:
        raise TruncatedFileError(f"{path}: payload has {len(body)} bytes, expected {expected_bytes}")
    if len(body) > expected_bytes or len(sizes) not in (1, 3):
        raise CorruptHeaderError(f"{path}: payload layout does not match metadata")
    if expected_role is not None and role is not expected_role:
        raise RoleMismatchError(f"{path}: holds a {role.value} checkpoint, expected {expected_role.value}")

    arrays, offset = [], 0
    for size in sizes:
        arrays.append(np.frombuffer(body, dtype="<f8", count=size, offset=offset).astype(np.float64))
        offset += 8 * size
    try:
        return Checkpoint(
            role=role,
            architecture=architecture,
            params=arrays[0],
            seed=meta.get("seed"),
            iteration=int(meta.get("iteration", 0)),
            first_moment=arrays[1] if len(arrays) == 3 else None,
            second_moment=arrays[2] if len(arrays) == 3 else None,
            optimizer_step=int(meta.get("optimizer_step", 0)),
            rng_state=meta.get("rng_state"),
            extra=meta.get("extra") or {},
        )
    except (ValidationError, KeyError) as e:
        raise CorruptHeaderError(f"{path}: {e}") from e


def _net_architecture(net: Mlp) -> dict:
    return {"layer_sizes": list(net.layer_sizes), "activation": net.activation.value}


def _net_from(ckpt: Checkpoint) -> Mlp:
    arch = ckpt.architecture
    return Mlp.from_flat(arch["layer_sizes"], ckpt.params, Activation(arch.get("activation", "silu")))


def _moments(opt: AdamWState | None) -> dict:
    if opt is None:
        return {}
    return {
        "first_moment": np.concatenate([m.ravel() for m in opt.first_moment]),
        "second_moment": np.concatenate([v.ravel() for v in opt.second_moment]),
        "optimizer_step": opt.step,
    }


def denoiser_checkpoint(
    d: Denoiser,
    role: Role = Role.TEACHER,
    *,
    seed: int | None = None,
    iteration: int = 0,
    opt: AdamWState | None = None,
    rng: np.random.Generator | None = None,
) -> Checkpoint:
    arch = {
        **_net_architecture(d.net),
        "num_classes": d.num_classes,
        "sigma_data": d.sigma_data,
        "embed_dim": d.embed_dim,
        "schedule": {
            "sigma_min": d.schedule.sigma_min,
            "sigma_max": d.schedule.sigma_max,
            "num_steps": d.schedule.num_steps,
            "rho": d.schedule.rho,
        },
    }
    return Checkpoint(
        role, arch, d.net.flatten(), seed, iteration,
        rng_state=rng.bit_generator.state if rng is not None else None,
        **_moments(opt),
    )


def denoiser_from_checkpoint(ckpt: Checkpoint) -> Denoiser:
    arch = ckpt.architecture
    return Denoiser(
        _net_from(ckpt),
        int(arch["num_classes"]),
        float(arch["sigma_data"]),
        NoiseSchedule(**arch["schedule"]),
        int(arch["embed_dim"]),
    )


def generator_checkpoint(g: Generator, *, seed: int | None = None, iteration: int = 0) -> Checkpoint:
    arch = {
        **_net_architecture(g.net),
        "num_classes": g.num_classes,
        "latent_dim": g.latent_dim,
        "latent_scale": g.latent_scale,
    }
    return Checkpoint(Role.GENERATOR, arch, g.net.flatten(), seed, iteration)


def generator_from_checkpoint(ckpt: Checkpoint) -> Generator:
    arch = ckpt.architecture
    return Generator(
        _net_from(ckpt), int(arch["num_classes"]), int(arch["latent_dim"]), float(arch["latent_scale"])
    )


def head_checkpoint(head: DiscriminatorHead, *, seed: int | None = None, iteration: int = 0) -> Checkpoint:
    return Checkpoint(Role.DISC_HEAD, _net_architecture(head.net), head.net.flatten(), seed, iteration)


def head_from_checkpoint(ckpt: Checkpoint) -> DiscriminatorHead:
    return DiscriminatorHead(_net_from(ckpt))
