#!/usr/bin/env python3
"""
Configuration coordinator for distillation runs.

Provides:
- Configuration loading from pipeline.yaml plus a user overlay
- Dotted --set overrides, --full-scale and the MSD_SEED environment variable
- Validation into a typed RunConfig (unknown keys rejected)
- Run directory guard, checkpoint discovery and run manifests
"""

import argparse
import json
import os
import sys
from copy import deepcopy
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import yaml
from dotenv import load_dotenv

# Add repo root to path for msdlab imports
REPO_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(REPO_ROOT))

from msdlab.data import MogSpec, hash_file  # noqa: E402
from msdlab.diffusion import NoiseSchedule, TrainConfig  # noqa: E402
from msdlab.distill import DistillConfig, SigmaSampling, TsmConfig  # noqa: E402
from msdlab.errors import ConfigError, ValidationError  # noqa: E402
from msdlab.evaluation import GridSpec  # noqa: E402

# Path to default configuration
CONFIG_PATH = REPO_ROOT / "pipeline.yaml"

SEED_ENV = "MSD_SEED"

# Fields whose default is null but which take a number when set
NULLABLE_NUMBERS = {"teacher.grad_clip", "msd.student_width"}

FULL_SCALE = {
    "teacher": {"iterations": 100_000},
    "distill": {"iterations": 200_000, "generator_lr": 1e-7, "fake_lr": 1e-7},
}

STRATEGIES = ("consecutive", "kmeans", "quadrant")
FILTER_MODES = ("full", "strict")


def load_config(config_path: Path | None = None) -> dict:
    """Load pipeline configuration from YAML file."""
    path = config_path or CONFIG_PATH
    with open(path) as f:
        return yaml.safe_load(f) or {}


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _as_float(key: str, value):
    # PyYAML reads "1e-7" (no dot) as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(key, f"expected a number, got {value!r}") from None
    return value


def _check_type(key: str, default, value):
    """Return value, coerced where the default's type allows it; raise ConfigError otherwise."""
    if key in NULLABLE_NUMBERS:
        value = _as_float(key, value)
        if value is None or _is_number(value):
            return value
        raise ConfigError(key, f"expected a number or null, got {value!r}")
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        value = _as_float(key, value)
        ok = _is_number(value)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(key, f"expected {type(default).__name__}, got {value!r}")
    return value


def merge_config(base: dict, overlay: dict, prefix: str = "") -> dict:
    """Overlay known keys onto base; unknown keys and wrong types raise ConfigError."""
    merged = deepcopy(base)
    for key, value in overlay.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(dotted, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(dotted, "expected a section")
            merged[key] = merge_config(base[key], value, f"{dotted}.")
        else:
            merged[key] = _check_type(dotted, base[key], value)
    return merged


def parse_overrides(items: list[str]) -> dict:
    """Turn ["distill.lr=1e-6", ...] into a nested dict; values parse as YAML scalars."""
    out: dict = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(item, "override must look like section.key=value")
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


# =============================================================================
# Typed configuration
# =============================================================================


@dataclass(frozen=True)
class NetworkConfig:
    hidden_width: int
    hidden_layers: int
    sigma_data: float
    noise_embed_dim: int

    @property
    def hidden_sizes(self) -> list[int]:
        return [self.hidden_width] * self.hidden_layers


@dataclass(frozen=True)
class TeacherSettings:
    train: TrainConfig
    log_every: int
    checkpoint_every: int


@dataclass(frozen=True)
class PairsConfig:
    count: int
    sampler_steps: int
    final_euler: bool


@dataclass(frozen=True)
class AdmSettings:
    distill: DistillConfig
    head_hidden: int
    reinit_fake: bool
    real_source: str


@dataclass(frozen=True)
class MsdSettings:
    students: int
    strategy: str
    stages: tuple[str, ...]
    strict_paired: bool
    student_width: int | None
    kmeans_iters: int
    kmeans_restarts: int
    parallel: bool


@dataclass(frozen=True)
class EvalSettings:
    grid: GridSpec
    samples: int
    teacher_steps: int
    periodic_samples: int
    shards: int


@dataclass(frozen=True)
class AblateSettings:
    students: tuple[int, ...]
    batch_sizes: tuple[int, ...]
    strategies: tuple[str, ...]
    filter_modes: tuple[str, ...]


@dataclass(frozen=True)
class RunConfig:
    seed: int
    dataset: MogSpec
    schedule: NoiseSchedule
    network: NetworkConfig
    teacher: TeacherSettings
    pairs: PairsConfig
    distill: DistillConfig
    eval_every: int
    adm: AdmSettings
    tsm: TsmConfig
    shared_tsm: bool
    msd: MsdSettings
    eval: EvalSettings
    ablate: AblateSettings
    raw: dict

    def snapshot(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False)


def _section(name: str, build):
    """Build one section, reporting library validation errors against the section."""
    try:
        return build()
    except ConfigError:
        raise
    except (ValidationError, TypeError, ValueError) as e:
        raise ConfigError(name, str(e)) from e


def _positive(key: str, value: int | float) -> None:
    if value <= 0:
        raise ConfigError(key, f"must be positive, got {value}")


def _distill_config(section: dict) -> DistillConfig:
    return DistillConfig(
        iterations=section["iterations"],
        generator_lr=float(section["generator_lr"]),
        fake_lr=float(section["fake_lr"]),
        weight_decay=float(section["weight_decay"]),
        regression_weight=float(section["regression_weight"]),
        ttur_n=section["ttur_n"],
        gan_gen_weight=float(section.get("gan_gen_weight", 0.0)),
        gan_disc_weight=float(section.get("gan_disc_weight", 0.0)),
        t_min_index=section["t_min_index"],
        t_max_index=section["t_max_index"],
        batch_size=section["batch_size"],
        grad_clip=float(section["grad_clip"]),
    )


def validate_config(raw: dict) -> RunConfig:
    """Check every field before any work starts."""
    schedule = _section("schedule", lambda: NoiseSchedule(**raw["schedule"]))
    net = raw["network"]
    for key in ("hidden_width", "hidden_layers", "noise_embed_dim"):
        _positive(f"network.{key}", net[key])
    _positive("network.sigma_data", net["sigma_data"])

    t = raw["teacher"]
    teacher = TeacherSettings(
        _section("teacher", lambda: TrainConfig(
            t["iterations"], float(t["lr"]), float(t["weight_decay"]), tuple(t["betas"]),
            t["batch_size"], t["grad_clip"],
        )),
        t["log_every"],
        t["checkpoint_every"],
    )
    if len(t["betas"]) != 2:
        raise ConfigError("teacher.betas", "expected two values")

    p = raw["pairs"]
    _positive("pairs.count", p["count"])
    _positive("pairs.sampler_steps", p["sampler_steps"])

    distill = _section("distill", lambda: _distill_config(raw["distill"]))
    _section("distill", lambda: distill.check_schedule(schedule))

    a = raw["adm"]
    if a["real_source"] not in ("data", "paired"):
        raise ConfigError("adm.real_source", f"expected 'data' or 'paired', got {a['real_source']!r}")
    adm = AdmSettings(
        _section("adm", lambda: _distill_config(a)), a["head_hidden"], a["reinit_fake"], a["real_source"]
    )
    _section("adm", lambda: adm.distill.check_schedule(schedule))

    s = raw["tsm"]
    tsm = _section("tsm", lambda: TsmConfig(
        iterations=s["iterations"], lr=float(s["lr"]), weight_decay=float(s["weight_decay"]),
        batch_size=s["batch_size"], sigma_sampling=SigmaSampling(s["sigma_sampling"]),
        p_mean=float(s["p_mean"]), p_std=float(s["p_std"]),
    ))

    m = raw["msd"]
    if m["strategy"] not in STRATEGIES:
        raise ConfigError("msd.strategy", f"expected one of {STRATEGIES}, got {m['strategy']!r}")
    bad = [st for st in m["stages"] if st not in ("tsm", "dm", "adm")]
    if bad:
        raise ConfigError("msd.stages", f"unknown stages {bad}")
    _positive("msd.students", m["students"])
    if m["students"] > raw["dataset"]["num_classes"]:
        raise ConfigError("msd.students", "more students than classes")
    if m["student_width"] is not None:
        _positive("msd.student_width", m["student_width"])
    msd = MsdSettings(
        m["students"], m["strategy"], tuple(m["stages"]), m["strict_paired"],
        None if m["student_width"] is None else int(m["student_width"]),
        m["kmeans_iters"], m["kmeans_restarts"], m["parallel"],
    )

    e = raw["eval"]
    for key in ("bins", "samples", "teacher_steps", "periodic_samples", "shards"):
        _positive(f"eval.{key}", e[key])
    if not e["hi"] > e["lo"]:
        raise ConfigError("eval.hi", "must exceed eval.lo")

    ab = raw["ablate"]
    for st in ab["strategies"]:
        if st not in STRATEGIES:
            raise ConfigError("ablate.strategies", f"unknown strategy {st!r}")
    for fm in ab["filter_modes"]:
        if fm not in FILTER_MODES:
            raise ConfigError("ablate.filter_modes", f"unknown filter mode {fm!r}")

    if raw["distill"]["eval_every"] < 0:
        raise ConfigError("distill.eval_every", "must be non-negative")

    return RunConfig(
        seed=raw["seed"],
        dataset=_section("dataset", lambda: MogSpec(**raw["dataset"])),
        schedule=schedule,
        network=NetworkConfig(**net),
        teacher=teacher,
        pairs=PairsConfig(**p),
        distill=distill,
        eval_every=raw["distill"]["eval_every"],
        adm=adm,
        tsm=tsm,
        shared_tsm=s["shared"],
        msd=msd,
        eval=EvalSettings(GridSpec(e["bins"], float(e["lo"]), float(e["hi"])), e["samples"],
                          e["teacher_steps"], e["periodic_samples"], e["shards"]),
        ablate=AblateSettings(tuple(ab["students"]), tuple(ab["batch_sizes"]),
                              tuple(ab["strategies"]), tuple(ab["filter_modes"])),
        raw=raw,
    )


def build_run_config(
    user_config: Path | None = None,
    overrides: list[str] | None = None,
    full_scale: bool = False,
) -> RunConfig:
    """defaults <- user file <- --set <- --full-scale <- MSD_SEED."""
    raw = load_config()
    if user_config is not None:
        if not Path(user_config).is_file():
            raise ConfigError("config", f"file not found: {user_config}")
        try:
            overlay = load_config(Path(user_config))
        except yaml.YAMLError as e:
            raise ConfigError("config", f"invalid YAML: {e}") from e
        raw = merge_config(raw, overlay)
    if overrides:
        raw = merge_config(raw, parse_overrides(overrides))
    if full_scale:
        raw = merge_config(raw, FULL_SCALE)

    load_dotenv()
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        try:
            raw["seed"] = int(env_seed)
        except ValueError as e:
            raise ConfigError(SEED_ENV, f"not an integer: {env_seed!r}") from e
    return validate_config(raw)


# =============================================================================
# Run directories
# =============================================================================


def prepare_run_dir(path: Path, force: bool = False, allow_existing: bool = False) -> Path:
    """Create a run directory; an existing non-empty one needs --force."""
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not (force or allow_existing):
        raise ValidationError(f"{path} already exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def checkpoint_name(iteration: int) -> str:
    return f"teacher_{iteration:08d}.ckpt"


def latest_checkpoint(run_dir: Path) -> Path | None:
    """Most recent periodic teacher checkpoint, by iteration."""
    ckpt_dir = Path(run_dir) / "checkpoints"
    if not ckpt_dir.is_dir():
        return None
    found = sorted(ckpt_dir.glob("teacher_*.ckpt"))
    return found[-1] if found else None


def write_manifest(run_dir: Path, command: str, cfg: RunConfig, inputs: dict[str, Path]) -> None:
    """Record the resolved config and input file hashes beside the outputs."""
    manifest = {
        "command": command,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "seed": cfg.seed,
        "inputs": {name: {"path": str(p), "hash": hash_file(p)} for name, p in inputs.items()},
        "config": cfg.raw,
    }
    with open(Path(run_dir) / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


def main() -> None:
    """CLI entry point."""
    parser = argparse.ArgumentParser(description="Resolve and validate a run configuration")
    parser.add_argument("--config", type=Path, help="Run config overlaying pipeline.yaml")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="Override one field, e.g. distill.ttur_n=5")
    parser.add_argument("--full-scale", action="store_true", help="Use full-length toy settings")
    parser.add_argument("--hash", type=Path, help="Print the content hash of a file and exit")
    args = parser.parse_args()

    if args.hash:
        print(hash_file(args.hash))
        return
    try:
        cfg = build_run_config(args.config, args.overrides, args.full_scale)
    except ConfigError as e:
        print(f"Invalid configuration: {e}", file=sys.stderr)
        sys.exit(2)
    print(cfg.snapshot(), end="")


if __name__ == "__main__":
    main()
