#!/usr/bin/env python3
"""
Command-line driver for multi-student distillation on the 2D toy.

Subcommands:
    train-teacher  Train the conditional diffusion teacher (resumable)
    gen-pairs      Sample the teacher into a (z, label, y) paired dataset
    distill        Distill the teacher into K single-step students
    eval           Histogram l1 of routed students against the teacher
    ablate         Sweep students / batch / strategy / paired-filter mode

Usage:
    python scripts/run.py train-teacher --out runs/teacher
    python scripts/run.py gen-pairs --teacher runs/teacher/teacher.ckpt --out runs/pairs.parquet
    python scripts/run.py distill --teacher runs/teacher/teacher.ckpt --pairs runs/pairs.parquet \\
        --students 4 --out runs/k4
    python scripts/run.py eval --teacher runs/teacher/teacher.ckpt --students-dir runs/k4 --out runs/k4/eval
    python scripts/run.py ablate --teacher runs/teacher/teacher.ckpt --pairs runs/pairs.parquet --out runs/ablate
"""

import argparse
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

# Add repo root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from msdlab.data import (  # noqa: E402
    Role,
    class_centers,
    denoiser_checkpoint,
    denoiser_from_checkpoint,
    generate_pairs,
    generator_checkpoint,
    generator_from_checkpoint,
    hash_file,
    head_checkpoint,
    load_checkpoint,
    load_pairs,
    save_checkpoint,
    save_pairs,
)
from msdlab.diffusion import Denoiser, train_teacher  # noqa: E402
from msdlab.errors import MsdError, PartitionError, ValidationError  # noqa: E402
from msdlab.evaluation import (  # noqa: E402
    build_teacher_reference,
    eval_bundle,
    export_csv,
    noise_floor,
)
from msdlab.msd import (  # noqa: E402
    Architecture,
    MogRealSampler,
    MsdConfig,
    Partition,
    StudentBundle,
    check_shared_partition,
    parse_stages,
    partition_consecutive,
    partition_kmeans,
    partition_quadrant,
    train_msd,
)
from scripts.pipeline import (  # noqa: E402
    RunConfig,
    build_run_config,
    checkpoint_name,
    latest_checkpoint,
    prepare_run_dir,
    write_manifest,
)

logger = logging.getLogger("msdlab.cli")


def load_run_config(args: argparse.Namespace) -> RunConfig:
    return build_run_config(args.config, args.overrides, args.full_scale)


def new_teacher(cfg: RunConfig, rng: np.random.Generator) -> Denoiser:
    return Denoiser.init(
        cfg.dataset.num_classes,
        cfg.network.hidden_sizes,
        rng,
        sigma_data=cfg.network.sigma_data,
        schedule=cfg.schedule,
        embed_dim=cfg.network.noise_embed_dim,
    )


def load_teacher(path: Path) -> Denoiser:
    return denoiser_from_checkpoint(load_checkpoint(path, Role.TEACHER))


def make_partition(cfg: RunConfig, strategy: str, students: int) -> Partition:
    """Split classes by strategy; kmeans/quadrant use class-mean positions as embeddings."""
    if strategy == "consecutive":
        return partition_consecutive(cfg.dataset.num_classes, students)
    embeddings = class_centers(cfg.dataset)
    if strategy == "kmeans":
        return partition_kmeans(
            embeddings, students, cfg.msd.kmeans_iters, cfg.seed, cfg.msd.kmeans_restarts
        )
    if students != 4:
        raise PartitionError(f"quadrant partitioning makes 4 students, not {students}")
    return partition_quadrant(embeddings)


# =============================================================================
# train-teacher
# =============================================================================


def cmd_train_teacher(args: argparse.Namespace) -> int:
    """Train the teacher, checkpointing periodically; --resume continues the latest checkpoint."""
    cfg = load_run_config(args)
    out = prepare_run_dir(args.out, force=args.force, allow_existing=args.resume)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    settings = cfg.teacher

    latest = latest_checkpoint(out) if args.resume else None
    losses: list[tuple[int, float]] = []
    if latest is not None:
        ckpt = load_checkpoint(latest, Role.TEACHER)
        teacher = denoiser_from_checkpoint(ckpt)
        opt = ckpt.optimizer_state(teacher.net, settings.train.betas)
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        start = ckpt.iteration
        loss_path = out / "teacher_loss.csv"
        if loss_path.exists():
            prior = pd.read_csv(loss_path)
            prior = prior[prior["step"] <= start]
            losses = list(zip(prior["step"].astype(int).tolist(), prior["metric"].tolist()))
        print(f"Resuming from {latest.name} at iteration {start}")
    else:
        if args.resume:
            logger.warning("No checkpoint under %s; starting from scratch", ckpt_dir)
        rng = np.random.default_rng(cfg.seed)
        teacher = new_teacher(cfg, rng)
        opt, start = None, 0

    def on_step(iteration: int, loss: float, opt_state) -> None:
        losses.append((iteration, loss))
        if settings.checkpoint_every and iteration % settings.checkpoint_every == 0:
            save_checkpoint(
                ckpt_dir / checkpoint_name(iteration),
                denoiser_checkpoint(
                    teacher, Role.TEACHER, seed=cfg.seed, iteration=iteration, opt=opt_state, rng=rng
                ),
            )
            export_csv(losses, out / "teacher_loss.csv")

    print(f"Training teacher: iterations {start} -> {settings.train.iterations}")
    train_teacher(
        teacher, MogRealSampler(cfg.dataset), settings.train, rng,
        opt=opt, start_iteration=start, on_step=on_step, progress=not args.quiet,
        log_every=settings.log_every,
    )
    save_checkpoint(
        out / "teacher.ckpt",
        denoiser_checkpoint(teacher, Role.TEACHER, seed=cfg.seed, iteration=settings.train.iterations),
    )
    export_csv(losses, out / "teacher_loss.csv")
    write_manifest(out, "train-teacher", cfg, {})
    print(f"Done! Teacher written to {out / 'teacher.ckpt'}")
    return 0


# =============================================================================
# gen-pairs
# =============================================================================


def cmd_gen_pairs(args: argparse.Namespace) -> int:
    """Sample the teacher from fixed latents into a paired dataset."""
    cfg = load_run_config(args)
    n = cfg.pairs.count if args.n is None else args.n
    steps = cfg.pairs.sampler_steps if args.steps is None else args.steps
    if n < 1:
        raise ValidationError(f"--n must be >= 1, got {n}")
    if steps < 1:
        raise ValidationError(f"--steps must be >= 1, got {steps}")
    if args.out.exists() and not args.force:
        raise ValidationError(f"{args.out} already exists; pass --force to overwrite")

    teacher = load_teacher(args.teacher)
    rng = np.random.default_rng(cfg.seed)
    print(f"Generating {n} pairs with {steps} Heun steps...")
    ds = generate_pairs(
        teacher, n, steps, rng, final_euler=cfg.pairs.final_euler, teacher_checksum=hash_file(args.teacher)
    )
    save_pairs(args.out, ds)
    print(f"Done! {len(ds)} pairs written to {args.out}")
    return 0


# =============================================================================
# distill
# =============================================================================


def msd_config(cfg: RunConfig, args: argparse.Namespace, stages: tuple[str, ...]) -> MsdConfig:
    width = args.smaller if args.smaller is not None else cfg.msd.student_width
    architecture = Architecture.SMALLER if width is not None else Architecture.SAME_SIZE
    return MsdConfig(
        dm=cfg.distill,
        adm=cfg.adm.distill,
        tsm=cfg.tsm,
        stages=stages,
        architecture=architecture,
        student_hidden=tuple([width] * cfg.network.hidden_layers) if width is not None else None,
        # asking for tsm on the command line is the explicit opt-in for same-size students
        allow_same_size_tsm=True,
        shared_tsm=cfg.shared_tsm,
        strict_paired=cfg.msd.strict_paired if not args.strict_paired else True,
        real_source=cfg.adm.real_source,
        reinit_fake=cfg.adm.reinit_fake,
        head_hidden=cfg.adm.head_hidden,
        eval_every=cfg.eval_every,
        parallel=args.parallel or cfg.msd.parallel,
        progress=not args.quiet,
    )


def save_bundle(out: Path, bundle: StudentBundle, seed: int) -> None:
    student_dir = out / f"student_{bundle.index}"
    student_dir.mkdir(parents=True, exist_ok=True)
    iterations = len(bundle.history)
    save_checkpoint(student_dir / "generator.ckpt", generator_checkpoint(bundle.generator, seed=seed, iteration=iterations))
    save_checkpoint(
        student_dir / "fake.ckpt",
        denoiser_checkpoint(bundle.fake, Role.FAKE, seed=seed, iteration=iterations),
    )
    if bundle.disc_head is not None:
        save_checkpoint(student_dir / "disc_head.ckpt", head_checkpoint(bundle.disc_head, seed=seed, iteration=iterations))
    if bundle.tsm_student is not None:
        save_checkpoint(student_dir / "tsm_student.ckpt", denoiser_checkpoint(bundle.tsm_student, Role.TSM_STUDENT, seed=seed))
    info = {
        "index": bundle.index,
        "classes": bundle.classes,
        "stage": bundle.stage.value if bundle.stage else None,
        "architecture": bundle.architecture.value,
        "partition": bundle.partition.to_dict(),
    }
    with open(student_dir / "student.json", "w") as f:
        json.dump(info, f, indent=2)


def load_bundles(dirs: list[Path]) -> list[StudentBundle]:
    """Accept run directories (holding student_k/) and single student directories."""
    student_dirs: list[Path] = []
    for d in dirs:
        if (d / "student.json").exists():
            student_dirs.append(d)
        else:
            found = sorted(d.glob("student_*"), key=lambda p: int(p.name.split("_")[-1]))
            if not found:
                raise ValidationError(f"{d}: no student directories found")
            student_dirs.extend(found)
    bundles = []
    for d in student_dirs:
        with open(d / "student.json") as f:
            info = json.load(f)
        bundles.append(
            StudentBundle(
                index=int(info["index"]),
                partition=Partition.from_dict(info["partition"]),
                generator=generator_from_checkpoint(load_checkpoint(d / "generator.ckpt", Role.GENERATOR)),
                fake=denoiser_from_checkpoint(load_checkpoint(d / "fake.ckpt", Role.FAKE)),
                architecture=Architecture(info["architecture"]),
            )
        )
    check_shared_partition(bundles)
    return sorted(bundles, key=lambda b: b.index)


def cmd_distill(args: argparse.Namespace) -> int:
    """Train K students through the requested stages; writes student_k/ and metrics.csv."""
    cfg = load_run_config(args)
    students = args.students or cfg.msd.students
    stages = tuple(s.strip() for s in args.stages.split(",") if s.strip()) if args.stages else cfg.msd.stages
    mcfg = msd_config(cfg, args, stages)
    parse_stages(mcfg.stages, mcfg.architecture, mcfg.allow_same_size_tsm)
    partition = make_partition(cfg, args.strategy or cfg.msd.strategy, students)

    teacher = load_teacher(args.teacher)
    paired = load_pairs(args.pairs) if args.pairs else None
    if paired is not None and paired.teacher_checksum != hash_file(args.teacher):
        logger.warning("Paired dataset was generated by a different teacher file")
    out = prepare_run_dir(args.out, force=args.force)

    reference = None
    metrics: list[dict] = []
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)

    def evaluate(stage, step, bundles) -> None:
        nonlocal reference
        if reference is None:
            reference = build_teacher_reference(
                teacher, cfg.eval.periodic_samples, seeds[0], steps=cfg.eval.teacher_steps,
                grid=cfg.eval.grid, partition=partition, shards=cfg.eval.shards,
            )
        report = eval_bundle(bundles, reference, cfg.eval.periodic_samples, seeds[1], cfg.eval.shards)
        stage_name = stage if isinstance(stage, str) else stage.value
        metrics.append({"stage": stage_name, "step": step, "metric": report.l1})
        logger.info("%s step %d: l1 %.6g", stage_name, step, report.l1)
        export_csv(pd.DataFrame(metrics, columns=["stage", "step", "metric"]), out / "metrics.csv")

    print(f"Distilling into {students} students ({', '.join(mcfg.stages)})")
    bundles = train_msd(
        teacher, partition, mcfg, cfg.seed,
        paired=paired, data=MogRealSampler(cfg.dataset),
        on_round=evaluate if cfg.eval_every else None,
    )
    if not metrics:
        evaluate("final", len(bundles[0].history), bundles)
    for b in bundles:
        save_bundle(out, b, cfg.seed)
    with open(out / "partition.json", "w") as f:
        json.dump(partition.to_dict(), f, indent=2)
    inputs = {"teacher": args.teacher}
    if args.pairs:
        inputs["pairs"] = args.pairs
    write_manifest(out, "distill", cfg, inputs)
    print(f"Done! {len(bundles)} students written to {out}")
    return 0


# =============================================================================
# eval
# =============================================================================


def cmd_eval(args: argparse.Namespace) -> int:
    """Print students=K l1=<value>; write teacher and student histogram CSVs."""
    cfg = load_run_config(args)
    samples = args.samples or cfg.eval.samples
    if not args.students_dir and not args.noise_floor:
        raise ValidationError("nothing to evaluate: pass --students-dir and/or --noise-floor")
    bundles = load_bundles(args.students_dir) if args.students_dir else []
    teacher = load_teacher(args.teacher)
    out = prepare_run_dir(args.out, force=args.force)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)

    if args.noise_floor:
        floor = noise_floor(
            teacher, samples, (cfg.seed, cfg.seed + 1),
            steps=cfg.eval.teacher_steps, grid=cfg.eval.grid, shards=cfg.eval.shards,
        )
        print(f"noise_floor l1={floor:.6g}")

    if bundles:
        partition = bundles[0].partition
        reference = build_teacher_reference(
            teacher, samples, seeds[0], steps=cfg.eval.teacher_steps,
            grid=cfg.eval.grid, partition=partition, shards=cfg.eval.shards,
        )
        report = eval_bundle(bundles, reference, samples, seeds[1], cfg.eval.shards)
        export_csv(reference.collective, out / "teacher_hist.csv")
        export_csv(report.histograms.collective, out / "students_hist.csv")
        for k, h in report.histograms.per_student.items():
            export_csv(h, out / f"student_{k}_hist.csv")
        with open(out / "eval.json", "w") as f:
            json.dump(
                {"students": report.students, "l1": report.l1, "samples": samples,
                 "out_of_range": {"teacher": reference.collective.out_of_range,
                                  "students": report.histograms.collective.out_of_range},
                 "per_student": {str(k): v for k, v in report.per_student.items()}},
                f, indent=2,
            )
        print(report.summary_line())
    return 0


# =============================================================================
# ablate
# =============================================================================


def cmd_ablate(args: argparse.Namespace) -> int:
    """Run every (K, batch, strategy, filter mode) cell; writes ablation.csv."""
    cfg = load_run_config(args)
    sweep = cfg.ablate
    teacher = load_teacher(args.teacher)
    paired = load_pairs(args.pairs) if args.pairs else None
    out = prepare_run_dir(args.out, force=args.force)

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    reference = build_teacher_reference(
        teacher, cfg.eval.samples, seeds[0], steps=cfg.eval.teacher_steps,
        grid=cfg.eval.grid, shards=cfg.eval.shards,
    )
    rows = []
    cells = list(itertools.product(sweep.students, sweep.batch_sizes, sweep.strategies, sweep.filter_modes))
    for i, (k, batch, strategy, filter_mode) in enumerate(cells, 1):
        print(f"[{i}/{len(cells)}] K={k} batch={batch} strategy={strategy} filter={filter_mode}")
        partition = make_partition(cfg, strategy, k)
        mcfg = MsdConfig(
            dm=replace(cfg.distill, batch_size=batch),
            adm=cfg.adm.distill,
            tsm=cfg.tsm,
            stages=cfg.msd.stages,
            strict_paired=filter_mode == "strict",
            eval_every=0,
            parallel=cfg.msd.parallel,
            progress=not args.quiet,
        )
        bundles = train_msd(teacher, partition, mcfg, cfg.seed, paired=paired, data=MogRealSampler(cfg.dataset))
        report = eval_bundle(bundles, reference, cfg.eval.samples, seeds[1], cfg.eval.shards)
        rows.append({"K": k, "batch": batch, "strategy": strategy, "filter_mode": filter_mode, "l1": report.l1})
        print(f"  {report.summary_line()}")

    df = pd.DataFrame(rows, columns=["K", "batch", "strategy", "filter_mode", "l1"])
    export_csv(df, out / "ablation.csv")
    # strict filtering is expected to do no better than the full paired set
    if {"full", "strict"} <= set(df["filter_mode"]):
        wide = df.pivot_table(index=["K", "batch", "strategy"], columns="filter_mode", values="l1")
        for key, row in wide.iterrows():
            if row["strict"] < row["full"]:
                logger.warning("strict paired filtering beat full at %s: %.6g < %.6g", key, row["strict"], row["full"])
    write_manifest(out, "ablate", cfg, {"teacher": args.teacher})
    print(f"Done! {len(rows)} cells written to {out / 'ablation.csv'}")
    return 0


# =============================================================================
# CLI
# =============================================================================


def add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="Run config overlaying pipeline.yaml")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="Override one field, e.g. distill.ttur_n=5 (repeatable)")
    p.add_argument("--full-scale", action="store_true", help="Full-length toy iteration counts and lr")
    p.add_argument("--force", action="store_true", help="Overwrite an existing output")
    p.add_argument("--quiet", action="store_true", help="Disable progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Multi-student diffusion distillation on a 2D toy")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("train-teacher", help="Train the diffusion teacher")
    add_config_args(p)
    p.add_argument("--out", type=Path, required=True, help="Run directory")
    p.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint")
    p.set_defaults(handler=cmd_train_teacher)

    p = subparsers.add_parser("gen-pairs", help="Generate the paired dataset")
    add_config_args(p)
    p.add_argument("--teacher", type=Path, required=True, help="Teacher checkpoint")
    p.add_argument("--n", type=int, default=None, help="Number of pairs (default: pairs.count)")
    p.add_argument("--steps", type=int, default=None, help="Heun steps (default: pairs.sampler_steps)")
    p.add_argument("--out", type=Path, required=True, help="Output Parquet file")
    p.set_defaults(handler=cmd_gen_pairs)

    p = subparsers.add_parser("distill", help="Distill into K students")
    add_config_args(p)
    p.add_argument("--teacher", type=Path, required=True, help="Teacher checkpoint")
    p.add_argument("--pairs", type=Path, default=None, help="Paired dataset (needed for regression loss)")
    p.add_argument("--out", type=Path, required=True, help="Run directory")
    p.add_argument("--students", type=int, default=None, help="K (default: msd.students)")
    p.add_argument("--stages", default=None, help="Comma-separated subset of tsm,dm,adm")
    p.add_argument("--smaller", type=int, default=None, metavar="WIDTH", help="Hidden width of smaller students")
    p.add_argument("--strategy", choices=["consecutive", "kmeans", "quadrant"], default=None)
    p.add_argument("--strict-paired", action="store_true", help="Restrict pairs to each student's classes")
    p.add_argument("--parallel", action="store_true", help="Train students on worker threads")
    p.set_defaults(handler=cmd_distill)

    p = subparsers.add_parser("eval", help="Evaluate students against the teacher")
    add_config_args(p)
    p.add_argument("--teacher", type=Path, required=True, help="Teacher checkpoint")
    p.add_argument("--students-dir", type=Path, action="append", default=[],
                   help="Distill run directory or student directory (repeatable)")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--samples", type=int, default=None, help="Samples per histogram (default: eval.samples)")
    p.add_argument("--noise-floor", action="store_true", help="Also compare two independent teacher draws")
    p.set_defaults(handler=cmd_eval)

    p = subparsers.add_parser("ablate", help="Run the ablation sweep")
    add_config_args(p)
    p.add_argument("--teacher", type=Path, required=True, help="Teacher checkpoint")
    p.add_argument("--pairs", type=Path, default=None, help="Paired dataset")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except MsdError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
