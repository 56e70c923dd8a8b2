"""Experiment runner: GPDA, its ablations and the plain baselines over several seeds."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PdaTask, Shift, gen_synthetic_pda, load_idx, make_task
from .training import MODES, EpochRecord, TrainConfig, TrainingAborted, fit, new_state, target_accuracy

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("L_S", "L_T", "L_D", "L_CS", "total")


@dataclass(frozen=True)
class SyntheticTask:
    num_classes: int = 6
    num_shared: int = 3
    per_class: int = 200
    rotation_deg: float = 25.0
    translation: tuple[float, float] = (1.5, 0.0)
    noise: float = 0.6
    seed: int = 0
    dim: int = 2

    def build(self) -> PdaTask:
        shift = Shift(self.rotation_deg, tuple(self.translation), self.noise)
        return gen_synthetic_pda(self.num_classes, self.num_shared, self.per_class, shift, self.seed, self.dim)


@dataclass(frozen=True)
class IdxTask:
    source_images: str
    source_labels: str
    target_images: str
    target_labels: str
    keep: tuple[int, ...] = (0, 1, 2, 3, 4)
    num_classes: int = 10
    side: int | None = 28

    def build(self) -> PdaTask:
        source = load_idx(self.source_images, self.source_labels, "source", self.side)
        target = load_idx(self.target_images, self.target_labels, "target", self.side)
        return make_task(source, target, self.keep, self.num_classes)


@dataclass
class ExperimentSpec:
    task: SyntheticTask | IdxTask
    config: TrainConfig
    modes: tuple[str, ...] = ("gpda",)
    seeds: tuple[int, ...] = (0,)
    out_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        unknown = [m for m in self.modes if m not in MODES]
        if unknown:
            raise ValueError(f"unknown modes {unknown}; choose from {sorted(MODES)}")
        if len(set(self.modes)) != len(self.modes):
            raise ValueError(f"modes repeat: {list(self.modes)}")


@dataclass
class RunResult:
    mode: str
    seed: int
    history: list[EpochRecord]
    final_accuracy: float
    error: str | None = None


@dataclass
class SummaryRow:
    mode: str
    mean: float
    std: float
    accuracies: list[float] = field(default_factory=list)
    final_gammas: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------- CSV output


def history_header(num_classes: int) -> list[str]:
    return ["epoch", *LOSS_COLUMNS, "target_accuracy", *(f"gamma_{k}" for k in range(num_classes))]


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_metrics(history: Sequence[EpochRecord], path, num_classes: int | None = None) -> None:
    """Write one row per epoch; an empty history yields the header only."""
    if num_classes is None:
        num_classes = history[0].gamma.size if history else 0
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(history_header(num_classes))
            for rec in history:
                writer.writerow(
                    [rec.epoch]
                    + [_fmt(rec.losses.get(k, 0.0)) for k in LOSS_COLUMNS]
                    + [_fmt(rec.target_accuracy)]
                    + [_fmt(g) for g in rec.gamma]
                )
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def emit_summary(results: Sequence[RunResult], rows: Sequence[SummaryRow], path) -> None:
    """Per-run ``mode,seed,final_accuracy`` rows, then ``mean`` and ``std`` rows per mode."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["mode", "seed", "final_accuracy"])
            for r in results:
                writer.writerow([r.mode, r.seed, _fmt(r.final_accuracy)])
            for row in rows:
                writer.writerow([row.mode, "mean", _fmt(row.mean)])
                writer.writerow([row.mode, "std", _fmt(row.std)])
    except OSError as exc:
        raise OSError(f"cannot write summary to {path}: {exc}") from exc


# ---------------------------------------------------------------- running


def _run_one(task: PdaTask, config: TrainConfig, mode: str, seed: int) -> RunResult:
    run_config = TrainConfig.for_mode(mode, **{**_config_kwargs(config), "seed": seed})
    partial: list[EpochRecord] = []

    def keep_history(state):
        partial[:] = state.history

    try:
        _, history = fit(run_config, task, state_hook=keep_history)
    except TrainingAborted as exc:
        return RunResult(mode, seed, list(partial), float("nan"), error=str(exc))
    if history:
        final = history[-1].target_accuracy
    else:
        # No training: score the freshly initialised models.
        state = new_state(run_config, task, 1)
        if run_config.standardize_inputs:
            state.models.fit_input_scaling(task.source.samples)
        final = target_accuracy(state.models, task.target.samples, task.target.labels)
    return RunResult(mode, seed, history, final)


def _config_kwargs(config: TrainConfig) -> dict:
    # Mode flags come from MODES; keep every other field.
    flags = {"no_graph", "no_cs", "baseline", "source_only", "uniform_gamma"}
    return {k: v for k, v in vars(config).items() if k not in flags}


def summarize(results: Sequence[RunResult], modes: Sequence[str]) -> list[SummaryRow]:
    rows = []
    for mode in modes:
        runs = [r for r in results if r.mode == mode]
        accs = [r.final_accuracy for r in runs]
        arr = np.asarray(accs, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        rows.append(
            SummaryRow(
                mode,
                float(arr.mean()) if arr.size else float("nan"),
                std,
                accs,
                [r.history[-1].gamma for r in runs if r.history],
            )
        )
    return rows


def run_experiment(spec: ExperimentSpec) -> tuple[list[SummaryRow], list[RunResult]]:
    """Fit every (mode, seed) pair, write per-run histories and a summary CSV."""
    task = spec.task.build()
    out = Path(spec.out_dir) if spec.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    jobs = [(mode, seed) for mode in spec.modes for seed in spec.seeds]

    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            futures = [pool.submit(_run_one, task, spec.config, m, s) for m, s in jobs]
            results = [f.result() for f in futures]
    else:
        results = []
        for mode, seed in jobs:
            results.append(_run_one(task, spec.config, mode, seed))
            if results[-1].error:
                break

    rows = summarize(results, spec.modes)
    if out is not None:
        for r in results:
            emit_metrics(r.history, out / f"history_{r.mode}_seed{r.seed}.csv", task.num_classes)
        emit_summary(results, rows, out / "summary.csv")
    failed = [r for r in results if r.error]
    if failed:
        r = failed[0]
        raise TrainingAborted(f"mode {r.mode} seed {r.seed}: {r.error}")
    return rows, results


# ---------------------------------------------------------------- command line


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpda", description=__doc__)
    p.add_argument("--task", choices=["synthetic", "idx"], default="synthetic")
    p.add_argument("--mode", type=_str_list, default=("gpda",),
                   help=f"comma-separated subset of {','.join(MODES)}")
    p.add_argument("--seeds", type=_int_list, default=(0,), help="comma-separated training seeds")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--batch", type=int, default=32, help="samples per domain per step")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=0.8, help="pseudo-label confidence gate")
    p.add_argument("--centroid-momentum", type=float, default=0.7)
    p.add_argument("--out", default="runs", help="output directory for CSVs")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")

    syn = p.add_argument_group("synthetic task")
    syn.add_argument("--classes", type=int, default=6)
    syn.add_argument("--shared", type=int, default=3)
    syn.add_argument("--per-class", type=int, default=200)
    syn.add_argument("--rotation", type=float, default=25.0, help="degrees")
    syn.add_argument("--translation", type=float, nargs=2, default=(1.5, 0.0))
    syn.add_argument("--noise", type=float, default=0.6)
    syn.add_argument("--dim", type=int, default=2)
    syn.add_argument("--task-seed", type=int, default=0)

    idx = p.add_argument_group("IDX task")
    idx.add_argument("--source-images")
    idx.add_argument("--source-labels")
    idx.add_argument("--target-images")
    idx.add_argument("--target-labels")
    idx.add_argument("--keep", type=_int_list, default=(0, 1, 2, 3, 4))
    idx.add_argument("--num-classes", type=int, default=10)
    idx.add_argument("--side", type=int, default=28, help="resize images to side x side")
    return p


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    if args.task == "synthetic":
        task: SyntheticTask | IdxTask = SyntheticTask(
            args.classes, args.shared, args.per_class, args.rotation,
            tuple(args.translation), args.noise, args.task_seed, args.dim,
        )
    else:
        paths = [args.source_images, args.source_labels, args.target_images, args.target_labels]
        if not all(paths):
            raise ValueError("--task idx needs --source-images/--source-labels/--target-images/--target-labels")
        task = IdxTask(*paths, keep=tuple(args.keep), num_classes=args.num_classes, side=args.side)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        momentum=args.momentum,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        threshold=args.threshold,
        centroid_momentum=args.centroid_momentum,
    )
    return ExperimentSpec(task, config, tuple(args.mode), tuple(args.seeds), args.out, args.workers)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        spec = spec_from_args(args)
        rows, _ = run_experiment(spec)
    except (ValueError, OSError) as exc:
        print(f"gpda: error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"gpda: training aborted: {exc}", file=sys.stderr)
        return 1
    print(f"{'mode':<12} {'mean':>8} {'std':>8}")
    for row in rows:
        print(f"{row.mode:<12} {100 * row.mean:8.2f} {100 * row.std:8.2f}")
    print(f"wrote {Path(spec.out_dir) / 'summary.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
