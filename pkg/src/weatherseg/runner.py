"""Training, evaluation and ablation loops behind the command line."""
from __future__ import annotations

import logging
import platform
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, VersionError
from .metrics import METRIC_NAMES, ConfusionMatrix, accumulate, compute_metrics, format_record, parse_record
from .net import collate
from .sequence import (
    LsmWindow,
    batch_indices,
    build_pool,
    dataset_num_classes,
    gsm_shuffle,
    ingest_dataset,
    make_batches,
    sequential_plan,
)
from .unfolding import LossConfig, TrainState, make_train_state, segmentation_logits, step_seed, train_step

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 2**40

ABLATION_SUITES: dict[str, list[tuple[str, dict]]] = {
    "depth": [(f"depth-{d}", {"depth": d}) for d in (1, 2, 3, 4)],
    "fusion": [("CE", {"policy": "CE"}), ("FI", {"policy": "FI"})],
    "gsm": [("gsm-off", {"gsm": False}), ("gsm-on", {"gsm": True})],
    "regularizer": [
        ("CE", {"loss": "ce", "K": 0}),
        ("VRs", {"loss": "vrs", "K": 0}),
        ("URs(2)", {"loss": "urs", "K": 2}),
        ("URs(5)", {"loss": "urs", "K": 5}),
    ],
}


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)


@dataclass
class Dataset:
    train: list
    val: list
    num_classes: int
    channels: int


def load_data(config: RunConfig) -> Dataset:
    train_manifest, val_manifest = config.resolved_manifests()
    root = config.dataset_root(train_manifest)
    num_classes = dataset_num_classes(root)
    train = ingest_dataset(root, train_manifest, num_classes)
    val = ingest_dataset(root, val_manifest, num_classes) if val_manifest and val_manifest.exists() else []
    if num_classes is None:
        num_classes = int(max(l.max() for s in train + val for l in s.labels)) + 1
    return Dataset(train, val, num_classes, train[0].frames[0].shape[2])


def evaluate_windows(
    state: TrainState,
    loss_cfg: LossConfig,
    windows: list[LsmWindow],
    batch_size: int,
    num_classes: int,
) -> dict[str, float]:
    """Label-free inference over ``windows`` in pool order."""
    cm = ConfusionMatrix.empty(num_classes)
    state.model.eval()
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            batch = collate(windows[i : i + batch_size])
            seed = step_seed(state.seed, EVAL_SEED_OFFSET + i // batch_size)
            _, logits = segmentation_logits(state.model, state.unfold, batch, loss_cfg, seed)
            cm = accumulate(cm, logits, batch.labels)
    state.model.train()
    return compute_metrics(cm)


def _environment() -> str:
    return (
        f"weatherseg = {__version__}\npython = {sys.version.split()[0]}\n"
        f"torch = {torch.__version__}\nnumpy = {np.__version__}\nplatform = {platform.platform()}\n"
    )


def train_run(config: RunConfig, seed: int, run_dir: Path, data: Dataset | None = None) -> dict:
    """Train one seed into ``run_dir``; returns the summary record."""
    config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    data = data or load_data(config)
    set_deterministic(config.deterministic)

    (run_dir / "config.txt").write_text(config.to_text() + f"run_seed = {seed}\n")
    (run_dir / "environment.txt").write_text(_environment())

    spec = config.network_spec(data.num_classes, data.channels)
    h, w = data.train[0].frames[0].shape[:2]
    spec.validate()
    spec.check_resolution(h, w)
    loss_cfg = config.loss_config()
    optim_cfg = config.optim_config()
    state = make_train_state(spec, loss_cfg, optim_cfg, seed=seed)

    train_windows = build_pool(data.train, config.depth)
    val_windows = build_pool(data.val, config.depth) if data.val else []
    run_info = {"depth": config.depth, "batch_size": config.batch_size, "gsm": config.gsm}

    metrics_log = open(run_dir / "metrics.log", "w")
    trace_log = open(run_dir / "batch_trace.log", "w")
    record = {}
    try:
        for epoch in range(config.effective_epochs):
            if config.gsm:
                plan = gsm_shuffle(len(train_windows), seed, epoch, config.batch_size)
            else:
                plan = sequential_plan(len(train_windows), epoch, config.batch_size)
            for i, idx in enumerate(batch_indices(plan)):
                trace_log.write(f"epoch={epoch + 1} batch={i} indices={','.join(map(str, idx))}\n")
            losses = []
            for batch_windows in make_batches(plan, train_windows):
                state, loss = train_step(collate(batch_windows), state, loss_cfg)
                losses.append(loss)
            state.epoch = epoch + 1
            record = {"epoch": state.epoch, "step": state.step, "loss": float(np.mean(losses))}
            if val_windows:
                val = evaluate_windows(state, loss_cfg, val_windows, config.batch_size, data.num_classes)
                record.update({f"val_{k}": v for k, v in val.items()})
            metrics_log.write(format_record(record) + "\n")
            metrics_log.flush()
            save_checkpoint(run_dir / "checkpoint.pt", state, loss_cfg, optim_cfg, run_info)
            log.info("seed %d %s", seed, format_record(record))
    finally:
        metrics_log.close()
        trace_log.close()

    train_eval = evaluate_windows(state, loss_cfg, train_windows, config.batch_size, data.num_classes)
    summary = {"seed": seed, **record, **{f"train_{k}": v for k, v in train_eval.items()}}
    if state.unfold.K:
        for name in ("alpha", "gamma", "eta"):
            values = getattr(state.unfold, name).detach().tolist()
            summary[name] = ",".join(f"{v:.6g}" for v in values)
    (run_dir / "summary.txt").write_text(format_record(summary) + "\n")
    return summary


def cmd_train(config: RunConfig) -> Path:
    config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(config)
    for seed in config.seeds:
        train_run(config, seed, out / f"seed_{seed}", data)
    return out


def cmd_eval(checkpoint: Path | str, manifest: Path | str, root: Path | str | None = None) -> dict[str, float]:
    state, loss_cfg, _, run = load_checkpoint(checkpoint, restore_rng=False)
    manifest = Path(manifest)
    root = Path(root) if root else manifest.parent
    sequences = ingest_dataset(root, manifest, dataset_num_classes(root))
    spec = state.model.spec
    channels = sequences[0].frames[0].shape[2]
    if channels != spec.input_channels:
        raise VersionError(f"checkpoint expects {spec.input_channels}-channel frames, data has {channels}")
    if "depth" not in run:
        raise VersionError(f"{checkpoint} does not record the window depth")
    windows = build_pool(sequences, int(run["depth"]))
    for win in windows:
        if win.label.max() >= spec.num_classes:
            raise VersionError(f"labels exceed the checkpoint's {spec.num_classes} classes")
    return evaluate_windows(state, loss_cfg, windows, int(run.get("batch_size", 8)), spec.num_classes)


# --- ablations -----------------------------------------------------------------


def read_metrics_log(path: Path) -> list[dict]:
    return [parse_record(line) for line in Path(path).read_text().splitlines() if line.strip()]


def summarize_arms(results: dict[str, list[dict]], prefix: str = "val_") -> list[dict]:
    rows = []
    for arm, summaries in results.items():
        row = {"arm": arm, "n": len(summaries)}
        for name in METRIC_NAMES:
            values = np.array([s[prefix + name] for s in summaries], dtype=float)
            row[f"{name}_mean"] = float(values.mean())
            row[f"{name}_std"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        rows.append(row)
    return rows


def format_table(rows: list[dict], title: str) -> str:
    lines = [f"# {title}", "", "| arm | " + " | ".join(METRIC_NAMES) + " |", "|---" * (len(METRIC_NAMES) + 1) + "|"]
    for row in rows:
        cells = [f"{100 * row[f'{m}_mean']:.2f}±{100 * row[f'{m}_std']:.2f}" for m in METRIC_NAMES]
        lines.append(f"| {row['arm']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def plot_ablation(suite_dir: Path, arms: list[str], metrics=("mIoU", "mF1")) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for arm in arms:
            curves = []
            for run_dir in sorted((suite_dir / _arm_dirname(arm)).glob("seed_*")):
                records = read_metrics_log(run_dir / "metrics.log")
                curves.append([r[f"val_{metric}"] for r in records])
            if not curves:
                continue
            length = min(len(c) for c in curves)
            mean = np.mean([c[:length] for c in curves], axis=0) * 100
            ax.plot(np.arange(1, length + 1), mean, label=arm)
        ax.set_xlabel("epoch")
        ax.set_ylabel(f"{metric} (%)")
        ax.legend()
        fig.tight_layout()
        path = suite_dir / f"curves_{metric}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def _arm_dirname(arm: str) -> str:
    return arm.replace("(", "_").replace(")", "").replace(" ", "_")


def cmd_ablate(suite: str, base: RunConfig) -> tuple[list[dict], Path]:
    if suite not in ABLATION_SUITES:
        raise ConfigError(f"unknown ablation suite {suite!r}; choose from {sorted(ABLATION_SUITES)}")
    base.validate()
    suite_dir = Path(base.out) / suite
    suite_dir.mkdir(parents=True, exist_ok=True)
    data = load_data(base)
    results: dict[str, list[dict]] = {}
    for arm, overrides in ABLATION_SUITES[suite]:
        cfg = replace(base, **overrides).validate()
        results[arm] = [
            train_run(cfg, seed, suite_dir / _arm_dirname(arm) / f"seed_{seed}", data) for seed in cfg.seeds
        ]
    rows = summarize_arms(results)
    (suite_dir / "table.md").write_text(format_table(rows, f"ablation: {suite}"))
    (suite_dir / "table.txt").write_text("".join(format_record(r) + "\n" for r in rows))
    plot_ablation(suite_dir, list(results))
    return rows, suite_dir


def cmd_plot(directory: Path | str) -> list[Path]:
    """Re-plot an ablation suite directory, or the curves of a single run."""
    directory = Path(directory)
    table = directory / "table.txt"
    if table.exists():
        arms = [parse_record(line)["arm"] for line in table.read_text().splitlines() if line.strip()]
        return plot_ablation(directory, arms)
    if (directory / "metrics.log").exists():
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        records = read_metrics_log(directory / "metrics.log")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        epochs = [r["epoch"] for r in records]
        for metric in METRIC_NAMES:
            if f"val_{metric}" in records[0]:
                ax.plot(epochs, [100 * r[f"val_{metric}"] for r in records], label=metric)
        ax.set_xlabel("epoch")
        ax.set_ylabel("%")
        ax.legend()
        fig.tight_layout()
        path = directory / "curves.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        return [path]
    raise ConfigError(f"{directory} is neither a run directory nor an ablation suite")
