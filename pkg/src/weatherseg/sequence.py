"""Temporal windows, global shuffling and on-disk dataset ingestion.

A window anchored at frame ``t`` with depth ``d`` carries three views of the
scene: the current frame (instant), the mean of the ``d`` preceding frames
(integral) and their difference (derivative).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import (
    ConsistencyError,
    EmptyPoolError,
    IngestionError,
    InvalidDepthError,
    SequenceTooShortError,
)

DATASET_INFO = "dataset.cfg"


@dataclass
class FrameSequence:
    """One drive: ``frames[i]`` is H x W x C_img in [0, 1], ``labels[i]`` is H x W."""

    sequence_id: str
    frames: list[np.ndarray]
    labels: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def length(self) -> int:
        return len(self.frames)

    def validate(self, num_classes: int | None = None) -> None:
        if len(self.frames) != len(self.labels):
            raise ConsistencyError(
                f"{self.sequence_id}: {len(self.frames)} frames but {len(self.labels)} labels"
            )
        if not self.frames:
            raise ConsistencyError(f"{self.sequence_id}: empty sequence")
        h, w = self.frames[0].shape[:2]
        for i, (frame, label) in enumerate(zip(self.frames, self.labels)):
            if frame.ndim != 3 or frame.shape[:2] != (h, w):
                raise ConsistencyError(f"{self.sequence_id}: frame {i} has shape {frame.shape}")
            if label.shape != (h, w):
                raise ConsistencyError(f"{self.sequence_id}: label {i} has shape {label.shape}")
            if num_classes is not None and (label.min() < 0 or label.max() >= num_classes):
                raise ConsistencyError(
                    f"{self.sequence_id}: label {i} outside [0, {num_classes})"
                )


@dataclass
class LsmWindow:
    anchor_index: int
    insu: np.ndarray
    intu: np.ndarray
    du: np.ndarray
    label: np.ndarray
    depth: int
    sequence_id: str = ""


@dataclass(frozen=True)
class ShufflePlan:
    base_seed: int
    epoch: int
    order: np.ndarray
    batch_size: int = 8

    def __len__(self) -> int:
        return len(self.order)


def build_windows(seq: FrameSequence, depth: int) -> list[LsmWindow]:
    if depth < 1:
        raise InvalidDepthError(f"depth must be >= 1, got {depth}")
    if seq.length <= depth:
        raise SequenceTooShortError(
            f"sequence {seq.sequence_id!r} has {seq.length} frames, needs more than {depth}"
        )
    frames = np.stack([np.asarray(f, dtype=np.float64) for f in seq.frames])
    # Prefix sums give every trailing mean in one pass.
    csum = np.concatenate([np.zeros_like(frames[:1]), np.cumsum(frames, axis=0)])
    windows = []
    for t in range(depth, seq.length):
        intu = (csum[t] - csum[t - depth]) / depth
        insu = frames[t]
        windows.append(
            LsmWindow(
                anchor_index=t,
                insu=insu.astype(np.float32),
                intu=intu.astype(np.float32),
                du=(insu - intu).astype(np.float32),
                label=np.asarray(seq.labels[t], dtype=np.int64),
                depth=depth,
                sequence_id=seq.sequence_id,
            )
        )
    return windows


def build_pool(sequences: Sequence[FrameSequence], depth: int) -> list[LsmWindow]:
    """Windows from all sequences, in sequence-then-anchor order."""
    pool = []
    for seq in sequences:
        pool.extend(build_windows(seq, depth))
    return pool


def gsm_shuffle(n_windows: int, base_seed: int, epoch: int, batch_size: int = 8) -> ShufflePlan:
    if n_windows < 1:
        raise EmptyPoolError("cannot shuffle an empty window pool")
    if batch_size < 1:
        raise ConsistencyError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(np.random.SeedSequence([base_seed, epoch]))
    return ShufflePlan(base_seed, epoch, rng.permutation(n_windows), batch_size)


def sequential_plan(n_windows: int, epoch: int = 0, batch_size: int = 8) -> ShufflePlan:
    """The unshuffled baseline: windows visited in pool order every epoch."""
    if n_windows < 1:
        raise EmptyPoolError("cannot plan over an empty window pool")
    return ShufflePlan(-1, epoch, np.arange(n_windows), batch_size)


def make_batches(plan: ShufflePlan, windows: Sequence[LsmWindow]) -> Iterator[list[LsmWindow]]:
    if len(plan.order) != len(windows):
        raise ConsistencyError(
            f"plan covers {len(plan.order)} windows but {len(windows)} were given"
        )
    for start in range(0, len(plan.order), plan.batch_size):
        yield [windows[i] for i in plan.order[start : start + plan.batch_size]]


def batch_indices(plan: ShufflePlan) -> list[list[int]]:
    n = len(plan.order)
    return [
        plan.order[i * plan.batch_size : (i + 1) * plan.batch_size].tolist()
        for i in range(math.ceil(n / plan.batch_size))
    ]


# --- disk format ---------------------------------------------------------


def read_manifest(manifest: Path) -> list[str]:
    entries = []
    for line in Path(manifest).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            entries.append(line)
    return entries


def read_key_values(path: Path) -> dict[str, str]:
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_sequence(seq: FrameSequence, directory: Path) -> None:
    frames_dir = Path(directory) / "frames"
    labels_dir = Path(directory) / "labels"
    frames_dir.mkdir(parents=True, exist_ok=True)
    labels_dir.mkdir(parents=True, exist_ok=True)
    for i, (frame, label) in enumerate(zip(seq.frames, seq.labels)):
        pixels = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
        if pixels.shape[2] == 1:
            pixels = pixels[..., 0]
        Image.fromarray(pixels).save(frames_dir / f"{i:04d}.png")
        Image.fromarray(label.astype(np.uint8), mode="L").save(labels_dir / f"{i:04d}.png")


def decode_frame(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr.astype(np.float32) / 255.0


def decode_label(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "P", "I", "I;16"):
        raise IngestionError(f"{path}: label maps must be single-channel, got mode {img.mode}")
    return np.asarray(img).astype(np.int64)


def _load_sequence(root: Path, rel: str, num_classes: int | None) -> FrameSequence:
    directory = root / rel
    frames_dir, labels_dir = directory / "frames", directory / "labels"
    for d in (frames_dir, labels_dir):
        if not d.is_dir():
            raise IngestionError(f"sequence {rel!r}: missing directory {d}")
    frame_files = sorted(frames_dir.glob("*.png"))
    label_files = sorted(labels_dir.glob("*.png"))
    if len(frame_files) != len(label_files):
        raise IngestionError(
            f"sequence {rel!r}: {len(frame_files)} frames but {len(label_files)} labels"
        )
    if not frame_files:
        raise IngestionError(f"sequence {rel!r}: no frames found")
    frames, labels = [], []
    shape = None
    for fpath, lpath in zip(frame_files, label_files):
        if fpath.name != lpath.name:
            raise IngestionError(f"sequence {rel!r}: frame {fpath.name} paired with label {lpath.name}")
        frame = decode_frame(fpath)
        label = decode_label(lpath)
        if shape is None:
            shape = frame.shape
        if frame.shape != shape:
            raise IngestionError(f"sequence {rel!r}, frame {fpath.name}: shape {frame.shape} != {shape}")
        if label.shape != frame.shape[:2]:
            raise IngestionError(
                f"sequence {rel!r}, label {lpath.name}: shape {label.shape} != {frame.shape[:2]}"
            )
        if num_classes is not None and label.max() >= num_classes:
            raise IngestionError(
                f"sequence {rel!r}, label {lpath.name}: value {label.max()} >= num_classes {num_classes}"
            )
        frames.append(frame)
        labels.append(label)
    return FrameSequence(rel, frames, labels)


def dataset_num_classes(root: Path) -> int | None:
    info = Path(root) / DATASET_INFO
    if info.exists():
        return int(read_key_values(info)["num_classes"])
    return None


def ingest_dataset(
    root_path: Path | str,
    manifest: Path | str,
    num_classes: int | None = None,
    workers: int = 1,
) -> list[FrameSequence]:
    """Load every sequence listed in ``manifest`` (paths relative to ``root_path``).

    ``num_classes`` defaults to the value recorded in ``root_path/dataset.cfg``;
    without either, label ranges are not checked.
    """
    root = Path(root_path)
    manifest = Path(manifest)
    if not manifest.is_file():
        raise IngestionError(f"manifest not found: {manifest}")
    if num_classes is None:
        num_classes = dataset_num_classes(root)
    entries = read_manifest(manifest)
    if not entries:
        raise IngestionError(f"manifest {manifest} lists no sequences")
    # Executor.map keeps manifest order regardless of completion order.
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sequences = list(pool.map(lambda rel: _load_sequence(root, rel, num_classes), entries))
    shape = sequences[0].frames[0].shape
    for seq in sequences:
        if seq.frames[0].shape != shape:
            raise IngestionError(
                f"sequence {seq.sequence_id!r}: frame shape {seq.frames[0].shape} != {shape}"
            )
    return sequences
