"""Seeded synthetic driving sequences with compositional weather corruption.

Scenes are a static banded layout (sky / buildings / road) with rigid
rectangles moving on straight lines. Labels are rendered from the clean scene;
fog, rain, darkness and noise are then composited onto the frames only.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .sequence import DATASET_INFO, FrameSequence, read_key_values, write_sequence

WEATHER_TYPES = ("fog", "rain", "darkness", "noise")

# Fixed, well-separated class colours; rows beyond 23 are never used.
_PALETTE = np.array(
    [
        [0.55, 0.75, 0.95],  # sky
        [0.55, 0.45, 0.40],  # building
        [0.35, 0.35, 0.38],  # road
        [0.85, 0.15, 0.15],
        [0.15, 0.70, 0.20],
        [0.95, 0.85, 0.10],
        [0.60, 0.20, 0.80],
        [0.05, 0.35, 0.85],
    ]
    + np.random.default_rng(23).uniform(0.05, 0.95, size=(16, 3)).tolist()
)


@dataclass
class SceneConfig:
    height: int = 32
    width: int = 32
    num_classes: int = 8
    n_objects: int = 3
    weather: dict[str, float] = field(default_factory=dict)
    seq_length: int = 12
    seed: int = 0
    channels: int = 3

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ConfigError("height and width must be >= 8")
        if not 2 <= self.num_classes <= len(_PALETTE):
            raise ConfigError(f"num_classes must be in [2, {len(_PALETTE)}]")
        if self.seq_length < 2:
            raise ConfigError("seq_length must be >= 2")
        if self.n_objects < 0:
            raise ConfigError("n_objects must be >= 0")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        for name, value in self.weather.items():
            if name not in WEATHER_TYPES:
                raise ConfigError(f"unknown weather type {name!r}")
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"weather intensity for {name} must be in [0, 1], got {value}")


@dataclass
class ObjectTrack:
    cls: int
    top: float
    left: float
    h: int
    w: int
    vy: float
    vx: float

    def position(self, t: int) -> tuple[int, int]:
        return int(round(self.top + self.vy * t)), int(round(self.left + self.vx * t))

    def centroid(self, t: int) -> tuple[float, float]:
        r, c = self.position(t)
        return r + (self.h - 1) / 2, c + (self.w - 1) / 2


def _class_layout(num_classes: int) -> tuple[list[int], list[int]]:
    n_bg = min(3, num_classes - 1)
    return list(range(n_bg)), list(range(n_bg, num_classes))


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    H, W = cfg.height, cfg.width
    bg_classes, _ = _class_layout(cfg.num_classes)
    label = np.zeros((H, W), np.int64)
    if len(bg_classes) == 1:
        return label
    horizon = int(rng.uniform(0.25, 0.45) * H)
    road_top = int(rng.uniform(0.6, 0.7) * H)
    if len(bg_classes) == 2:
        label[horizon:] = bg_classes[1]
        return label
    # Skyline: buildings of random width and height between horizon and road.
    col = 0
    while col < W:
        bw = int(rng.integers(3, 9))
        top = int(rng.integers(max(1, horizon - H // 6), horizon + 2))
        label[top:road_top, col : col + bw] = bg_classes[1]
        col += bw
    label[road_top:] = bg_classes[2]
    return label


def object_tracks(cfg: SceneConfig) -> list[ObjectTrack]:
    """The moving objects of the scene, fully inside the frame for every t < L."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    _background(cfg, rng)  # keep the stream aligned with render_clean
    return _tracks(cfg, rng)


def _tracks(cfg: SceneConfig, rng: np.random.Generator) -> list[ObjectTrack]:
    H, W, L = cfg.height, cfg.width, cfg.seq_length
    _, obj_classes = _class_layout(cfg.num_classes)
    tracks = []
    for _ in range(cfg.n_objects):
        h = int(rng.integers(max(2, H // 5), max(3, 2 * H // 5) + 1))
        w = int(rng.integers(max(2, W // 5), max(3, 2 * W // 5) + 1))
        vy = float(rng.uniform(-0.5, 0.5))
        vx = float(rng.uniform(-1.5, 1.5))
        # Keep the rounded box inside the frame over the whole sequence.
        span_y, span_x = vy * (L - 1), vx * (L - 1)
        lo_y, hi_y = max(0.0, -span_y) + 0.5, H - h - max(0.0, span_y) - 0.5
        lo_x, hi_x = max(0.0, -span_x) + 0.5, W - w - max(0.0, span_x) - 0.5
        if hi_x < lo_x:
            vx, lo_x, hi_x = 0.0, 0.0, float(W - w)
        if hi_y < lo_y:
            vy, lo_y, hi_y = 0.0, 0.0, float(H - h)
        top = float(rng.uniform(lo_y, hi_y))
        left = float(rng.uniform(lo_x, hi_x))
        tracks.append(ObjectTrack(int(rng.choice(obj_classes)), top, left, h, w, vy, vx))
    return tracks


def _quantize(frame: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(frame, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def render_clean(cfg: SceneConfig) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Unquantized clean frames and their label maps."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    background = _background(cfg, rng)
    tracks = _tracks(cfg, rng)
    palette = np.clip(_PALETTE + rng.normal(0.0, 0.04, _PALETTE.shape), 0.0, 1.0)
    texture = rng.normal(0.0, 0.03, (cfg.height, cfg.width, 3))
    frames, labels = [], []
    for t in range(cfg.seq_length):
        label = background.copy()
        for tr in tracks:
            r, c = tr.position(t)
            label[r : r + tr.h, c : c + tr.w] = tr.cls
        frame = palette[label] + texture
        if cfg.channels == 1:
            frame = frame.mean(axis=2, keepdims=True)
        frames.append(np.clip(frame, 0.0, 1.0))
        labels.append(label)
    return frames, labels


def apply_fog(frame: np.ndarray, intensity: float) -> np.ndarray:
    if intensity == 0:
        return frame
    rows = np.linspace(1.0, 0.4, frame.shape[0])[:, None, None]
    alpha = intensity * rows
    return frame * (1.0 - alpha) + 0.75 * alpha


def apply_rain(frame: np.ndarray, intensity: float, rng: np.random.Generator) -> np.ndarray:
    if intensity == 0:
        return frame
    H, W = frame.shape[:2]
    out = frame * (1.0 - 0.2 * intensity)
    n_streaks = int(round(intensity * H * W / 40))
    length = max(2, H // 6)
    starts_r = rng.integers(0, H, n_streaks)
    starts_c = rng.integers(0, W, n_streaks)
    for r0, c0 in zip(starts_r, starts_c):
        rr = np.clip(r0 + np.arange(length), 0, H - 1)
        cc = np.clip(c0 + np.arange(length) // 3, 0, W - 1)
        out[rr, cc] = np.minimum(1.0, out[rr, cc] + 0.6 * intensity)
    return out


def apply_darkness(frame: np.ndarray, intensity: float) -> np.ndarray:
    if intensity == 0:
        return frame
    return np.power(frame, 1.0 + 1.5 * intensity) * (1.0 - 0.75 * intensity)


def apply_noise(frame: np.ndarray, intensity: float, rng: np.random.Generator) -> np.ndarray:
    if intensity == 0:
        return frame
    return np.clip(frame + rng.normal(0.0, 0.2 * intensity, frame.shape), 0.0, 1.0)


def corrupt(frames: list[np.ndarray], weather: dict[str, float], seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    out = []
    for frame in frames:
        f = apply_fog(frame, weather.get("fog", 0.0))
        f = apply_rain(f, weather.get("rain", 0.0), rng)
        f = apply_darkness(f, weather.get("darkness", 0.0))
        f = apply_noise(f, weather.get("noise", 0.0), rng)
        out.append(np.clip(f, 0.0, 1.0))
    return out


def generate_sequence(cfg: SceneConfig, sequence_id: str = "") -> FrameSequence:
    frames, labels = render_clean(cfg)
    frames = [_quantize(f) for f in corrupt(frames, cfg.weather, cfg.seed)]
    return FrameSequence(sequence_id or f"seed{cfg.seed}", frames, labels)


# --- benchmark ---------------------------------------------------------------

TRAIN_CONDITIONS = (
    ("fog",),
    ("rain",),
    ("darkness",),
    ("noise",),
    ("fog", "rain"),
    ("rain", "darkness"),
    ("fog", "noise"),
)
VAL_CONDITIONS = (
    ("fog", "rain", "darkness"),
    ("darkness", "noise"),
    ("fog",),
    ("rain",),
)


@dataclass
class BenchmarkProfile:
    n_train: int = 24
    n_val: int = 8
    seq_length: int = 24
    height: int = 32
    width: int = 32
    num_classes: int = 8
    n_objects: int = 3
    channels: int = 3
    seed: int = 0
    intensity_low: float = 0.4
    intensity_high: float = 0.8

    def validate(self) -> None:
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be >= 1")
        if not 0.0 <= self.intensity_low <= self.intensity_high <= 1.0:
            raise ConfigError("need 0 <= intensity_low <= intensity_high <= 1")

    @classmethod
    def from_file(cls, path: Path | str) -> "BenchmarkProfile":
        return cls.from_mapping(read_key_values(Path(path)))

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "BenchmarkProfile":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown profile key {key!r}")
            kwargs[key] = float(raw) if "float" in str(types[key]) else int(raw)
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


def sequence_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def _conditions(profile: BenchmarkProfile, split: str):
    conds = TRAIN_CONDITIONS if split == "train" else VAL_CONDITIONS
    n = profile.n_train if split == "train" else profile.n_val
    # Contiguous groups per condition, so unshuffled training sees them in blocks.
    return [conds[i * len(conds) // n] if n >= len(conds) else conds[i % len(conds)] for i in range(n)]


def generate_benchmark(root: Path | str, profile: BenchmarkProfile | None = None) -> Path:
    """Write train/val sequences plus manifests under ``root``; returns ``root/manifest.txt``."""
    profile = profile or BenchmarkProfile()
    profile.validate()
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        manifests = {"train": [], "val": []}
        index = 0
        for split in ("train", "val"):
            for i, cond in enumerate(_conditions(profile, split)):
                seed = sequence_seed(profile.seed, index)
                index += 1
                rng = np.random.default_rng(seed)
                weather = {
                    w: round(float(rng.uniform(profile.intensity_low, profile.intensity_high)), 3)
                    for w in cond
                }
                cfg = SceneConfig(
                    height=profile.height,
                    width=profile.width,
                    num_classes=profile.num_classes,
                    n_objects=profile.n_objects,
                    weather=weather,
                    seq_length=profile.seq_length,
                    seed=seed,
                    channels=profile.channels,
                )
                rel = f"{split}/seq_{i:03d}"
                write_sequence(generate_sequence(cfg, rel), root / rel)
                (root / rel / "weather.cfg").write_text(
                    f"seed = {seed}\n" + "".join(f"{k} = {v}\n" for k, v in weather.items())
                )
                manifests[split].append(f"{rel}  # {'+'.join(cond)}")
        for split, lines in manifests.items():
            (root / f"{split}.txt").write_text("\n".join(lines) + "\n")
        (root / "manifest.txt").write_text(
            "# train\n" + "\n".join(manifests["train"]) + "\n# val\n" + "\n".join(manifests["val"]) + "\n"
        )
        (root / DATASET_INFO).write_text(
            f"num_classes = {profile.num_classes}\nheight = {profile.height}\n"
            f"width = {profile.width}\nchannels = {profile.channels}\n"
        )
        (root / "profile.cfg").write_text(profile.to_text())
    except OSError as exc:
        raise OSError(f"failed writing benchmark under {root}: {exc}") from exc
    return root / "manifest.txt"
