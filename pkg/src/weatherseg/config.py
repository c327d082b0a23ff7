"""Run configuration: plain-text ``key = value`` files plus flag overrides."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .net import POLICIES, NetworkSpec
from .regularizers import ContrastConfig
from .sequence import read_key_values
from .unfolding import LOSS_MODES, LossConfig, OptimConfig

FAST_EPOCHS = 20

HELP = {
    "data": "benchmark root; train.txt / val.txt inside it are used unless manifests are given",
    "train_manifest": "manifest of training sequences",
    "val_manifest": "manifest of validation sequences",
    "depth": "number of past frames per temporal window",
    "policy": "fusion policy (CE or FI)",
    "gsm": "globally shuffle windows each epoch (off = sequence-then-anchor order)",
    "loss": "ce (cross-entropy only), vrs (fixed-weight regularizers) or urs (unrolled)",
    "K": "number of unrolled layers in urs mode",
    "vr_alpha": "fixed Bhattacharyya weight in vrs mode",
    "vr_gamma": "fixed InfoNCE weight in vrs mode",
    "alpha0": "initial per-layer Bhattacharyya weight",
    "gamma0": "initial per-layer InfoNCE weight",
    "eta0": "initial per-layer step size",
    "tau": "InfoNCE temperature",
    "anchors": "max anchors per image",
    "positives": "max positives per anchor",
    "negatives": "max negatives per anchor",
    "lr": "learning rate",
    "beta1": "Adam beta1",
    "beta2": "Adam beta2",
    "weight_decay": "Adam weight decay",
    "batch_size": "mini-batch size",
    "epochs": "training epochs",
    "fast": "fast mode: caps epochs at 20",
    "seeds": "comma-separated seeds, one run per seed",
    "width": "backbone channel width",
    "backbone_depth": "number of stride-2 encoder stages",
    "out": "output directory",
    "deterministic": "enable deterministic torch algorithms",
}


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_seeds(raw) -> tuple[int, ...]:
    if isinstance(raw, (tuple, list)):
        return tuple(int(s) for s in raw)
    return tuple(int(s) for s in str(raw).replace(" ", "").split(",") if s)


@dataclass(frozen=True)
class RunConfig:
    data: str = ""
    train_manifest: str = ""
    val_manifest: str = ""
    depth: int = 3
    policy: str = "FI"
    gsm: bool = True
    loss: str = "urs"
    K: int = 5
    vr_alpha: float = 0.1
    vr_gamma: float = 0.1
    alpha0: float = 0.1
    gamma0: float = 0.1
    eta0: float = 0.01
    tau: float = 0.1
    anchors: int = 16
    positives: int = 32
    negatives: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 200
    fast: bool = False
    seeds: tuple[int, ...] = (0, 1, 2)
    width: int = 16
    backbone_depth: int = 2
    out: str = "runs/default"
    deterministic: bool = True

    @property
    def effective_epochs(self) -> int:
        return min(self.epochs, FAST_EPOCHS) if self.fast else self.epochs

    def resolved_manifests(self) -> tuple[Path, Path | None]:
        train = Path(self.train_manifest) if self.train_manifest else Path(self.data) / "train.txt"
        if self.val_manifest:
            val = Path(self.val_manifest)
        elif self.data:
            val = Path(self.data) / "val.txt"
        else:
            val = None
        return train, val

    def dataset_root(self, manifest: Path) -> Path:
        return Path(self.data) if self.data else manifest.parent

    def validate(self) -> "RunConfig":
        errors = []
        if not self.data and not self.train_manifest:
            errors.append("data: either data or train_manifest must be set")
        if self.depth < 1:
            errors.append(f"depth: must be >= 1, got {self.depth}")
        if self.policy not in POLICIES:
            errors.append(f"policy: must be one of {POLICIES}, got {self.policy!r}")
        if self.loss not in LOSS_MODES:
            errors.append(f"loss: must be one of {LOSS_MODES}, got {self.loss!r}")
        if self.K < 0:
            errors.append(f"K: must be >= 0, got {self.K}")
        if self.tau <= 0:
            errors.append(f"tau: must be > 0, got {self.tau}")
        for name in ("anchors", "positives", "negatives", "batch_size", "epochs", "width", "backbone_depth"):
            if getattr(self, name) < 1:
                errors.append(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            errors.append(f"lr: must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errors.append("beta1/beta2: must lie in [0, 1)")
        if self.weight_decay < 0:
            errors.append("weight_decay: must be >= 0")
        if not self.seeds:
            errors.append("seeds: at least one seed is required")
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        return self

    def network_spec(self, num_classes: int, input_channels: int) -> NetworkSpec:
        return NetworkSpec(self.policy, num_classes, self.width, self.backbone_depth, input_channels)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            mode=self.loss,
            K=self.K,
            vr_alpha=self.vr_alpha,
            vr_gamma=self.vr_gamma,
            alpha0=self.alpha0,
            gamma0=self.gamma0,
            eta0=self.eta0,
            contrast=ContrastConfig(self.tau, self.anchors, self.positives, self.negatives),
        )

    def optim_config(self) -> OptimConfig:
        return OptimConfig(self.lr, (self.beta1, self.beta2), self.weight_decay)

    def with_overrides(self, values: dict) -> "RunConfig":
        return replace(self, **coerce(values))

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def field_type(name: str) -> str:
    return str(_FIELD_TYPES[name])


def coerce(values: dict) -> dict:
    out = {}
    errors = []
    for key, raw in values.items():
        if key not in _FIELD_TYPES:
            errors.append(f"{key}: unknown configuration key")
            continue
        kind = field_type(key)
        try:
            if not isinstance(raw, str):
                out[key] = _parse_seeds(raw) if key == "seeds" else raw
            elif kind == "bool":
                out[key] = _parse_bool(raw)
            elif kind == "int":
                out[key] = int(raw)
            elif kind == "float":
                out[key] = float(raw)
            elif key == "seeds":
                out[key] = _parse_seeds(raw)
            else:
                out[key] = raw
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return out


def load_config(path: Path | str | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            values.update(read_key_values(path))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    values.update(overrides or {})
    return RunConfig().with_overrides(values)
