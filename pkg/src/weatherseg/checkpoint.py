"""Checkpoint container.

The file is a ``torch.save`` zip archive holding one dict::

    format      "weatherseg-checkpoint"
    version     FORMAT_VERSION
    manifest    {tensor name: [shape, dtype]} for every stored tensor
    network     NetworkSpec fields
    loss        LossConfig fields (contrast config flattened under "contrast")
    weights     model state_dict
    unfold      {"alpha", "gamma", "eta"}
    optimizer   optimizer state_dict
    epoch, step, seed
    rng         torch CPU generator state
    run         free-form run settings (depth, batch size, ...)

It loads with ``weights_only=True``.
"""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

from .errors import VersionError
from .net import NetworkSpec, build_model
from .regularizers import ContrastConfig
from .unfolding import LossConfig, OptimConfig, TrainState, UnfoldParams, make_optimizer

FORMAT = "weatherseg-checkpoint"
FORMAT_VERSION = 1


def _manifest(tensors: dict[str, torch.Tensor]) -> dict[str, list]:
    return {name: [list(t.shape), str(t.dtype)] for name, t in tensors.items()}


def save_checkpoint(
    path: Path | str,
    state: TrainState,
    loss_cfg: LossConfig,
    optim_cfg: OptimConfig | None = None,
    run: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    weights = {k: v.detach().clone() for k, v in state.model.state_dict().items()}
    unfold = {n: getattr(state.unfold, n).detach().clone() for n in ("alpha", "gamma", "eta")}
    optim_cfg = optim_cfg or OptimConfig()
    payload = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "manifest": _manifest({**{f"weights.{k}": v for k, v in weights.items()}, **{f"unfold.{k}": v for k, v in unfold.items()}}),
        "network": state.model.spec.to_dict(),
        "loss": {**{k: v for k, v in asdict(loss_cfg).items() if k != "contrast"}, "contrast": asdict(loss_cfg.contrast)},
        "optim": {"lr": optim_cfg.lr, "betas": list(optim_cfg.betas), "weight_decay": optim_cfg.weight_decay},
        "weights": weights,
        "unfold": unfold,
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "seed": state.seed,
        "rng": torch.get_rng_state(),
        "run": dict(run or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path | str, restore_rng: bool = True):
    """Returns ``(state, loss_cfg, optim_cfg, run)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise VersionError(f"{path} is not a readable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise VersionError(f"{path} is not a {FORMAT} file")
    if payload.get("version") != FORMAT_VERSION:
        raise VersionError(f"{path} has format version {payload.get('version')}, expected {FORMAT_VERSION}")
    spec = NetworkSpec(**payload["network"])
    loss_fields = dict(payload["loss"])
    loss_cfg = LossConfig(**{**loss_fields, "contrast": ContrastConfig(**loss_fields["contrast"])})
    o = payload["optim"]
    optim_cfg = OptimConfig(lr=o["lr"], betas=tuple(o["betas"]), weight_decay=o["weight_decay"])
    model = build_model(spec)
    try:
        model.load_state_dict(payload["weights"])
    except RuntimeError as exc:
        raise VersionError(f"{path}: weights do not match the stored network spec: {exc}") from exc
    u = payload["unfold"]
    unfold = UnfoldParams.from_values(u["alpha"], u["gamma"], u["eta"])
    optimizer = make_optimizer(model, unfold, optim_cfg)
    optimizer.load_state_dict(payload["optimizer"])
    if restore_rng:
        torch.set_rng_state(payload["rng"])
    state = TrainState(model, unfold, optimizer, payload["epoch"], payload["step"], payload["seed"])
    return state, loss_cfg, optim_cfg, payload.get("run", {})
