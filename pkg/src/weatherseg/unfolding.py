"""K-layer unrolled regularizer descent and the joint training step.

Each layer takes one descent step on the current logits::

    x_k = x_{k-1} - eta_k * (alpha_k * g_bd(x_{k-1}) + gamma_k * g_con(x_{k-1}))

``g_bd`` is the closed-form Bhattacharyya gradient evaluated on the
probability table induced by ``x_{k-1}``, applied position-for-position to the
logits (no softmax Jacobian). ``g_con`` is the InfoNCE anchor gradient,
non-zero only at sampled anchor pixels. The per-layer ``alpha``, ``gamma`` and
``eta`` are trained jointly with the network by backpropagating the
cross-entropy of ``x_0 + x_K`` through every layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DivergenceError, ShapeError
from .net import FusionSegmenter, WindowBatch, predict
from .regularizers import (
    EPS,
    ContrastConfig,
    ContrastIndex,
    bd_grad_batch,
    bd_loss_batch,
    infonce_grad_map,
    infonce_loss_batch,
    sample_contrast_indices,
)

LOSS_MODES = ("ce", "vrs", "urs")


class UnfoldParams(nn.Module):
    """Per-layer learnable weights ``alpha``, ``gamma`` and step sizes ``eta``."""

    def __init__(self, K: int, alpha0: float = 0.1, gamma0: float = 0.1, eta0: float = 0.01):
        super().__init__()
        if K < 0:
            raise ConfigError(f"K must be >= 0, got {K}")
        self.alpha = nn.Parameter(torch.full((K,), float(alpha0)))
        self.gamma = nn.Parameter(torch.full((K,), float(gamma0)))
        self.eta = nn.Parameter(torch.full((K,), float(eta0)))

    @property
    def K(self) -> int:
        return self.alpha.numel()

    @classmethod
    def from_values(cls, alpha, gamma, eta) -> "UnfoldParams":
        alpha, gamma, eta = (torch.as_tensor(v, dtype=torch.get_default_dtype()) for v in (alpha, gamma, eta))
        if not (alpha.numel() == gamma.numel() == eta.numel()):
            raise ConfigError("alpha, gamma and eta must have equal length")
        params = cls(alpha.numel())
        with torch.no_grad():
            params.alpha.copy_(alpha)
            params.gamma.copy_(gamma)
            params.eta.copy_(eta)
        return params


@dataclass(frozen=True)
class LossConfig:
    mode: str = "urs"
    K: int = 5
    vr_alpha: float = 0.1
    vr_gamma: float = 0.1
    alpha0: float = 0.1
    gamma0: float = 0.1
    eta0: float = 0.01
    eps: float = EPS
    contrast: ContrastConfig = field(default_factory=ContrastConfig)

    def validate(self) -> None:
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.contrast.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def unrolled_layers(self) -> int:
        return self.K if self.mode == "urs" else 0


def unroll(
    x0: torch.Tensor,
    labels: torch.Tensor,
    params: UnfoldParams,
    cfg: LossConfig,
    seed: int = 0,
    index: ContrastIndex | None = None,
) -> torch.Tensor:
    """Run the K unrolled descent layers from logits ``x0``; K = 0 returns ``x0``.

    The contrast sets are drawn once (from ``labels`` and ``seed``) and shared by
    all layers, unless a precomputed ``index`` is supplied.
    """
    if x0.ndim != 4 or labels.shape != (x0.shape[0], *x0.shape[2:]):
        raise ShapeError(f"logits {tuple(x0.shape)} and labels {tuple(labels.shape)} misaligned")
    if params.K == 0:
        return x0
    if index is None:
        index = sample_contrast_indices(labels, cfg.contrast, seed)
    tau = cfg.contrast.temperature
    x = x0
    for k in range(params.K):
        g_bd = bd_grad_batch(x, labels, cfg.eps)
        g_con = infonce_grad_map(x, index, tau)
        x = x - params.eta[k] * (params.alpha[k] * g_bd + params.gamma[k] * g_con)
        if not torch.isfinite(x).all():
            raise DivergenceError(f"non-finite values after unrolled layer {k + 1}", layer=k + 1)
    return x


def aggregate(x0: torch.Tensor, xK: torch.Tensor) -> torch.Tensor:
    if x0.shape != xK.shape:
        raise ShapeError(f"cannot aggregate {tuple(x0.shape)} with {tuple(xK.shape)}")
    return x0 + xK


def vanilla_regularized_loss(
    x0: torch.Tensor,
    labels: torch.Tensor,
    alpha0: float,
    gamma0: float,
    cfg: LossConfig | None = None,
    seed: int = 0,
    index: ContrastIndex | None = None,
) -> torch.Tensor:
    """Cross-entropy plus fixed-weight Bhattacharyya and InfoNCE terms."""
    cfg = cfg or LossConfig(mode="vrs")
    loss = F.cross_entropy(x0, labels)
    if alpha0:
        loss = loss + alpha0 * bd_loss_batch(x0, labels, cfg.eps).mean()
    if gamma0:
        if index is None:
            index = sample_contrast_indices(labels, cfg.contrast, seed)
        loss = loss + gamma0 * infonce_loss_batch(x0, index, cfg.contrast.temperature).mean()
    return loss


def segmentation_logits(
    model: FusionSegmenter,
    unfold: UnfoldParams,
    batch: WindowBatch,
    cfg: LossConfig,
    seed: int,
    labels: torch.Tensor | None = None,
):
    """Return ``(x0, x)`` where ``x`` is the prediction fed to the loss / argmax.

    Without ``labels`` (inference) the unrolled layers use the argmax of ``x0``
    as pseudo-labels. With no unrolled layers ``x`` is ``x0``.
    """
    x0 = predict(model, batch)
    if cfg.unrolled_layers == 0:
        return x0, x0
    if labels is None:
        labels = x0.detach().argmax(dim=1)
    xK = unroll(x0, labels, unfold, cfg, seed)
    return x0, aggregate(x0, xK)


@dataclass
class TrainState:
    model: FusionSegmenter
    unfold: UnfoldParams
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    seed: int = 0


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4


def make_optimizer(model: nn.Module, unfold: UnfoldParams, cfg: OptimConfig) -> torch.optim.Optimizer:
    params = list(model.parameters()) + [p for p in unfold.parameters() if p.numel()]
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def make_train_state(spec, loss_cfg: LossConfig, optim_cfg: OptimConfig | None = None, seed: int = 0) -> TrainState:
    from .net import build_model

    loss_cfg.validate()
    torch.manual_seed(seed)
    model = build_model(spec)
    unfold = UnfoldParams(loss_cfg.unrolled_layers, loss_cfg.alpha0, loss_cfg.gamma0, loss_cfg.eta0)
    optimizer = make_optimizer(model, unfold, optim_cfg or OptimConfig())
    return TrainState(model, unfold, optimizer, seed=seed)


def step_seed(base_seed: int, step: int) -> int:
    return (base_seed * 1_000_003 + step) % (2**63)


def compute_loss(state: TrainState, batch: WindowBatch, cfg: LossConfig) -> torch.Tensor:
    seed = step_seed(state.seed, state.step)
    if cfg.mode == "vrs":
        x0 = predict(state.model, batch)
        return vanilla_regularized_loss(x0, batch.labels, cfg.vr_alpha, cfg.vr_gamma, cfg, seed)
    _, x = segmentation_logits(state.model, state.unfold, batch, cfg, seed, labels=batch.labels)
    return F.cross_entropy(x, batch.labels)


def train_step(batch: WindowBatch, state: TrainState, cfg: LossConfig) -> tuple[TrainState, float]:
    if batch.labels.shape[0] == 0:
        raise ConfigError("empty batch")
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss = compute_loss(state, batch, cfg)
    if not torch.isfinite(loss):
        raise DivergenceError(
            f"non-finite training loss at step {state.step}",
            snapshot={
                "step": state.step,
                "epoch": state.epoch,
                "loss": float(loss.detach()),
                "alpha": state.unfold.alpha.detach().tolist(),
                "gamma": state.unfold.gamma.detach().tolist(),
                "eta": state.unfold.eta.detach().tolist(),
            },
        )
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return state, float(loss.detach())


def unfold_gradient_norms(unfold: UnfoldParams) -> dict[str, float]:
    out = {}
    for name in ("alpha", "gamma", "eta"):
        grad = getattr(unfold, name).grad
        out[name] = math.nan if grad is None else float(grad.norm())
    return out
