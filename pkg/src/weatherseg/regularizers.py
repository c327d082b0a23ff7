"""Bhattacharyya-distance and grouped InfoNCE regularizers with closed-form gradients.

The Bhattacharyya terms operate on (pixel, class) probability tables: the
prediction table is the per-pixel softmax divided by the pixel count, the
label table is the one-hot map divided by the pixel count, so each sums to 1.

The contrastive terms use per-pixel logit vectors as embeddings and
ground-truth (or pseudo) labels for positive/negative membership.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, ShapeError

EPS = 1e-8


# --- Bhattacharyya distance ------------------------------------------------


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def bd_loss(p_x, p_y, eps: float = EPS) -> torch.Tensor:
    """``-ln(sum sqrt(P_X * P_Y))`` with ``P_X`` clamped below at ``eps``."""
    p_x, p_y = _as_tensor(p_x), _as_tensor(p_y)
    if p_x.shape != p_y.shape:
        raise ShapeError(f"distribution shapes differ: {tuple(p_x.shape)} vs {tuple(p_y.shape)}")
    coeff = (torch.sqrt(p_x.clamp_min(eps)) * torch.sqrt(p_y)).sum()
    return -torch.log(coeff)


def bd_grad(p_x, p_y, eps: float = EPS) -> torch.Tensor:
    """Gradient of :func:`bd_loss` with respect to ``P_X``.

    Entry x is ``-(1/2) * (1/BC) * sqrt(P_Y(x)) / sqrt(P_X(x))``; entries where
    ``P_Y`` is zero come out as exactly zero.
    """
    p_x, p_y = _as_tensor(p_x), _as_tensor(p_y)
    if p_x.shape != p_y.shape:
        raise ShapeError(f"distribution shapes differ: {tuple(p_x.shape)} vs {tuple(p_y.shape)}")
    p_x = p_x.clamp_min(eps)
    assert bool((p_x >= eps).all()), "clamped P_X fell below epsilon"
    coeff = (torch.sqrt(p_x) * torch.sqrt(p_y)).sum()
    return -0.5 / coeff * torch.sqrt(p_y) / torch.sqrt(p_x)


def prediction_distribution(logits: torch.Tensor) -> torch.Tensor:
    """Per-image (pixel, class) table: softmax over classes divided by H*W."""
    n = logits.shape[-2] * logits.shape[-1]
    return torch.softmax(logits, dim=1) / n


def label_distribution(labels: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    n = labels.shape[-2] * labels.shape[-1]
    onehot = F.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(dtype)
    return onehot / n


def bd_loss_batch(logits: torch.Tensor, labels: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Per-image Bhattacharyya distance, shape ``(B,)``."""
    p_x = prediction_distribution(logits).clamp_min(eps)
    p_y = label_distribution(labels, logits.shape[1], logits.dtype)
    # sqrt(p_x) * sqrt(p_y) keeps d/dp_x finite where p_y == 0.
    coeff = (torch.sqrt(p_x) * torch.sqrt(p_y)).flatten(1).sum(dim=1)
    return -torch.log(coeff)


def bd_grad_batch(logits: torch.Tensor, labels: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Per-image :func:`bd_grad` laid out like ``logits``."""
    p_x = prediction_distribution(logits).clamp_min(eps)
    p_y = label_distribution(labels, logits.shape[1], logits.dtype)
    coeff = (torch.sqrt(p_x) * torch.sqrt(p_y)).flatten(1).sum(dim=1).view(-1, 1, 1, 1)
    return -0.5 / coeff * torch.sqrt(p_y) / torch.sqrt(p_x)


# --- grouped InfoNCE -------------------------------------------------------


@dataclass
class ContrastSample:
    anchor: torch.Tensor  # (C,)
    positives: torch.Tensor  # (M, C)
    negatives: torch.Tensor  # (N, C), may have N == 0
    temperature: float = 0.1

    def check(self) -> None:
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if self.positives.ndim != 2 or self.positives.shape[0] < 1:
            raise ContractError("an anchor needs at least one positive")


@dataclass(frozen=True)
class ContrastConfig:
    temperature: float = 0.1
    max_anchors: int = 16
    max_positives: int = 32
    max_negatives: int = 32


def infonce_loss(sample: ContrastSample) -> torch.Tensor:
    sample.check()
    tau = sample.temperature
    pos = sample.positives @ sample.anchor / tau
    if sample.negatives.shape[0] == 0:
        return torch.zeros((), dtype=pos.dtype)
    neg = sample.negatives @ sample.anchor / tau
    return torch.logsumexp(torch.cat([pos, neg]), 0) - torch.logsumexp(pos, 0)


def infonce_grad(sample: ContrastSample) -> torch.Tensor:
    """``grad B / B - grad A / A`` with respect to the anchor embedding."""
    sample.check()
    tau = sample.temperature
    if sample.negatives.shape[0] == 0:
        return torch.zeros_like(sample.anchor)
    vectors = torch.cat([sample.positives, sample.negatives])
    w_all = torch.softmax(vectors @ sample.anchor / tau, 0)
    w_pos = torch.softmax(sample.positives @ sample.anchor / tau, 0)
    grad_b_over_b = (w_all[:, None] * vectors).sum(0) / tau
    grad_a_over_a = (w_pos[:, None] * sample.positives).sum(0) / tau
    return grad_b_over_b - grad_a_over_a


@dataclass
class ContrastIndex:
    """Padded pixel-index sets for a batch; flat indices into H*W.

    Shapes: anchors ``(B, A)``, positives ``(B, A, M)``, negatives ``(B, A, N)``,
    each paired with a boolean validity mask.
    """

    anchors: torch.Tensor
    anchor_mask: torch.Tensor
    positives: torch.Tensor
    positive_mask: torch.Tensor
    negatives: torch.Tensor
    negative_mask: torch.Tensor

    @property
    def num_anchors(self) -> torch.Tensor:
        return self.anchor_mask.sum(dim=1)


def _sample_image(flat: np.ndarray, cfg: ContrastConfig, rng: np.random.Generator):
    counts = np.bincount(flat)
    n = flat.size
    eligible = np.flatnonzero((counts[flat] >= 2) & (counts[flat] < n))
    if eligible.size == 0 or cfg.max_anchors < 1:
        return []
    anchors = rng.choice(eligible, size=min(cfg.max_anchors, eligible.size), replace=False)
    members = {}
    out = []
    for a in anchors:
        cls = flat[a]
        if cls not in members:
            members[cls] = (np.flatnonzero(flat == cls), np.flatnonzero(flat != cls))
        same, other = members[cls]
        same = same[same != a]
        pos = rng.choice(same, size=min(cfg.max_positives, same.size), replace=False)
        neg = rng.choice(other, size=min(cfg.max_negatives, other.size), replace=False)
        out.append((int(a), pos, neg))
    return out


def sample_contrast_indices(labels, cfg: ContrastConfig, seed: int) -> ContrastIndex:
    """Seeded anchor/positive/negative draws for a ``(B, H, W)`` label batch."""
    labels = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels)
    if labels.ndim == 2:
        labels = labels[None]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    per_image = [_sample_image(img.ravel().astype(np.int64), cfg, rng) for img in labels]
    b = len(per_image)
    a = max([len(s) for s in per_image] + [1])
    m = max([len(p) for s in per_image for _, p, _ in s] + [1])
    k = max([len(q) for s in per_image for _, _, q in s] + [1])
    anchors = np.zeros((b, a), np.int64)
    anchor_mask = np.zeros((b, a), bool)
    pos = np.zeros((b, a, m), np.int64)
    pos_mask = np.zeros((b, a, m), bool)
    neg = np.zeros((b, a, k), np.int64)
    neg_mask = np.zeros((b, a, k), bool)
    for i, samples in enumerate(per_image):
        for j, (anc, p, q) in enumerate(samples):
            anchors[i, j] = anc
            anchor_mask[i, j] = True
            pos[i, j, : len(p)] = p
            pos_mask[i, j, : len(p)] = True
            neg[i, j, : len(q)] = q
            neg_mask[i, j, : len(q)] = True
    # Padded anchors get one dummy positive so every softmax row has a finite entry.
    pos_mask[~anchor_mask, 0] = True
    t = torch.from_numpy
    return ContrastIndex(t(anchors), t(anchor_mask), t(pos), t(pos_mask), t(neg), t(neg_mask))


def sample_contrast_sets(prediction: torch.Tensor, labels, cfg: ContrastConfig, seed: int = 0) -> list[ContrastSample]:
    """ContrastSamples for one ``(C, H, W)`` prediction and its ``(H, W)`` labels."""
    labels_np = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels)
    if prediction.shape[-2:] != labels_np.shape:
        raise ShapeError(f"prediction {tuple(prediction.shape)} and labels {labels_np.shape} misaligned")
    index = sample_contrast_indices(labels_np[None], cfg, seed)
    emb = prediction.reshape(prediction.shape[0], -1).T  # (N, C)
    samples = []
    for j in range(index.anchors.shape[1]):
        if not index.anchor_mask[0, j]:
            continue
        samples.append(
            ContrastSample(
                anchor=emb[index.anchors[0, j]],
                positives=emb[index.positives[0, j][index.positive_mask[0, j]]],
                negatives=emb[index.negatives[0, j][index.negative_mask[0, j]]],
                temperature=cfg.temperature,
            )
        )
    return samples


def _gather(embeddings: torch.Tensor, index: ContrastIndex):
    b, c = embeddings.shape[:2]
    flat = embeddings.reshape(b, c, -1).transpose(1, 2)  # (B, N, C)
    rows = torch.arange(b).view(b, 1)
    x = flat[rows, index.anchors]  # (B, A, C)
    u = flat[rows.view(b, 1, 1), index.positives]  # (B, A, M, C)
    v = flat[rows.view(b, 1, 1), index.negatives]  # (B, A, K, C)
    return x, u, v


def _masked_scores(x, vectors, mask, tau):
    scores = (vectors * x.unsqueeze(2)).sum(-1) / tau
    return scores.masked_fill(~mask, float("-inf"))


def infonce_terms(embeddings: torch.Tensor, index: ContrastIndex, tau: float):
    """Per-anchor losses ``(B, A)`` and anchor gradients ``(B, A, C)``; padding is zero."""
    x, u, v = _gather(embeddings, index)
    s_u = _masked_scores(x, u, index.positive_mask, tau)
    s_v = _masked_scores(x, v, index.negative_mask, tau)
    s_all = torch.cat([s_u, s_v], dim=-1)
    loss = torch.logsumexp(s_all, -1) - torch.logsumexp(s_u, -1)
    w_all = torch.softmax(s_all, -1)
    w_pos = torch.softmax(s_u, -1)
    vectors = torch.cat([u, v], dim=2)
    grad = ((w_all.unsqueeze(-1) * vectors).sum(2) - (w_pos.unsqueeze(-1) * u).sum(2)) / tau
    valid = index.anchor_mask
    loss = torch.where(valid, loss, torch.zeros_like(loss))
    grad = grad * valid.unsqueeze(-1).to(grad.dtype)
    return loss, grad


def infonce_loss_batch(embeddings: torch.Tensor, index: ContrastIndex, tau: float) -> torch.Tensor:
    """Per-image mean over contributing anchors; 0 for images without anchors."""
    loss, _ = infonce_terms(embeddings, index, tau)
    count = index.num_anchors.to(loss.dtype)
    return loss.sum(1) / count.clamp_min(1)


def infonce_grad_map(embeddings: torch.Tensor, index: ContrastIndex, tau: float) -> torch.Tensor:
    """Anchor gradients scattered into an ``embeddings``-shaped tensor, zero elsewhere."""
    _, grad = infonce_terms(embeddings, index, tau)
    b, c = embeddings.shape[:2]
    target = torch.zeros(b, c, embeddings[0, 0].numel(), dtype=grad.dtype, device=grad.device)
    idx = index.anchors.unsqueeze(1).expand(b, c, -1)
    target = target.scatter_add(2, idx, grad.transpose(1, 2))
    return target.view_as(embeddings)
