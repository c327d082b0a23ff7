import numpy as np
import pytest
import torch
import torch.nn.functional as F

from weatherseg.checkpoint import load_checkpoint, save_checkpoint
from weatherseg.errors import DivergenceError
from weatherseg.net import NetworkSpec, collate, predict
from weatherseg.regularizers import (
    ContrastConfig,
    ContrastIndex,
    bd_loss_batch,
    infonce_loss_batch,
    sample_contrast_indices,
)
from weatherseg.sequence import build_windows
from weatherseg.unfolding import (
    LossConfig,
    UnfoldParams,
    aggregate,
    compute_loss,
    make_train_state,
    segmentation_logits,
    train_step,
    unroll,
    vanilla_regularized_loss,
)
from weatherseg.weather import SceneConfig, generate_sequence

SPEC = NetworkSpec(policy="FI", num_classes=8, backbone_width=8, backbone_depth=2)


@pytest.fixture(scope="module")
def batch():
    seq = generate_sequence(SceneConfig(height=16, width=16, seq_length=8, seed=3, weather={"fog": 0.5}))
    return collate(build_windows(seq, 3)[:4])


def random_problem(b=2, c=4, h=4, w=4, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(b, c, h, w, generator=g, dtype=dtype)
    labels = torch.randint(0, c, (b, h, w), generator=g)
    return x0, labels


def params(K, alpha, gamma, eta, dtype=torch.float64):
    p = UnfoldParams(K).to(dtype)
    with torch.no_grad():
        p.alpha.fill_(alpha)
        p.gamma.fill_(gamma)
        p.eta.fill_(eta)
    return p


# --- identity family -------------------------------------------------------


@pytest.mark.parametrize("alpha, gamma, eta", [(0.3, 0.7, 0.0), (0.0, 0.0, 0.5)])
def test_zero_step_or_zero_weights_is_identity(alpha, gamma, eta):
    x0, labels = random_problem()
    out = unroll(x0, labels, params(3, alpha, gamma, eta), LossConfig())
    assert torch.equal(out, x0)


def test_zero_layers_is_identity():
    x0, labels = random_problem()
    assert unroll(x0, labels, UnfoldParams(0), LossConfig(K=0)) is x0


def test_aggregate_examples():
    a = torch.tensor([[[[1.0, -2.0]]]])
    b = torch.tensor([[[[0.5, 2.0]]]])
    assert aggregate(a, b).tolist() == [[[[1.5, 0.0]]]]


# --- one layer against a hand-stepped numpy oracle -------------------------


def _oracle_one_layer(x0, labels, alpha, gamma, eta, tau, contrast):
    """Independent numpy transcription of one descent layer on a single image."""
    c, h, w = x0.shape
    n = h * w
    e = np.exp(x0 - x0.max(axis=0))
    p_x = np.maximum(e / e.sum(axis=0) / n, 1e-8)
    p_y = np.zeros_like(p_x)
    for i in range(h):
        for j in range(w):
            p_y[labels[i, j], i, j] = 1.0 / n
    bc = np.sum(np.sqrt(p_x) * np.sqrt(p_y))
    g_bd = -0.5 / bc * np.sqrt(p_y) / np.sqrt(p_x)

    emb = x0.reshape(c, n).T
    g_con = np.zeros((n, c))
    for anchor, pos, neg in contrast:
        x = emb[anchor]
        vecs = [emb[k] for k in pos + neg]
        s_all = np.array([x @ v / tau for v in vecs])
        s_pos = s_all[: len(pos)]
        w_all = np.exp(s_all - s_all.max())
        w_all /= w_all.sum()
        w_pos = np.exp(s_pos - s_pos.max())
        w_pos /= w_pos.sum()
        g_con[anchor] += sum(wk * v for wk, v in zip(w_all, vecs)) / tau
        g_con[anchor] -= sum(wk * emb[k] for wk, k in zip(w_pos, pos)) / tau
    g_con = g_con.T.reshape(c, h, w)
    return x0 - eta * (alpha * g_bd + gamma * g_con)


def _index(anchor, pos, neg):
    t = torch.tensor
    return ContrastIndex(
        t([[anchor]]), t([[True]]),
        t([[pos]]), t([[[True] * len(pos)]]),
        t([[neg]]), t([[[True] * len(neg)]]),
    )


def test_one_layer_matches_oracle_2x2():
    x0 = np.array([[[0.3, -1.2], [0.8, 0.1]], [[-0.4, 0.9], [0.2, -0.7]]])
    labels = np.array([[0, 0], [1, 1]])
    alpha, gamma, eta, tau = 0.4, 0.25, 0.05, 0.5
    expected = _oracle_one_layer(x0, labels, alpha, gamma, eta, tau, [(0, [1], [2, 3])])
    cfg = LossConfig(contrast=ContrastConfig(temperature=tau))
    got = unroll(torch.tensor(x0)[None], torch.tensor(labels)[None], params(1, alpha, gamma, eta), cfg,
                 index=_index(0, [1], [2, 3]))
    np.testing.assert_allclose(got[0].detach().numpy(), expected, rtol=0, atol=1e-9)


def test_one_layer_matches_oracle_1x2_without_anchors():
    # Each class has one pixel, so no anchor is eligible and only the BD term acts.
    x0 = np.array([[[1.5, -0.5]], [[0.25, 0.75]], [[-1.0, 0.0]]])
    labels = np.array([[2, 0]])
    alpha, gamma, eta = 0.9, 0.3, 0.2
    expected = _oracle_one_layer(x0, labels, alpha, gamma, eta, 0.1, [])
    got = unroll(torch.tensor(x0)[None], torch.tensor(labels)[None], params(1, alpha, gamma, eta), LossConfig())
    np.testing.assert_allclose(got[0].detach().numpy(), expected, rtol=0, atol=1e-9)


# --- fixed-weight regularized loss -----------------------------------------


def test_vanilla_with_zero_weights_is_cross_entropy():
    x0, labels = random_problem()
    assert torch.equal(vanilla_regularized_loss(x0, labels, 0.0, 0.0), F.cross_entropy(x0, labels))


def test_perfect_prediction_has_zero_bd():
    _, labels = random_problem()
    x0 = 50.0 * F.one_hot(labels, 4).permute(0, 3, 1, 2).double()
    assert bd_loss_batch(x0, labels).abs().max() < 1e-9


def test_vanilla_is_sum_of_its_terms():
    x0, labels = random_problem(seed=5)
    cfg = LossConfig(mode="vrs")
    index = sample_contrast_indices(labels, cfg.contrast, 11)
    expected = (
        F.cross_entropy(x0, labels)
        + 0.3 * bd_loss_batch(x0, labels).mean()
        + 0.2 * infonce_loss_batch(x0, index, cfg.contrast.temperature).mean()
    )
    got = vanilla_regularized_loss(x0, labels, 0.3, 0.2, cfg, seed=11)
    torch.testing.assert_close(got, expected, rtol=0, atol=1e-12)


# --- gradients -------------------------------------------------------------


def test_unrolled_gradients_reach_everything(batch):
    state = make_train_state(SPEC, LossConfig(K=5), seed=0)
    state.optimizer.zero_grad()
    compute_loss(state, batch, LossConfig(K=5)).backward()
    for name in ("alpha", "gamma", "eta"):
        grad = getattr(state.unfold, name).grad
        assert grad is not None and torch.isfinite(grad).all() and grad.abs().sum() > 0, name
    for name, p in state.model.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name


def test_zero_layers_matches_plain_cross_entropy(batch):
    cfg = LossConfig(mode="urs", K=0)
    state = make_train_state(SPEC, cfg, seed=1)
    expected = F.cross_entropy(predict(state.model, batch), batch.labels)
    torch.testing.assert_close(compute_loss(state, batch, cfg), expected, rtol=0, atol=1e-6)
    ce_state = make_train_state(SPEC, LossConfig(mode="ce"), seed=1)
    torch.testing.assert_close(compute_loss(ce_state, batch, LossConfig(mode="ce")), expected, rtol=0, atol=1e-6)


def test_step_size_gradient_matches_finite_difference():
    x0, labels = random_problem(b=1, c=2, h=2, w=2, seed=9)
    labels = torch.tensor([[[0, 0], [1, 1]]])
    cfg = LossConfig(K=1, contrast=ContrastConfig(temperature=0.5))
    index = _index(0, [1], [2, 3])

    def loss_at(eta):
        p = params(1, 0.6, 0.4, eta)
        return F.cross_entropy(aggregate(x0, unroll(x0, labels, p, cfg, index=index)), labels), p

    loss, p = loss_at(0.1)
    loss.backward()
    h = 1e-6
    fd = (loss_at(0.1 + h)[0].item() - loss_at(0.1 - h)[0].item()) / (2 * h)
    assert abs(p.eta.grad.item() - fd) <= 1e-3 * abs(fd)


# --- training mechanics ----------------------------------------------------


def _run(batch, cfg, steps, seed=0):
    state = make_train_state(SPEC, cfg, seed=seed)
    losses = []
    for _ in range(steps):
        state, loss = train_step(batch, state, cfg)
        losses.append(loss)
    return state, losses


def test_training_is_deterministic(batch):
    cfg = LossConfig(K=2)
    a, la = _run(batch, cfg, 3)
    b, lb = _run(batch, cfg, 3)
    assert la == lb
    for (n, p), (_, q) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(p, q), n
    assert torch.equal(a.unfold.eta, b.unfold.eta)


def test_checkpoint_resume_is_bitwise(batch, tmp_path):
    cfg = LossConfig(K=2)
    state, _ = _run(batch, cfg, 2)
    path = save_checkpoint(tmp_path / "ck.pt", state, cfg, run={"depth": 3})
    resumed, loaded_cfg, _, run = load_checkpoint(path)
    assert loaded_cfg == cfg and run == {"depth": 3}
    assert resumed.step == state.step
    for _ in range(2):
        state, la = train_step(batch, state, cfg)
        resumed, lb = train_step(batch, resumed, loaded_cfg)
        assert la == lb
    for (n, p), (_, q) in zip(state.model.state_dict().items(), resumed.model.state_dict().items()):
        assert torch.equal(p, q), n
    for name in ("alpha", "gamma", "eta"):
        assert torch.equal(getattr(state.unfold, name), getattr(resumed.unfold, name))


def test_divergent_unroll_names_the_layer():
    x0, labels = random_problem(dtype=torch.float32)
    huge = params(2, 1e30, 0.0, 1e30, dtype=torch.float32)
    with pytest.raises(DivergenceError) as info:
        unroll(x0, labels, huge, LossConfig())
    assert info.value.layer == 1


def test_non_finite_loss_carries_snapshot(batch):
    cfg = LossConfig(mode="ce")
    state = make_train_state(SPEC, cfg, seed=0)
    with torch.no_grad():
        state.model.head.classifier.bias.fill_(float("nan"))
    with pytest.raises(DivergenceError) as info:
        train_step(batch, state, cfg)
    assert info.value.snapshot["step"] == 0


def test_inference_without_labels_uses_predictions(batch):
    cfg = LossConfig(K=2)
    state = make_train_state(SPEC, cfg, seed=0)
    with torch.no_grad():
        x0, x = segmentation_logits(state.model, state.unfold, batch, cfg, seed=0)
        pseudo = x0.argmax(1)
        _, x_pseudo = segmentation_logits(state.model, state.unfold, batch, cfg, seed=0, labels=pseudo)
    assert torch.equal(x, x_pseudo)


def _short_run(batch, policy, cfg):
    state = make_train_state(NetworkSpec(policy=policy, num_classes=8), cfg, seed=0)
    losses = []
    for _ in range(50):
        state, loss = train_step(batch, state, cfg)
        losses.append(loss)
    return losses


@pytest.mark.parametrize("policy", ["CE", "FI"])
@pytest.mark.parametrize("K", [2, 5])
def test_short_training_reduces_total_loss(batch, policy, K):
    losses = _short_run(batch, policy, LossConfig(mode="urs", K=K))
    assert losses[-1] <= 0.9 * losses[0]


@pytest.mark.parametrize("policy", ["CE", "FI"])
def test_short_training_reduces_cross_entropy(batch, policy):
    losses = _short_run(batch, policy, LossConfig(mode="ce"))
    assert losses[-1] < losses[0]
