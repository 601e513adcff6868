import copy

import numpy as np
import pytest
import torch

from byols.augment import AugmentationConfig
from byols.config import STANDARD_RATIOS
from byols.encoders import EncoderConfig
from byols.frontend import LogMelSpectrogram, NormalizationStats
from byols.trainer import (
    HeadConfig,
    HybridLossWeights,
    TrainConfig,
    TrainingDivergence,
    TrainingError,
    compute_losses,
    ema_update_tensors,
    epoch_means,
    fit,
    hybrid_loss,
    init_state,
    ss_loss,
    sup_loss,
    train_step,
)

D_FEAT = 24
STATS = NormalizationStats(0.0, 1.0)


def _corpus(n=6, frames=120, seed=0):
    rng = np.random.default_rng(seed)
    return [LogMelSpectrogram(rng.normal(size=(64, frames))) for _ in range(n)]


def _state(hybrid=False, out=None, seed=0, tau=0.99, alpha=1.0, beta=1.0, use_predictor=True):
    out = out or (D_FEAT if hybrid else 32)
    heads = HeadConfig(64, out, 64, use_predictor)
    cfg = TrainConfig(batch_size=3, epochs=1, hybrid=hybrid, weights=HybridLossWeights(alpha, beta), ema_decay=tau)
    aug = AugmentationConfig(segment_frames=48, memory_capacity=16, seed=seed)
    enc = EncoderConfig("DefaultCnn", 0.0625, seed=seed)
    return init_state(enc, heads, cfg, aug, STATS, seed=seed), cfg


# --- losses ---------------------------------------------------------------


def test_ss_loss_examples():
    x = torch.randn(4, 8, dtype=torch.float64)
    assert ss_loss(x, x).item() == 0.0
    e = torch.zeros(1, 10, dtype=torch.float64)
    e[0, 3] = 1.0
    assert ss_loss(torch.zeros_like(e), e).item() == pytest.approx(1 / 10, abs=1e-15)
    a = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    b = torch.tensor([[0.0, 2.5, 0.0]], dtype=torch.float64)
    assert ss_loss(a, b, normalized=True).item() == pytest.approx(2.0, abs=1e-12)


def test_normalized_ss_loss_matches_cosine_form(rng):
    p = rng.normal(size=(5, 7))
    t = rng.normal(size=(5, 7))
    cos = (p * t).sum(1) / np.linalg.norm(p, axis=1) / np.linalg.norm(t, axis=1)
    got = ss_loss(torch.tensor(p), torch.tensor(t), normalized=True).item()
    assert got == pytest.approx(np.mean(2 - 2 * cos), abs=1e-12)


def test_sup_loss_loop_oracle(rng):
    p = rng.normal(size=(3, 11))
    f = rng.normal(size=(3, 11))
    acc = 0.0
    for i in range(3):
        for j in range(11):
            acc += (p[i, j] - f[i, j]) ** 2
    assert sup_loss(torch.tensor(p), torch.tensor(f)).item() == pytest.approx(acc / 33, abs=1e-12)


def test_sup_loss_zero_prediction_on_standardized_features(rng):
    f = rng.normal(size=(20000, 8))
    f = (f - f.mean(0)) / f.std(0)
    assert sup_loss(torch.zeros(f.shape, dtype=torch.float64), torch.tensor(f)).item() == pytest.approx(1.0, abs=1e-9)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        ss_loss(torch.zeros(2, 3), torch.zeros(2, 4))
    with pytest.raises(ValueError):
        sup_loss(torch.zeros(2, 3), torch.zeros(2, 4))


@pytest.mark.parametrize("alpha,beta", STANDARD_RATIOS)
def test_hybrid_loss_ratios(alpha, beta):
    w = HybridLossWeights(alpha, beta)
    assert hybrid_loss(0.5, 0.25, w) == alpha * 0.5 + beta * 0.25


def test_hybrid_loss_example_and_weights_validation():
    assert hybrid_loss(0.5, 0.25, HybridLossWeights(1, 1)) == 0.75
    for bad in [(-1, 1), (1, -0.5), (0, 0)]:
        with pytest.raises(ValueError):
            HybridLossWeights(*bad)


def test_hybrid_gradient_scales_with_weights():
    x = torch.tensor([0.3, -1.2], requires_grad=True)

    def grad(w):
        x.grad = None
        hybrid_loss((x**2).sum(), (x**3).sum(), w).backward()
        return x.grad.clone()

    g_sup = grad(HybridLossWeights(1, 0))
    g_ss = grad(HybridLossWeights(0, 1))
    torch.testing.assert_close(grad(HybridLossWeights(2, 3)), 2 * g_sup + 3 * g_ss)


# --- EMA ------------------------------------------------------------------


def test_ema_tau_extremes():
    t = [torch.randn(5, dtype=torch.float64)]
    o = [torch.randn(5, dtype=torch.float64)]
    before = t[0].clone()
    ema_update_tensors(t, o, 1.0)
    assert torch.equal(t[0], before)
    ema_update_tensors(t, o, 0.0)
    assert torch.equal(t[0], o[0])


def test_ema_geometric_convergence():
    t = [torch.zeros(4, dtype=torch.float64)]
    o = [torch.ones(4, dtype=torch.float64)]
    for k in range(1, 301):
        ema_update_tensors(t, o, 0.99)
        np.testing.assert_allclose(t[0].numpy(), 1 - 0.99**k, rtol=0, atol=1e-12)


def test_ema_copies_integer_buffers_and_checks_shapes():
    t = [torch.tensor(3)]
    ema_update_tensors(t, [torch.tensor(7)], 0.99)
    assert t[0].item() == 7
    with pytest.raises(ValueError):
        ema_update_tensors([torch.zeros(2)], [torch.zeros(3)], 0.5)


# --- network and training step ---------------------------------------------


def test_head_dimensions():
    s, _ = _state(hybrid=True)
    v = torch.randn(2, 64, 48)
    s.network.train()
    assert s.network.forward_online(v).shape == (2, D_FEAT)
    assert s.network.forward_target(v).shape == (2, D_FEAT)
    p, _ = _state(hybrid=False)
    assert p.network.forward_online(v).shape == (2, 32)
    assert HeadConfig().projector_out == 256


def test_target_shapes_match_online():
    s, _ = _state()
    for t, o in s.network.target_pairs():
        assert t.shape == o.shape


def test_no_gradient_reaches_target():
    s, cfg = _state()
    net = s.network
    net.train()
    v = torch.randn(3, 64, 48)
    total, *_ = compute_losses(net, v, v + 0.1, None, cfg)
    total.backward()
    assert all(p.grad is None for p in net.target_parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in net.online_parameters())


def test_target_follows_ema_of_online():
    s, cfg = _state(tau=0.9)
    saved = [t.detach().clone() for t, _ in s.network.target_pairs()]
    train_step(s, _corpus(3), None, cfg)
    for (t, o), prev in zip(s.network.target_pairs(), saved):
        if t.is_floating_point():
            torch.testing.assert_close(t, 0.9 * prev + 0.1 * o, rtol=0, atol=1e-6)
        else:
            assert torch.equal(t, o)


def test_frozen_target_with_tau_one():
    s, cfg = _state(tau=1.0)
    v = torch.randn(2, 64, 48)
    s.network.eval()
    before = s.network.forward_target(v)
    for _ in range(3):
        train_step(s, _corpus(3), None, cfg)
    s.network.eval()
    assert torch.equal(s.network.forward_target(v), before)


def test_loss_breakdown_identity():
    s, cfg = _state(hybrid=True, alpha=2.0, beta=3.0)
    feats = np.random.default_rng(0).normal(size=(3, D_FEAT))
    _, lb = train_step(s, _corpus(3), feats, cfg)
    assert lb.l_ss >= 0 and lb.l_sup >= 0
    assert abs(lb.l_hybrid - (2.0 * lb.l_sup + 3.0 * lb.l_ss)) <= 1e-5 * max(1.0, abs(lb.l_hybrid))


def test_alpha_zero_equals_plain_mode():
    corpus = _corpus(6)
    feats = np.random.default_rng(1).normal(size=(6, D_FEAT))
    hyb, hcfg = _state(hybrid=True, alpha=0.0, beta=1.0)
    plain, pcfg = _state(hybrid=False, out=D_FEAT)
    h1 = fit(hyb, corpus, feats, hcfg, epochs=2)
    h2 = fit(plain, corpus, None, pcfg, epochs=2)
    assert [h.l_ss for h in h1] == [h.l_ss for h in h2]
    for a, b in zip(hyb.network.parameters(), plain.network.parameters()):
        assert torch.equal(a, b)


def test_seeded_determinism():
    runs = []
    for _ in range(2):
        s, cfg = _state(seed=5)
        runs.append([(h.l_ss, h.l_hybrid) for h in fit(s, _corpus(6), None, cfg, epochs=2)])
    assert runs[0] == runs[1]


def test_step_errors():
    s, cfg = _state(hybrid=True)
    with pytest.raises(TrainingError):
        train_step(s, [], np.zeros((0, D_FEAT)), cfg)
    with pytest.raises(TrainingError):
        train_step(s, _corpus(3), np.zeros((2, D_FEAT)), cfg)
    p, pcfg = _state()
    bad = _corpus(3)
    bad[1] = bad[1].with_values(np.full((64, 120), np.nan))
    with pytest.raises(TrainingError, match="non-finite"):
        train_step(p, bad, None, pcfg)


def test_non_finite_loss_is_divergence(monkeypatch):
    import byols.trainer as tr

    real = tr.compute_losses

    def blown_up(*args):
        total, l_ss, l_sup, z = real(*args)
        return total * float("inf"), l_ss, l_sup, z

    monkeypatch.setattr(tr, "compute_losses", blown_up)
    s, cfg = _state()
    with pytest.raises(TrainingDivergence, match="divergence"):
        train_step(s, _corpus(3), None, cfg)


def test_step_does_not_mutate_inputs():
    s, cfg = _state()
    corpus = _corpus(3)
    copies = copy.deepcopy([c.values for c in corpus])
    train_step(s, corpus, None, cfg)
    for a, b in zip(corpus, copies):
        assert np.array_equal(a.values, b)


def test_fit_counters_and_epoch_means():
    s, cfg = _state()
    hist = fit(s, _corpus(6), None, cfg, epochs=2)
    assert s.epoch == 2 and s.step == len(hist) == 4
    means = epoch_means(hist, 2)
    assert means == pytest.approx([np.mean([h.l_hybrid for h in hist[:2]]), np.mean([h.l_hybrid for h in hist[2:]])])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.5)
    d = TrainConfig().to_dict()
    assert d["batch_size"] == 256 and d["learning_rate"] == 3e-4 and d["epochs"] == 100
    assert TrainConfig(**d) == TrainConfig()
