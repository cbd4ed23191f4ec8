import numpy as np
import pytest
import torch

from acn.backbone import BackboneConfig, build_backbone
from acn.mmi import build_heads, level_weights, mi_loss, neg_log_q, variational_mean, VariationalHead

from oracles import autograd_gradient, central_difference

RTOL, ATOL = 1e-4, 1e-6


def test_level_weights():
    g = level_weights(4)
    assert g.tolist() == pytest.approx([0.1, 0.2, 0.3, 0.4], abs=1e-15)
    assert float(g.sum()) == pytest.approx(1.0, abs=1e-15)
    assert all(x < y for x, y in zip(g, g[1:]))


def test_neg_log_q_examples():
    m = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert float(neg_log_q(m, m.clone(), torch.ones(3, dtype=torch.float64))) == 0.0
    one = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    assert float(neg_log_q(one, torch.zeros_like(one), torch.ones(1, dtype=torch.float64))) == pytest.approx(0.5, abs=1e-15)


def test_neg_log_q_mu_gradient_analytic():
    gen = torch.Generator().manual_seed(0)
    m = torch.randn(1, 3, 2, 2, generator=gen, dtype=torch.float64)
    mu = torch.randn(1, 3, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
    sigma = torch.tensor([0.5, 1.0, 2.0], dtype=torch.float64)
    (g,) = torch.autograd.grad(neg_log_q(m, mu, sigma), mu)
    expected = (mu.detach() - m) / sigma.view(1, 3, 1, 1) ** 2
    torch.testing.assert_close(g, expected, rtol=1e-12, atol=1e-12)


def test_neg_log_q_half_squared_error():
    gen = torch.Generator().manual_seed(1)
    m = torch.randn(3, 4, 5, 5, generator=gen, dtype=torch.float64)
    mu = torch.randn(3, 4, 5, 5, generator=gen, dtype=torch.float64)
    direct = 0.5 * ((m - mu) ** 2).sum() / 3
    assert abs(float(neg_log_q(m, mu, torch.ones(4, dtype=torch.float64))) - float(direct)) < 1e-9


def test_neg_log_q_rejects_bad_sigma_and_shapes():
    m = torch.zeros(1, 2, 3, 3)
    with pytest.raises(ValueError):
        neg_log_q(m, m, torch.tensor([1.0, 0.0]))
    with pytest.raises(ValueError):
        neg_log_q(m, torch.zeros(1, 2, 3, 4), torch.ones(2))


def test_sigma_stationarity():
    # minimizing over sigma alone with fixed residuals gives sigma_c^2 = mean residual^2
    gen = torch.Generator().manual_seed(2)
    resid = torch.randn(2, 3, 6, 6, generator=gen, dtype=torch.float64) * torch.tensor([0.3, 1.0, 2.5]).view(1, 3, 1, 1)
    head = VariationalHead(3, 3).double()
    opt = torch.optim.Adam([head.raw_sigma], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        loss = neg_log_q(resid, torch.zeros_like(resid), head.sigma)
        loss.backward()
        opt.step()
    expected = (resid**2).mean(dim=(0, 2, 3))
    np.testing.assert_allclose((head.sigma.detach() ** 2).numpy(), expected.numpy(), atol=1e-3)


def test_heads_match_backbone_levels():
    cfg = BackboneConfig(in_channels=1)
    out = build_backbone(cfg, seed=0)(torch.randn(1, 1, 64, 64))
    heads = build_heads(cfg.widths, seed=0)
    for feat, head in zip(out.encoder_features, heads):
        assert variational_mean(head, feat).shape == feat.shape


def test_zero_init_head_gives_zero_mean_and_unit_sigma():
    head = VariationalHead(5, 5, zero_init=True)
    assert torch.all(head(torch.randn(2, 5, 4, 4)) == 0)
    torch.testing.assert_close(head.sigma, torch.ones(5), rtol=0, atol=1e-6)


def test_heads_deterministic():
    a, b = build_heads([4, 8], seed=3), build_heads([4, 8], seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_head_rejects_wrong_channels():
    with pytest.raises(ValueError):
        VariationalHead(4, 4)(torch.zeros(1, 3, 2, 2))


def test_mi_loss_zero_when_matched():
    heads = build_heads([2, 3], zero_init=True)
    pairs = [(torch.zeros(1, 2, 4, 4), torch.randn(1, 2, 4, 4)), (torch.zeros(1, 3, 2, 2), torch.randn(1, 3, 2, 2))]
    assert abs(mi_loss(pairs, heads).item()) < 1e-5


class ConstHead(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value
        self.sigma = torch.ones(1, dtype=torch.float64)

    def forward(self, u):
        return u + self.value


def test_mi_loss_weighted_sum_example():
    # level losses 0.3 and 0.6 from half squared errors on single elements
    m = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
    heads = [ConstHead(0.6**0.5), ConstHead(1.2**0.5)]
    pairs = [(m, m.clone()), (m, m.clone())]
    assert float(mi_loss(pairs, heads, gammas=[1 / 3, 2 / 3])) == pytest.approx(0.5, rel=1e-12)


def test_mi_loss_linear_in_gamma():
    gen = torch.Generator().manual_seed(4)
    heads = build_heads([2, 2], seed=1).double()
    pairs = [(torch.randn(1, 2, 3, 3, generator=gen, dtype=torch.float64),
              torch.randn(1, 2, 3, 3, generator=gen, dtype=torch.float64)) for _ in range(2)]
    base = [0.25, 0.75]
    f0 = mi_loss(pairs, heads, base).item()
    per_level = [neg_log_q(m, h(u), h.sigma).item() for (m, u), h in zip(pairs, heads)]
    for k in range(2):
        bumped = list(base)
        bumped[k] += 1e-3
        slope = (mi_loss(pairs, heads, bumped).item() - f0) / 1e-3
        assert slope == pytest.approx(per_level[k], rel=1e-6)


def test_mi_loss_stop_gradient_on_target():
    gen = torch.Generator().manual_seed(0)
    m = torch.randn(1, 4, 3, 3, generator=gen).requires_grad_(True)
    u = torch.randn(1, 4, 3, 3, generator=gen).requires_grad_(True)
    heads = build_heads([4])
    mi_loss([(m, u)], heads).backward()
    assert m.grad is None
    assert u.grad is not None and float(u.grad.abs().sum()) > 0
    m2 = m.detach().clone().requires_grad_(True)
    mi_loss([(m2, u)], heads, detach_target=False).backward()
    assert m2.grad is not None


def test_mi_loss_length_mismatch():
    with pytest.raises(ValueError):
        mi_loss([(torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2, 2))], build_heads([2, 2]))


def test_affine_task_optimization_oracle():
    gen = torch.Generator().manual_seed(5)
    A = torch.randn(3, 3, generator=gen)
    b = torch.randn(3, generator=gen)
    u = torch.randn(8, 3, 4, 4, generator=gen)
    m = torch.einsum("oc,bchw->bohw", A, u) + b.view(1, 3, 1, 1)
    heads = build_heads([3], seed=0)
    opt = torch.optim.Adam(heads.parameters(), lr=1e-2)
    initial = mi_loss([(m, u)], heads).item()
    for _ in range(500):
        opt.zero_grad()
        loss = mi_loss([(m, u)], heads)
        loss.backward()
        opt.step()
    assert loss.item() < 0.1 * initial


# -- finite differences -------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_grad_neg_log_q(seed):
    gen = torch.Generator().manual_seed(seed)
    m = torch.randn(1, 2, 2, 2, generator=gen, dtype=torch.float64)
    mu = torch.randn(1, 2, 2, 2, generator=gen, dtype=torch.float64)
    sigma = torch.rand(2, generator=gen, dtype=torch.float64) + 0.5
    for f, x in [(lambda z: neg_log_q(m, z, sigma), mu), (lambda z: neg_log_q(z, mu, sigma), m),
                 (lambda z: neg_log_q(m, mu, z), sigma)]:
        np.testing.assert_allclose(autograd_gradient(f, x).numpy(), central_difference(f, x).numpy(), rtol=RTOL, atol=ATOL)


@pytest.mark.parametrize("seed", range(20))
def test_grad_mi_loss(seed):
    gen = torch.Generator().manual_seed(50 + seed)
    heads = build_heads([2, 3], seed=seed).double()
    m1, m2 = torch.randn(1, 2, 2, 2, generator=gen, dtype=torch.float64), torch.randn(1, 3, 1, 1, generator=gen, dtype=torch.float64)
    u1, u2 = torch.randn(1, 2, 2, 2, generator=gen, dtype=torch.float64), torch.randn(1, 3, 1, 1, generator=gen, dtype=torch.float64)
    f = lambda z: mi_loss([(m1, z), (m2, u2)], heads)
    np.testing.assert_allclose(autograd_gradient(f, u1).numpy(), central_difference(f, u1).numpy(), rtol=RTOL, atol=ATOL)
    raw = heads[1].raw_sigma

    def f_sigma(z):
        with torch.no_grad():
            saved = raw.detach().clone()
        raw.data = z
        try:
            return mi_loss([(m1, u1), (m2, u2)], heads)
        finally:
            raw.data = saved

    x = raw.detach().clone()
    heads.zero_grad()
    mi_loss([(m1, u1), (m2, u2)], heads).backward()
    np.testing.assert_allclose(raw.grad.numpy(), central_difference(f_sigma, x).numpy(), rtol=RTOL, atol=ATOL)
