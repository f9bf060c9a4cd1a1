import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from conftest import unit_rows
from stainmix.networks import DiscriminatorNet, NetworkConfig, ShapeError
from stainmix.objectives import (
    AdaptiveWeights,
    ContrastiveConfig,
    LossBreakdown,
    NonFiniteLoss,
    Variant,
    adaptive_weights,
    adversarial_losses,
    contrastive_loss,
    gaussian_pyramid,
    gp_loss,
    lsgan_d_loss,
    lsgan_g_loss,
    matching_probability,
    mix_domain_loss,
    patchnce_loss,
    total_objective,
)

E = math.e
I2 = torch.eye(2, dtype=torch.float64)


def t(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


# -- matching probability / PatchNCE -------------------------------------------


def test_probability_single_anchor_is_one():
    z = t(unit_rows(np.random.default_rng(0), 1, 5))
    assert matching_probability(z, z, 0, 0.07).item() == 1.0


def test_probability_two_anchors_hand_value():
    # own dot 1, cross dot 0, tau 1 -> e / (e + 1)
    p = matching_probability(I2, I2, 0, 1.0).item()
    assert p == pytest.approx(E / (E + 1), abs=1e-12)
    assert p == pytest.approx(0.73106, abs=1e-5)


def test_probability_in_unit_interval(rng):
    a, p = t(unit_rows(rng, 6, 4)), t(unit_rows(rng, 6, 4))
    for i in range(6):
        v = matching_probability(a, p, i, 0.1).item()
        assert 0.0 < v <= 1.0


def test_patchnce_single_anchor_zero():
    z = t(unit_rows(np.random.default_rng(1), 1, 3))
    assert patchnce_loss(z, z, 0.07).item() == 0.0


def test_patchnce_hand_value():
    per_anchor = -math.log(E / (E + 1))
    assert per_anchor == pytest.approx(0.31326, abs=1e-5)
    assert patchnce_loss(I2, I2, 1.0).item() == pytest.approx(2 * per_anchor, abs=1e-12)
    assert 2 * per_anchor == pytest.approx(0.62652, abs=1e-5)


# -- mix-domain --------------------------------------------------------------


def test_mix_single_anchor_zero():
    z = t(unit_rows(np.random.default_rng(2), 1, 3))
    assert mix_domain_loss(z, z, 0.07).item() == 0.0


def test_mix_hand_value():
    per_anchor = math.log(E + 2) - 1
    assert per_anchor == pytest.approx(0.55144, abs=1e-5)
    assert mix_domain_loss(I2, I2, 1.0).item() == pytest.approx(2 * per_anchor, abs=1e-12)
    assert 2 * per_anchor == pytest.approx(1.10288, abs=1e-5)
    assert per_anchor > -math.log(E / (E + 1))


def test_mix_uses_other_anchors_not_other_positives(rng):
    # changing positive j != i's relations among positives must not matter
    # beyond their dot with anchor i; intra terms use anchors only
    a = t(unit_rows(rng, 4, 6))
    p = t(unit_rows(rng, 4, 6))
    expected = oracles.mix_domain(a.tolist(), p.tolist(), 0.5)
    assert mix_domain_loss(a, p, 0.5).item() == pytest.approx(expected, abs=1e-10)


def test_weighted_sums_match_oracle(rng):
    a, p = t(unit_rows(rng, 5, 7)), t(unit_rows(rng, 5, 7))
    w = rng.random(5)
    assert mix_domain_loss(a, p, 0.3, w).item() == pytest.approx(
        oracles.mix_domain(a.tolist(), p.tolist(), 0.3, w.tolist()), abs=1e-10)
    assert patchnce_loss(a, p, 0.3, w).item() == pytest.approx(
        oracles.patchnce(a.tolist(), p.tolist(), 0.3, w.tolist()), abs=1e-10)


def test_weight_length_checked(rng):
    a = t(unit_rows(rng, 3, 4))
    with pytest.raises(ValueError):
        mix_domain_loss(a, a, 0.1, np.ones(4))


def test_contrastive_dispatch(rng):
    a, p = t(unit_rows(rng, 4, 4)), t(unit_rows(rng, 4, 4))
    assert contrastive_loss(a, p, ContrastiveConfig(0.2, Variant.PATCH_NCE)).item() == patchnce_loss(a, p, 0.2).item()
    assert contrastive_loss(a, p, ContrastiveConfig(0.2, Variant.MIX_DOMAIN)).item() == mix_domain_loss(a, p, 0.2).item()
    with pytest.raises(ValueError):
        ContrastiveConfig(tau=0.0)


def test_stable_at_tiny_temperature(rng):
    a, p = t(unit_rows(rng, 6, 5)), t(unit_rows(rng, 6, 5))
    for fn in (patchnce_loss, mix_domain_loss):
        v = fn(a, p, 1e-4)
        assert torch.isfinite(v)


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 10), d=st.integers(2, 8), seed=st.integers(0, 2**32 - 1),
       tau=st.sampled_from([0.05, 0.07, 0.5, 1.0]))
def test_permutation_equivariance(m, d, seed, tau):
    r = np.random.default_rng(seed)
    a, p = t(unit_rows(r, m, d)), t(unit_rows(r, m, d))
    perm = torch.as_tensor(r.permutation(m))
    for fn in (patchnce_loss, mix_domain_loss):
        assert fn(a[perm], p[perm], tau).item() == pytest.approx(fn(a, p, tau).item(), rel=1e-12, abs=1e-12)


def test_temperature_to_zero_drives_losses_down(rng):
    # positives are strictly the most similar partner for every anchor
    a = t(unit_rows(rng, 6, 8))
    p = t(unit_rows(rng, 6, 8)) * 0.15 + a
    p = p / p.norm(dim=1, keepdim=True)
    sims_inter, sims_intra = a @ p.t(), a @ a.t() - 2 * torch.eye(6, dtype=torch.float64)
    own = sims_inter.diagonal()
    assert bool((own[:, None] >= sims_inter).all()) and bool((own[:, None] > sims_intra).all())
    for fn in (patchnce_loss, mix_domain_loss):
        vals = [fn(a, p, tau).item() for tau in (1.0, 0.5, 0.1, 0.01)]
        assert all(x > y for x, y in zip(vals, vals[1:]))
        assert vals[-1] < 1e-3


# -- adaptive weights -------------------------------------------------------


def test_weights_start_at_one(rng):
    a, p = t(unit_rows(rng, 5, 4)), t(unit_rows(rng, 5, 4))
    assert torch.equal(adaptive_weights(a, p, 0.0).omega, torch.ones(5, dtype=torch.float64))


def test_weights_full_progress_are_normalized_ranks():
    a = t(np.eye(3))
    p = t([[0.2, 0.0, 0.98], [1.0, 0.0, 0.0], [0.0, 0.6, 0.8]])
    p = p / p.norm(dim=1, keepdim=True)
    # similarities 0.2, 0.0, 0.8 -> ranks 0.5, 0, 1
    w = adaptive_weights(a, p, 1.0)
    assert w.omega.tolist() == pytest.approx([0.5, 0.0, 1.0])


def test_weights_ties_equal():
    a = t(np.eye(4))
    w = adaptive_weights(a, a, 0.7).omega
    assert torch.allclose(w, w[0].expand(4))


def test_weights_match_oracle(rng):
    a, p = t(unit_rows(rng, 7, 5)), t(unit_rows(rng, 7, 5))
    for prog in (0.0, 0.3, 1.0):
        got = adaptive_weights(a, p, prog).omega.tolist()
        assert got == pytest.approx(oracles.rank_weights(a.tolist(), p.tolist(), prog), abs=1e-12)


def test_weights_type_invariants():
    with pytest.raises(ValueError):
        AdaptiveWeights(torch.tensor([1.2]), 0.5)
    with pytest.raises(ValueError):
        AdaptiveWeights(torch.tensor([0.2]), 1.5)


# -- pyramid / GP loss ------------------------------------------------------


def test_pyramid_single_level_is_input():
    x = torch.rand(1, 3, 16, 16)
    (lvl,) = gaussian_pyramid(x, 1)
    assert torch.equal(lvl, x)


def test_pyramid_preserves_constants():
    x = torch.full((1, 3, 32, 32), 0.3, dtype=torch.float64)
    for lvl in gaussian_pyramid(x, 4):
        assert torch.allclose(lvl, torch.full_like(lvl, 0.3), atol=1e-15)


def test_pyramid_shapes():
    dims = [lvl.shape[-1] for lvl in gaussian_pyramid(torch.rand(1, 3, 64, 64), 4)]
    assert dims == [64, 32, 16, 8]


def test_pyramid_shape_error():
    with pytest.raises(ShapeError):
        gaussian_pyramid(torch.rand(1, 3, 20, 20), 4)


def test_pyramid_blur_matches_direct_convolution():
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    k = np.outer([1, 4, 6, 4, 1], [1, 4, 6, 4, 1]) / 256.0
    padded = np.pad(x[0, 0].numpy(), 2, mode="edge")
    expected = np.array([[np.sum(padded[i:i + 5, j:j + 5] * k) for j in range(8)] for i in range(8)])[::2, ::2]
    assert np.allclose(gaussian_pyramid(x, 2)[1][0, 0].numpy(), expected, atol=1e-14)


def test_gp_identity_zero():
    x = torch.rand(1, 3, 32, 32)
    assert gp_loss(x, x).item() == 0.0


def test_gp_constant_images():
    a = torch.full((1, 3, 32, 32), 0.2, dtype=torch.float64)
    b = torch.full((1, 3, 32, 32), -0.5, dtype=torch.float64)
    assert gp_loss(a, b).item() == pytest.approx(0.7 * 15, abs=1e-12)


def test_gp_symmetric():
    a, b = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    assert gp_loss(a, b).item() == gp_loss(b, a).item()


def test_gp_shape_mismatch():
    with pytest.raises(ShapeError):
        gp_loss(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 8))


# -- adversarial --------------------------------------------------------------


def test_lsgan_fixed_points():
    ones, zeros = torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4)
    assert lsgan_d_loss(ones, zeros).item() == 0.0
    assert lsgan_g_loss(ones).item() == 0.0
    half = torch.full((1, 1, 4, 4), 0.5)
    assert lsgan_d_loss(half, half).item() == pytest.approx(0.25)
    assert lsgan_g_loss(half).item() == pytest.approx(0.25)


def test_adversarial_constant_discriminator():
    d = DiscriminatorNet(NetworkConfig(disc_width=4))
    with torch.no_grad():
        for prm in d.parameters():
            prm.zero_()
        d.model[-1].bias.fill_(0.5)
    real, fake = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    adv_g, adv_d = adversarial_losses(d, real, fake)
    assert adv_g.item() == pytest.approx(0.25) and adv_d.item() == pytest.approx(0.25)


def test_adversarial_gradient_routing():
    d = DiscriminatorNet(NetworkConfig(disc_width=4))
    real = torch.rand(1, 3, 32, 32)
    fake = torch.rand(1, 3, 32, 32, requires_grad=True)
    adv_g, adv_d = adversarial_losses(d, real, fake)
    adv_g.backward()
    assert fake.grad is not None
    assert all(p.grad is None for p in d.parameters())
    fake.grad = None
    adv_d.backward()
    assert fake.grad is None
    assert all(p.grad is not None for p in d.parameters())
    assert all(p.requires_grad for p in d.parameters())


# -- total --------------------------------------------------------------------


def test_total_objective_arithmetic():
    assert total_objective(0.5, 1.0, 1.2, 0.05, 10) == pytest.approx(3.2, abs=1e-12)
    assert total_objective(0, 0, 0, 0, 10) == 0


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_total_objective_non_finite(bad):
    with pytest.raises(NonFiniteLoss, match="gp"):
        total_objective(0.5, 1.0, 1.2, bad, 10)


def test_total_objective_tensor_keeps_graph():
    x = torch.tensor(2.0, requires_grad=True)
    out = total_objective(x, x * 2, x * 3, x * 4, 10.0)
    out.backward()
    assert x.grad.item() == pytest.approx(1 + 2 + 3 + 40)


def test_breakdown_consistency():
    bd = LossBreakdown(0.5, 0.3, 1.0, 1.2, 0.05, 3.2)
    assert bd.is_consistent(10.0)
    assert not LossBreakdown(0.5, 0.3, 1.0, 1.2, 0.05, 3.3).is_consistent(10.0)
