import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from gradedit.attacks import AttackBudget, iterative_attack
from gradedit.attribution import AttributionConfig
from gradedit.errors import ConfigError, OracleStateError
from gradedit.freq import FreqExploreConfig
from gradedit.oracles import (
    METHODS,
    MOMENTUM_METHODS,
    OracleConfig,
    block_edges,
    diverse_input,
    input_grad,
    l1_normalize,
    make_oracle,
    mean_grad_over,
    structure_transform,
    translate,
)
from helpers import constant_classifier, linear_classifier, sum_classifier

SHAPE = (3, 16, 16)


def oracle(model, method, **kw):
    return make_oracle(OracleConfig(method=method, **kw), model)


def bim_grad(model, x, y):
    return oracle(model, "bim").step(x, x, y).g


def logistic2d(w=(1.5, -2.0), b=0.3):
    """Two-class model whose class-1 logit is w.x + b and class-0 logit is 0."""
    weight = torch.tensor([[0.0, 0.0], list(w)])
    return linear_classifier(weight, torch.tensor([0.0, b]), (1, 1, 2))


# --- factory -----------------------------------------------------------------


def test_factory_validation(surrogate):
    with pytest.raises(ConfigError):
        OracleConfig(method="fgsm")
    with pytest.raises(ConfigError):
        oracle(surrogate, "naa")
    with pytest.raises(ConfigError):
        oracle(surrogate, "danaa", attribution=AttributionConfig(layer_id="nope"))
    for kwargs in ({"mu": 1.5}, {"gra_neighbors": 0}, {"dim_resize_range": (0.5, 1.2)}, {"dim_resize_range": (0.0, 1.0)},
                   {"tim_max_shift": -1}, {"sinim_sigma": -1.0}, {"sia_pool": ("shear",)}, {"sia_copies": 0},
                   {"gra_temperature": 0.0}):
        with pytest.raises(ConfigError):
            OracleConfig(method="bim", **kwargs)


def test_mim_state_starts_at_zero(surrogate):
    o = oracle(surrogate, "mim", mu=1.0)
    assert o.state.g is None and o.state.k == 0


def test_state_counter_increments(surrogate, batch):
    x, y = batch
    o = oracle(surrogate, "sinim", sinim_copies=2)
    for k in range(3):
        assert o.step(x, x, y).state.k == k + 1


# --- BIM / PGD ---------------------------------------------------------------


def test_bim_matches_closed_form_logistic_gradient():
    w, b = np.array([1.5, -2.0]), 0.3
    model = logistic2d(tuple(w), b)
    x = torch.tensor([[[[0.2, 0.7]]], [[[0.9, 0.1]]], [[[0.4, 0.4]]]])
    y = torch.tensor([1, 0, 1])
    g = bim_grad(model, x, y).view(3, 2).double().numpy()
    xs = x.view(3, 2).double().numpy()
    p1 = 1 / (1 + np.exp(-(xs @ w + b)))
    expect = (p1 - y.numpy())[:, None] * w[None, :] / 3
    assert np.abs(g - expect).max() < 1e-5


def test_bim_zero_on_constant_model_and_stateless(surrogate, batch):
    model = constant_classifier(10, SHAPE)
    x, y = batch
    assert torch.count_nonzero(bim_grad(model, x, y)) == 0
    o = oracle(surrogate, "bim")
    assert torch.equal(o.step(x, x, y).g, o.step(x, x, y).g)


# --- degeneracy reductions ---------------------------------------------------

DEGENERATE = {
    "mim": {"mu": 0.0},
    "dim": {"dim_prob": 0.0},
    "tim": {"tim_max_shift": 0},
    "sinim": {"sinim_sigma": 0.0},
    "sia": {"sia_pool": ("identity",)},
    "fsps": {"fsps_warmup": 10**9, "freq": FreqExploreConfig(num_variants=1, sigma=0.0, pixel_noise_scale=0.0)},
    "pgd": {},
}


@pytest.mark.parametrize("method", sorted(DEGENERATE))
def test_degenerate_configs_reduce_to_bim(surrogate, batch, method):
    x, y = batch
    ref = bim_grad(surrogate, x, y)
    g = oracle(surrogate, method, **DEGENERATE[method]).step(x, x, y).g
    if method == "mim":
        # momentum methods normalise each increment; direction and sign are BIM's
        assert torch.allclose(g, l1_normalize(ref), atol=1e-6, rtol=0)
        assert torch.equal(g.sign(), ref.sign())
    else:
        assert (g - ref).abs().max().item() <= 1e-6


def test_dim_with_full_size_resize_is_identity(surrogate, batch):
    x, y = batch
    g = oracle(surrogate, "dim", dim_prob=1.0, dim_resize_range=(1.0, 1.0)).step(x, x, y).g
    assert (g - bim_grad(surrogate, x, y)).abs().max().item() <= 1e-6


def test_gra_single_neighbour_weight_is_one(surrogate, batch):
    x, y = batch
    o = oracle(surrogate, "gra", gra_neighbors=1)
    G = input_grad(surrogate, x, y)
    Gi = input_grad(surrogate, x + 0.01, y)
    assert torch.equal(o.gra_weights(G, [Gi]), torch.ones(1, len(x)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.floats(0.05, 20.0), st.integers(0, 1000))
def test_gra_weights_are_a_distribution(n, tau, seed):
    gen = torch.Generator().manual_seed(seed)
    G = torch.randn(3, 5, generator=gen)
    others = [torch.randn(3, 5, generator=gen) for _ in range(n)]
    o = make_oracle(OracleConfig(method="gra", gra_temperature=tau, gra_neighbors=n), constant_classifier(2, (1, 1, 5)))
    w = o.gra_weights(G, others)
    assert (w >= 0).all()
    assert torch.allclose(w.sum(0), torch.ones(3), atol=1e-6)


def test_gra_reduces_to_mim_when_gradient_direction_is_fixed():
    model = logistic2d()
    x = torch.tensor([[[[0.2, 0.7]]], [[[0.6, 0.5]]]])
    y = torch.tensor([1, 0])
    g_gra = oracle(model, "gra", gra_neighbors=6, gra_radius=0.05).step(x, x, y).g
    g_mim = oracle(model, "mim").step(x, x, y).g
    assert torch.allclose(g_gra, g_mim, atol=1e-6)


# --- momentum recurrences ----------------------------------------------------


@pytest.mark.parametrize("method", MOMENTUM_METHODS)
@pytest.mark.parametrize("mu", [0.0, 0.5, 0.9, 1.0])
def test_momentum_geometric_sum(method, mu):
    model = sum_classifier(2, (1, 2, 2))
    c = torch.tensor([[[[0.5, -1.0], [2.0, 0.0]]]])
    o = oracle(model, method, mu=mu, attribution=AttributionConfig(layer_id="phi"))
    setattr(o, f"_dir_{method}", lambda *args: c)
    unit = c / c.abs().sum()
    for k in range(1, 8):
        g = o.step(c, c, torch.tensor([0])).g
        expect = sum(mu ** i for i in range(k)) * unit
        assert (g - expect).abs().max().item() < 1e-5
    if mu < 1:
        assert g.abs().sum().item() <= 1 / (1 - mu) + 1e-6


def test_non_momentum_methods_apply_momentum_when_configured(surrogate, batch):
    x, y = batch
    o = oracle(surrogate, "bim", mu=0.5)
    g1 = o.step(x, x, y).g
    g2 = o.step(x, x, y).g
    assert torch.allclose(g2, 1.5 * g1, atol=1e-7)


# --- DIM ---------------------------------------------------------------------


def test_diverse_input_adjoint():
    gen = torch.Generator().manual_seed(0)
    for frac, top, left in ((0.85, 1, 2), (0.9, 0, 0), (0.6, 3, 1)):
        u = torch.randn(2, 3, 16, 16, generator=gen, requires_grad=True)
        v = torch.randn(2, 3, 16, 16, generator=gen)
        out = diverse_input(u, frac, top, left)
        (adj_v,) = torch.autograd.grad(out, u, v)
        lhs = (out * v).sum().item()
        rhs = (u * adj_v).sum().item()
        assert abs(lhs - rhs) < 1e-4 * max(1.0, abs(lhs))


# --- TIM ---------------------------------------------------------------------


def test_tim_enumeration_matches_explicit_loop(surrogate, batch):
    x, y = batch
    g = oracle(surrogate, "tim", tim_max_shift=1, tim_enumerate=True).step(x, x, y).g
    total = torch.zeros_like(x)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            xi = x.clone().requires_grad_(True)
            F.cross_entropy(surrogate(translate(xi, dy, dx)), y).backward()
            total += xi.grad
    assert (g - total / 9).abs().max().item() < 1e-6


def test_tim_monte_carlo_converges_to_enumeration(surrogate, batch):
    x, y = batch[0][:2], batch[1][:2]
    exact = oracle(surrogate, "tim", tim_max_shift=1, tim_enumerate=True).step(x, x, y).g
    mc = oracle(surrogate, "tim", tim_max_shift=1, tim_copies=900, seed=3).step(x, x, y).g
    rel = (mc - exact).norm() / exact.norm()
    assert rel.item() < 0.1


def test_translate_roundtrip_on_interior():
    x = torch.rand(1, 1, 8, 8)
    back = translate(translate(x, 2, -1), -2, 1)
    assert torch.equal(back[..., 2:6, 1:7], x[..., 2:6, 1:7])


# --- SINIM -------------------------------------------------------------------


def test_sinim_matches_gaussian_expectation_on_logistic_model():
    w, b, sigma = np.array([1.5, -2.0]), 0.3, 0.2
    model = logistic2d(tuple(w), b)
    x = torch.tensor([[[[0.2, 0.7]]]])
    y = torch.tensor([1])
    copies = 1000
    o = oracle(model, "sinim", sinim_sigma=sigma, sinim_copies=copies, seed=5)
    g = o.step(x, x, y).g.view(2).double().numpy()
    # The gradient depends on x only through z = w.x + b, which is Gaussian under the noise;
    # integrate E[(sigmoid(z) - 1)] w by Gauss-Hermite quadrature.
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    mean_z = float(x.view(2).double().numpy() @ w + b)
    sd_z = sigma * np.linalg.norm(w)
    sig = 1 / (1 + np.exp(-(mean_z + sd_z * nodes)))
    expect = (weights * (sig - 1)).sum() / math.sqrt(2 * math.pi) * w
    # standard error from the same per-copy gradients
    gen = torch.Generator().manual_seed(5)
    per = []
    for _ in range(copies):
        xi = x + sigma * torch.randn(x.shape, generator=gen)
        per.append(input_grad(model, xi, y).view(2).double().numpy())
    per = np.array(per)
    assert np.allclose(per.mean(0), g, atol=1e-6)
    se = per.std(0, ddof=1) / math.sqrt(copies)
    assert (np.abs(g - expect) < 3 * se).all()


# --- FSPS --------------------------------------------------------------------


def test_fsps_batched_mean_matches_loop(surrogate, batch):
    x, y = batch
    cfg = FreqExploreConfig(num_variants=4, sigma=0.7, seed=2)
    o = oracle(surrogate, "fsps", freq=cfg)
    g = o.step(x, x, y).g
    from gradedit.freq import spectrum_variants
    variants = spectrum_variants(x, cfg, generator=torch.Generator().manual_seed(0))
    loop = sum(input_grad(surrogate, v, y) for v in variants) / len(variants)
    assert (g - loop).abs().max().item() < 1e-6
    assert torch.allclose(mean_grad_over(surrogate, variants, y), loop, atol=1e-7)


def test_fsps_stationary_point_lifecycle(surrogate, batch):
    x, y = batch
    o = oracle(surrogate, "fsps", fsps_warmup=0, freq=FreqExploreConfig(num_variants=1))
    assert o.needs_stationary_point
    with pytest.raises(OracleStateError):
        o.step(x, x, y)
    sp = x.clone() * 0.9
    o.set_stationary_point(sp)
    assert not o.needs_stationary_point
    for _ in range(3):
        assert torch.equal(o.fsps_base(x + 0.01), sp)
        o.step(x, x, y)


def test_fsps_switches_base_after_warmup(surrogate, batch):
    x, y = batch
    o = oracle(surrogate, "fsps", fsps_warmup=2, freq=FreqExploreConfig(num_variants=1))
    for _ in range(2):
        assert not o.needs_stationary_point
        assert torch.equal(o.fsps_base(x), x)
        o.step(x, x, y)
    assert o.needs_stationary_point


def test_driver_computes_stationary_point_before_first_step_at_zero_warmup(surrogate, batch):
    x, y = batch
    o = oracle(surrogate, "fsps", fsps_warmup=0, freq=FreqExploreConfig(num_variants=2), sp_max_steps=3)
    iterative_attack(surrogate, x, y, o, AttackBudget(iterations=2))
    assert o.state.sp is not None and o.state.k == 2


# --- SIA ---------------------------------------------------------------------


def test_sia_single_block_hflip_is_gradient_of_flipped_image(surrogate, batch):
    x, y = batch
    g = oracle(surrogate, "sia", sia_blocks=1, sia_pool=("hflip",), sia_copies=1).step(x, x, y).g
    assert torch.equal(g, input_grad(surrogate, x.flip(-1), y))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 6))
def test_block_partition_covers_every_pixel_once(h, w, s):
    count = torch.zeros(h, w, dtype=torch.int64)
    rows, cols = block_edges(h, s), block_edges(w, s)
    for i in range(len(rows) - 1):
        for j in range(len(cols) - 1):
            count[rows[i]:rows[i + 1], cols[j]:cols[j + 1]] += 1
    assert (count == 1).all()
    x = torch.rand(1, 1, h, w)
    assert torch.equal(structure_transform(x, s, ("identity",), torch.Generator()), x)


# --- NAA / DANAA / MIG -------------------------------------------------------


def test_naa_direction_on_hand_model():
    model = sum_classifier(2, (1, 2, 2))
    x = torch.rand(2, 1, 2, 2) * 0.8 + 0.1
    g = oracle(model, "naa", attribution=AttributionConfig(layer_id="phi", steps=5)).step(x, x, torch.tensor([0, 1])).g
    assert torch.allclose(g, torch.full_like(x, -0.25), atol=1e-6)


def test_naa_and_danaa_agree_on_linear_model():
    model = sum_classifier(2, (1, 3, 3))
    x = torch.rand(2, 1, 3, 3) * 0.5 + 0.25
    y = torch.tensor([0, 1])
    attr = AttributionConfig(layer_id="phi", steps=6, path_lr=0.01)
    g_naa = oracle(model, "naa", attribution=attr).step(x, x, y).g
    g_danaa = oracle(model, "danaa", attribution=attr).step(x, x, y).g
    assert (g_naa - g_danaa).abs().max().item() < 1e-4


def test_danaa_zero_rate_keeps_momentum_only(surrogate, batch):
    x, y = batch
    attr = AttributionConfig(layer_id="conv2", steps=2, path_lr=0.0)
    o = oracle(surrogate, "danaa", attribution=attr)
    assert torch.count_nonzero(o.step(x, x, y).g) == 0


def test_mig_direction_is_negated_normalised_ig():
    weight = torch.tensor([[0.5, -1.0, 2.0, 0.0], [1.0, 1.0, -0.5, 0.25]])
    model = linear_classifier(weight, torch.zeros(2), (1, 2, 2))
    x = torch.rand(1, 1, 2, 2)
    y = torch.tensor([1])
    g = oracle(model, "mig", attribution=AttributionConfig(steps=3)).step(x, x, y).g
    ig = x * weight[1].view(1, 1, 2, 2)
    assert torch.allclose(g, -ig / ig.abs().sum(), atol=1e-6)


# --- shared properties -------------------------------------------------------


def _cfg_for(method):
    extra = {"naa": {"attribution": AttributionConfig(layer_id="conv2", steps=3)},
             "danaa": {"attribution": AttributionConfig(layer_id="conv2", steps=3)},
             "mig": {"attribution": AttributionConfig(steps=3)},
             "fsps": {"fsps_warmup": 1, "freq": FreqExploreConfig(num_variants=2), "sp_max_steps": 2}}
    light = {"gra_neighbors": 2, "dim_copies": 2, "tim_copies": 2, "sinim_copies": 2, "sia_copies": 2}
    return {**light, **extra.get(method, {})}


@pytest.mark.parametrize("method", METHODS)
def test_outputs_finite_and_deterministic(surrogate, batch, method):
    x, y = batch
    runs = []
    for _ in range(2):
        o = oracle(surrogate, method, seed=4, **_cfg_for(method))
        res = iterative_attack(surrogate, x, y, o, AttackBudget(iterations=3, seed=1))
        runs.append(res.x_adv)
    assert torch.isfinite(runs[0]).all()
    assert torch.equal(runs[0], runs[1])


def test_outputs_finite_on_zero_gradient_model():
    model = constant_classifier(10, SHAPE)
    x, y = torch.rand(2, *SHAPE), torch.tensor([0, 1])
    for method in ("mim", "gra", "mig"):
        o = oracle(model, method, **_cfg_for(method))
        for _ in range(2):
            g = o.step(x, x, y).g
            assert torch.isfinite(g).all() and torch.count_nonzero(g) == 0
