#!/usr/bin/env python3
import math
import os
import sys

import pytest
import torch

# Add project root to path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from src.config import GeneratorSpec, SegmentorSpec
from src.errors import InvalidConfigError, InvalidInputError
from src.losses import (
    adv_fool_loss,
    difference_aware_loss,
    difference_weight_map,
    generator_total,
    residual_loss,
    seg_ce_loss,
)
from src.networks import build_generator, build_segmentor

TINY_G = GeneratorSpec(base_channels=4, n_downsampling=1, n_residual_blocks=1)
TINY_S = SegmentorSpec(depth=2, base_channels=4)


def probs(tumor: torch.Tensor) -> torch.Tensor:
    """(N, H, W) tumor probabilities -> (N, 2, H, W) map."""
    return torch.stack([1.0 - tumor, tumor], dim=1)


def finite_difference_check(loss_fn, params, checks=3, h=1e-6, rtol=1e-3):
    """Compare autograd against central differences on the largest-gradient entries."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    flat = torch.cat([g.reshape(-1) for g in grads])
    sizes = [p.numel() for p in params]
    for index in torch.topk(flat.abs(), checks).indices.tolist():
        owner, offset = 0, index
        while offset >= sizes[owner]:
            offset -= sizes[owner]
            owner += 1
        entry = params[owner].data.view(-1)
        original = entry[offset].item()
        with torch.no_grad():
            entry[offset] = original + h
            plus = loss_fn().item()
            entry[offset] = original - h
            minus = loss_fn().item()
            entry[offset] = original
        numeric = (plus - minus) / (2 * h)
        analytic = flat[index].item()
        assert abs(numeric - analytic) <= rtol * max(abs(numeric), abs(analytic)) + 1e-8


# ---------------------------------------------------------------------------
# Hand-computed values
# ---------------------------------------------------------------------------

def test_seg_ce_uniform_prediction_is_ln2():
    pred = probs(torch.full((2, 4, 4), 0.5, dtype=torch.float64))
    target = torch.zeros(2, 4, 4, dtype=torch.long)
    target[0, :2] = 1
    assert seg_ce_loss(pred, target).item() == pytest.approx(math.log(2), abs=1e-6)


def test_seg_ce_perfect_prediction_is_exactly_zero():
    target = torch.zeros(1, 3, 3, dtype=torch.long)
    target[0, 1, 1] = 1
    pred = probs(target.double())
    assert seg_ce_loss(pred, target).item() == 0.0


def test_seg_ce_two_by_two_hand_case():
    pred = probs(torch.tensor([[[0.9, 0.2], [0.6, 0.1]]], dtype=torch.float64))
    target = torch.tensor([[[1, 0], [1, 0]]])
    expected = -(math.log(0.9) + math.log(0.8) + math.log(0.6) + math.log(0.9)) / 4
    assert seg_ce_loss(pred, target).item() == pytest.approx(expected, abs=1e-9)


def test_adv_fool_equals_ce_against_zeros():
    pred = probs(torch.rand(2, 5, 5, generator=torch.Generator().manual_seed(0)))
    zeros = torch.zeros(2, 5, 5, dtype=torch.long)
    assert torch.equal(adv_fool_loss(pred), seg_ce_loss(pred, zeros))


def test_residual_loss_cases():
    a = torch.rand(1, 1, 4, 4, dtype=torch.float64)
    assert residual_loss(a, a).item() == 0.0
    assert residual_loss(torch.zeros(1, 1, 2, 2), torch.ones(1, 1, 2, 2)).item() == 1.0
    x_p = torch.tensor([[[[0.1, 0.2], [0.3, 0.4]]]], dtype=torch.float64)
    x_s = torch.tensor([[[[0.2, 0.2], [0.3, 0.0]]]], dtype=torch.float64)
    assert residual_loss(x_p, x_s).item() == pytest.approx(0.035, abs=1e-9)
    with pytest.raises(InvalidInputError):
        residual_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


def test_generator_total():
    ls2, lr_ = torch.tensor(0.7), torch.tensor(0.0)
    assert generator_total(ls2, lr_, 10.0).item() == pytest.approx(0.7)
    assert generator_total(torch.tensor(0.0), torch.tensor(0.02), 10.0).item() == pytest.approx(0.2)
    for bad in (0.0, -1.0):
        with pytest.raises(InvalidConfigError):
            generator_total(ls2, lr_, bad)


def test_shape_errors():
    with pytest.raises(InvalidInputError):
        seg_ce_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 4, 4, dtype=torch.long))
    with pytest.raises(InvalidInputError):
        seg_ce_loss(probs(torch.zeros(1, 4, 4)), torch.zeros(1, 4, 5, dtype=torch.long))


# ---------------------------------------------------------------------------
# Difference-aware weighting
# ---------------------------------------------------------------------------

def test_weight_map_identical_images_is_one():
    x = torch.rand(2, 1, 6, 6)
    assert torch.equal(difference_weight_map(x, x), torch.ones(2, 6, 6))


def test_weight_map_values_and_floor():
    x_p = torch.tensor([[[[0.0, 0.5], [1.0, 0.25]]]], dtype=torch.float64)
    x_s = torch.zeros_like(x_p)
    w = difference_weight_map(x_p, x_s)
    expected = torch.tensor([[[1.0, 0.5], [0.1, 0.75]]], dtype=torch.float64)
    torch.testing.assert_close(w, expected)
    # Sign of the difference does not matter.
    torch.testing.assert_close(difference_weight_map(x_s, x_p), expected)


def test_weight_map_is_detached_and_per_image():
    x_p = torch.rand(3, 1, 8, 8, requires_grad=True)
    x_s = torch.rand(3, 1, 8, 8)
    w = difference_weight_map(x_p, x_s)
    assert not w.requires_grad
    for i in range(3):
        assert w[i].min().item() == pytest.approx(0.1)
        assert w[i].max().item() == pytest.approx(1.0)


def test_wce_unit_weights_equal_plain_ce():
    pred = probs(torch.rand(2, 6, 6, dtype=torch.float64))
    target = (torch.rand(2, 6, 6) > 0.5).long()
    ones = torch.ones(2, 6, 6, dtype=torch.float64)
    assert torch.equal(difference_aware_loss(pred, target, ones), seg_ce_loss(pred, target))


def test_wce_perfect_prediction_is_zero_for_any_weight():
    target = torch.tensor([[[1, 0], [0, 1]]])
    w = torch.full((1, 2, 2), 0.1)
    assert difference_aware_loss(probs(target.double()), target, w).item() == 0.0


def test_wce_two_by_two_hand_case():
    pred = probs(torch.tensor([[[0.9, 0.2], [0.6, 0.1]]], dtype=torch.float64))
    target = torch.tensor([[[1, 0], [1, 0]]])
    w = torch.tensor([[[0.5, 1.0], [0.1, 0.3]]], dtype=torch.float64)
    expected = -(0.5 * math.log(0.9) + math.log(0.8) + 0.1 * math.log(0.6) + math.log(0.9)) / 4
    assert difference_aware_loss(pred, target, w).item() == pytest.approx(expected, abs=1e-9)

    literal = -(0.5 * math.log(0.9) + 0.1 * math.log(0.6)) / 4
    assert difference_aware_loss(pred, target, w, literal=True).item() == pytest.approx(literal, abs=1e-9)


def test_wce_does_not_increase_when_a_tumor_weight_drops():
    gen = torch.Generator().manual_seed(1)
    pred = probs(torch.rand(1, 5, 5, generator=gen, dtype=torch.float64) * 0.98 + 0.01)
    target = (torch.rand(1, 5, 5, generator=gen) > 0.5).long()
    tumor = target[0].nonzero()[0]
    previous = None
    for value in (1.0, 0.8, 0.5, 0.3, 0.1):
        w = torch.ones(1, 5, 5, dtype=torch.float64)
        w[0, tumor[0], tumor[1]] = value
        loss = difference_aware_loss(pred, target, w).item()
        if previous is not None:
            assert loss <= previous
        previous = loss


def test_wce_rejects_bad_weights():
    pred = probs(torch.rand(1, 2, 2))
    target = torch.zeros(1, 2, 2, dtype=torch.long)
    with pytest.raises(InvalidInputError):
        difference_aware_loss(pred, target, torch.full((1, 2, 2), 0.05))
    with pytest.raises(InvalidInputError):
        difference_aware_loss(pred, target, torch.ones(1, 3, 3))


# ---------------------------------------------------------------------------
# Gradients against finite differences (float64, tiny networks)
# ---------------------------------------------------------------------------

@pytest.fixture
def tiny_pair():
    torch.manual_seed(0)
    G = build_generator(TINY_G, seed=0).double().train()
    S = build_segmentor(TINY_S, seed=1).double().train()
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    y = torch.zeros(2, 8, 8, dtype=torch.long)
    y[:, 2:5, 3:6] = 1
    return G, S, x, y


def test_segmentor_losses_gradients(tiny_pair):
    G, S, x, y = tiny_pair
    params = list(S.parameters())
    with torch.no_grad():
        x_s = G(x)
    w = difference_weight_map(x, x_s)

    finite_difference_check(lambda: seg_ce_loss(S(x_s), y), params)
    finite_difference_check(lambda: difference_aware_loss(S(x_s), y, w), params)


def test_generator_losses_gradients(tiny_pair):
    G, S, x, _ = tiny_pair
    for p in S.parameters():
        p.requires_grad_(False)
    params = list(G.parameters())

    finite_difference_check(lambda: adv_fool_loss(S(G(x))), params)
    finite_difference_check(lambda: residual_loss(x, G(x)), params)
    finite_difference_check(lambda: generator_total(adv_fool_loss(S(G(x))), residual_loss(x, G(x)), 10.0), params)


def test_generator_total_gradient_is_linear(tiny_pair):
    G, S, x, _ = tiny_pair
    for p in S.parameters():
        p.requires_grad_(False)
    params = list(G.parameters())
    lam = 5.0

    def grads(loss):
        return torch.cat([g.reshape(-1) for g in torch.autograd.grad(loss, params)])

    g_total = grads(generator_total(adv_fool_loss(S(G(x))), residual_loss(x, G(x)), lam))
    g_adv = grads(adv_fool_loss(S(G(x))))
    g_res = grads(residual_loss(x, G(x)))
    torch.testing.assert_close(g_total, g_adv + lam * g_res, atol=1e-6, rtol=0)
