#!/usr/bin/env python3
import os
import sys

import numpy as np
import pytest
import torch

# Add project root to path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from src.config import GeneratorSpec, SegmentorSpec
from src.data_pipeline import ImageGrid, make_phantom
from src.errors import CheckpointError, InvalidConfigError
from src.networks import (
    build_generator,
    build_segmentor,
    equals_snapshot,
    frozen,
    generator_forward,
    load_generator,
    load_segmentor,
    predict_masks,
    read_checkpoint,
    save_checkpoint,
    segmentor_forward,
    snapshot,
    synthesize,
)

TINY_G = GeneratorSpec(base_channels=8, n_downsampling=1, n_residual_blocks=1)
TINY_S = SegmentorSpec(depth=2, base_channels=8)


def header(g_spec=TINY_G, s_spec=TINY_S, epoch=1):
    return {
        "spec": {"generator": g_spec.model_dump(), "segmentor": s_spec.model_dump()},
        "seed": 0,
        "epoch": epoch,
        "config_hash": "test",
    }


@pytest.mark.parametrize("shape", [(32, 32), (30, 45)])
def test_generator_preserves_shape_and_range(shape):
    G = build_generator(TINY_G, seed=0)
    x = ImageGrid(np.random.default_rng(0).random(shape))
    out = generator_forward(x, G)
    assert out.shape == shape
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_generator_eval_is_deterministic():
    G = build_generator(TINY_G, seed=0)
    x = make_phantom(0, size=(32, 32))[0].image
    np.testing.assert_array_equal(generator_forward(x, G).pixels, generator_forward(x, G).pixels)


def test_seeded_builds_are_identical():
    a, b = build_generator(TINY_G, seed=4), build_generator(TINY_G, seed=4)
    assert equals_snapshot(a, snapshot(b))
    assert not equals_snapshot(build_generator(TINY_G, seed=5), snapshot(a))


@pytest.mark.parametrize("shape", [(32, 32), (33, 47)])
def test_segmentor_outputs_simplex(shape):
    S = build_segmentor(TINY_S, seed=0)
    x = ImageGrid(np.random.default_rng(1).random(shape))
    out = segmentor_forward(x, S)
    assert out.shape == (2,) + shape
    assert np.all(out >= 0.0)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-5)


def test_segmentor_without_skip_connections():
    S = build_segmentor(SegmentorSpec(depth=2, base_channels=8, skip_connections=False), seed=0)
    out = segmentor_forward(ImageGrid(np.full((32, 32), 0.5)), S)
    assert out.shape == (2, 32, 32)


def test_invalid_mode_rejected():
    G = build_generator(TINY_G, seed=0)
    with pytest.raises(InvalidConfigError):
        generator_forward(ImageGrid(np.zeros((32, 32))), G, mode="inference")


def test_generator_gradient_finite_on_constant_input():
    G = build_generator(TINY_G, seed=0).train()
    x = torch.full((1, 1, 32, 32), 0.5)
    out = G(x)
    assert out.min() >= 0.0 and out.max() <= 1.0
    out.mean().backward()
    for p in G.parameters():
        assert p.grad is not None and torch.all(torch.isfinite(p.grad))


def test_residual_head_with_zero_output_is_identity():
    G = build_generator(TINY_G.model_copy(update={"residual_head": True}), seed=0)
    last = G.model[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
    x = make_phantom(1, size=(32, 32))[0].image
    np.testing.assert_array_equal(generator_forward(x, G).pixels, x.pixels)


def test_frozen_restores_buffers_and_blocks_gradients():
    S = build_segmentor(TINY_S, seed=0).train()
    before = snapshot(S)
    with frozen(S):
        assert all(not p.requires_grad for p in S.parameters())
        S(torch.rand(2, 1, 32, 32))  # updates BN running stats in train mode
    assert all(p.requires_grad for p in S.parameters())
    assert equals_snapshot(S, before)


def test_batched_helpers_match_single_image():
    G = build_generator(TINY_G, seed=0)
    S = build_segmentor(TINY_S, seed=0)
    grids = [s.image for s in make_phantom(2, size=(32, 32), count=3)]
    batched = synthesize(G, grids, batch_size=2)
    for grid, out in zip(grids, batched):
        np.testing.assert_allclose(out.pixels, generator_forward(grid, G).pixels, atol=1e-6)
    masks = predict_masks(S, grids, batch_size=2)
    assert masks.shape == (3, 32, 32)
    assert set(np.unique(masks)) <= {0, 1}


def test_checkpoint_round_trip(tmp_path):
    G, S = build_generator(TINY_G, seed=0), build_segmentor(TINY_S, seed=1)
    path = save_checkpoint(str(tmp_path / "model.ckpt"), header(epoch=3),
                           {"generator": G.state_dict(), "segmentor": S.state_dict()})
    payload = read_checkpoint(path)
    assert payload["header"]["epoch"] == 3
    assert equals_snapshot(load_generator(path), snapshot(G))
    assert equals_snapshot(load_segmentor(path), snapshot(S))
    assert not os.path.exists(path + ".tmp")


def test_checkpoint_spec_mismatch(tmp_path):
    G, S = build_generator(TINY_G, seed=0), build_segmentor(TINY_S, seed=1)
    wrong = header(g_spec=TINY_G.model_copy(update={"base_channels": 16}))
    path = save_checkpoint(str(tmp_path / "bad.ckpt"), wrong, {"generator": G.state_dict(), "segmentor": S.state_dict()})
    with pytest.raises(CheckpointError):
        load_generator(path)


def test_checkpoint_missing_or_incomplete(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(str(tmp_path / "absent.ckpt"))
    G = build_generator(TINY_G, seed=0)
    path = save_checkpoint(str(tmp_path / "partial.ckpt"), header(), {"generator": G.state_dict()})
    with pytest.raises(CheckpointError):
        read_checkpoint(path)
