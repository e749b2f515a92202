#!/usr/bin/env python3
import os
import sys

import numpy as np
import pandas as pd
import pytest
import torch

# Add project root to path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from src.config import GeneratorSpec, SegmentorSpec, TrainConfig
from src.data_pipeline import make_phantom
from src.errors import CheckpointError, InvalidInputError, NonFiniteLossError
from src.gvs_trainer import (
    TrainState,
    as_batch,
    epoch_order,
    resume_state,
    select_training_subset,
    step_A,
    step_B,
    train_gvs,
)
from src.losses import difference_aware_loss, difference_weight_map
from src.networks import equals_snapshot, snapshot

TINY_G = GeneratorSpec(base_channels=8, n_downsampling=1, n_residual_blocks=1)
TINY_S = SegmentorSpec(depth=2, base_channels=8)


def tiny_config(**overrides) -> TrainConfig:
    base = dict(generator=TINY_G, segmentor=TINY_S, batch_size=4, epochs=1, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def phantoms():
    return make_phantom(0, size=(32, 32), count=10)


def test_step_a_leaves_generator_untouched(phantoms):
    cfg = tiny_config()
    state = TrainState.initial(cfg)
    g_before, s_before = snapshot(state.G), snapshot(state.S)
    step_A(phantoms[:4], state, cfg)
    assert equals_snapshot(state.G, g_before)
    assert not equals_snapshot(state.S, s_before)
    assert "L_seg" in state.last_losses


def test_step_b_leaves_segmentor_untouched(phantoms):
    cfg = tiny_config()
    state = TrainState.initial(cfg)
    g_before, s_before = snapshot(state.G), snapshot(state.S)
    step_B(phantoms[:4], state, cfg)
    assert equals_snapshot(state.S, s_before)
    assert not equals_snapshot(state.G, g_before)
    assert state.last_losses["L_G"] == pytest.approx(
        state.last_losses["L_s2"] + cfg.lambda_ * state.last_losses["L_R"], rel=1e-5
    )


def test_alternating_steps_keep_the_frozen_network_exact(phantoms):
    cfg = tiny_config()
    state = TrainState.initial(cfg)
    for i in range(100):
        batch = phantoms[(i % 3) * 3:(i % 3) * 3 + 4]
        g_before = snapshot(state.G)
        step_A(batch, state, cfg)
        assert equals_snapshot(state.G, g_before)
        s_before = snapshot(state.S)
        step_B(batch, state, cfg)
        assert equals_snapshot(state.S, s_before)


def test_plain_mode_matches_unit_weights(phantoms):
    cfg_plain = tiny_config(use_difference_aware=False)
    plain = TrainState.initial(cfg_plain)
    step_A(phantoms[:4], plain, cfg_plain)

    manual = TrainState.initial(cfg_plain)
    x, y = as_batch(phantoms[:4], manual.S)
    manual.G.eval()
    with torch.no_grad():
        x_s = manual.G(x)
    manual.S.train()
    loss = difference_aware_loss(manual.S(x_s), y, torch.ones_like(y, dtype=x.dtype))
    manual.opt_s.zero_grad(set_to_none=True)
    loss.backward()
    manual.opt_s.step()

    assert equals_snapshot(plain.S, snapshot(manual.S))


def test_most_different_pixel_gets_floor_weight(phantoms):
    state = TrainState.initial(tiny_config())
    x, _ = as_batch(phantoms[:2], state.G)
    with torch.no_grad():
        x_s = state.G.eval()(x)
    w = difference_weight_map(x, x_s)
    for i in range(2):
        diff = (x[i, 0] - x_s[i, 0]).abs()
        peak = torch.nonzero(diff == diff.max())[0]
        assert w[i, peak[0], peak[1]].item() == pytest.approx(0.1)


def test_step_a_loss_decreases_on_fixed_batch(phantoms):
    cfg = tiny_config()
    state = TrainState.initial(cfg)
    losses = []
    for _ in range(50):
        step_A(phantoms[:8], state, cfg)
        losses.append(state.last_losses["L_seg"])
    increases = sum(b > a for a, b in zip(losses, losses[1:]))
    assert increases <= 5
    assert losses[-1] < losses[0]


def test_step_a_rejects_empty_batch():
    cfg = tiny_config()
    with pytest.raises(InvalidInputError):
        step_A([], TrainState.initial(cfg), cfg)


def test_non_finite_loss_stops_training(phantoms, tmp_path):
    cfg = tiny_config()
    state = TrainState.initial(cfg)
    state.diagnostics_dir = str(tmp_path / "diagnostics")
    x, y = as_batch(phantoms[:2], state.S)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        step_A((x, y), state, cfg)
    assert info.value.context["loss"] == "L_seg"
    assert os.path.exists(info.value.context["snapshot"])


def test_subset_and_epoch_order():
    cfg = tiny_config(train_fraction=0.3, seed=2)
    subset = select_training_subset(10, cfg)
    assert len(subset) == 3
    np.testing.assert_array_equal(subset, select_training_subset(10, cfg))
    np.testing.assert_array_equal(select_training_subset(10, tiny_config()), np.arange(10))

    np.testing.assert_array_equal(epoch_order(10, 1, cfg), epoch_order(10, 1, cfg))
    assert sorted(epoch_order(10, 1, cfg)) == list(range(10))
    np.testing.assert_array_equal(epoch_order(5, 0, tiny_config(shuffle=False)), np.arange(5))


def test_train_gvs_bookkeeping(phantoms, tmp_path):
    cfg = tiny_config(epochs=2)
    state, checkpoints = train_gvs(phantoms, cfg, out_dir=str(tmp_path))
    # 10 samples, batch 4 -> 3 steps per epoch
    assert state.step == 6
    assert state.epoch == 2
    assert [os.path.basename(p) for p in checkpoints] == ["epoch_1.ckpt", "epoch_2.ckpt"]
    frame = pd.read_csv(tmp_path / "losses.csv")
    assert list(frame.columns) == ["step", "epoch", "L_seg", "L_s2", "L_R", "L_G"]
    assert len(frame) == 6
    assert list(frame["epoch"]) == [1, 1, 1, 2, 2, 2]


def test_train_gvs_is_reproducible(phantoms, tmp_path):
    cfg = tiny_config(epochs=2)
    train_gvs(phantoms, cfg, out_dir=str(tmp_path / "a"))
    train_gvs(phantoms, cfg, out_dir=str(tmp_path / "b"))
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()


def test_resume_matches_uninterrupted_run(phantoms, tmp_path):
    full, _ = train_gvs(phantoms, tiny_config(epochs=4), out_dir=str(tmp_path / "full"))

    train_gvs(phantoms, tiny_config(epochs=2), out_dir=str(tmp_path / "part"))
    cfg = tiny_config(epochs=4)
    state = resume_state(str(tmp_path / "part" / "checkpoints" / "epoch_2.ckpt"), cfg)
    resumed, written = train_gvs(phantoms, cfg, out_dir=str(tmp_path / "part"), state=state)

    assert [os.path.basename(p) for p in written] == ["epoch_3.ckpt", "epoch_4.ckpt"]
    assert equals_snapshot(resumed.G, snapshot(full.G))
    assert equals_snapshot(resumed.S, snapshot(full.S))
    assert resumed.history == full.history


def test_resume_rejects_different_config(phantoms, tmp_path):
    train_gvs(phantoms, tiny_config(), out_dir=str(tmp_path))
    with pytest.raises(CheckpointError):
        resume_state(str(tmp_path / "checkpoints" / "epoch_1.ckpt"), tiny_config(lambda_=5.0))


def test_checkpoint_failure_keeps_state(phantoms, tmp_path):
    (tmp_path / "checkpoints").write_text("not a directory")
    with pytest.raises(CheckpointError) as info:
        train_gvs(phantoms, tiny_config(), out_dir=str(tmp_path))
    assert info.value.state.epoch == 1


def test_train_gvs_rejects_empty_data():
    with pytest.raises(InvalidInputError):
        train_gvs([], tiny_config())


def mean_change(samples, cfg) -> float:
    state, _ = train_gvs(samples, cfg)
    x, _ = as_batch(samples, state.G)
    with torch.no_grad():
        x_s = state.G.eval()(x)
    return (x_s - x).abs().mean().item()


# the sigmoid head starts near 0.5 everywhere and has to learn the identity
@pytest.mark.slow
@pytest.mark.parametrize("residual_head,bound", [(True, 0.01), (False, 0.05)])
def test_huge_lambda_keeps_generator_near_identity(residual_head, bound):
    samples = make_phantom(0, size=(32, 32), count=16)
    generator = TINY_G.model_copy(update={"residual_head": residual_head})
    near_identity = mean_change(samples, tiny_config(lambda_=1e6, epochs=50, generator=generator))
    assert near_identity < bound
    assert near_identity < mean_change(samples, tiny_config(lambda_=0.01, epochs=50, generator=generator))
