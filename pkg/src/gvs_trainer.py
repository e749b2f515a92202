"""
GVS Trainer - alternating generator/segmentor optimization

Each batch runs Step A (generator frozen, segmentor updated on the
difference-aware or plain cross-entropy) followed by Step B (segmentor
frozen, generator updated on adversarial fooling loss + lambda * residual).
Batch order per epoch comes from np.random.default_rng([seed, epoch]), so a
resumed run sees exactly the batches an uninterrupted run would.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from .config import TrainConfig, config_hash
from .data_pipeline import Sample, stack_images, stack_masks
from .errors import CheckpointError, InvalidInputError, NonFiniteLossError
from .experiment_visualizer import ExperimentVisualizer
from .losses import (
    adv_fool_loss,
    difference_aware_loss,
    difference_weight_map,
    generator_total,
    residual_loss,
    seg_ce_loss,
)
from .networks import (
    GeneratorNet,
    SegmentorNet,
    build_generator,
    build_segmentor,
    frozen,
    load_state_checked,
    read_checkpoint,
    save_checkpoint,
    seed_everything,
)

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "epoch", "L_seg", "L_s2", "L_R", "L_G"]

Batch = Union[Sequence[Sample], Tuple[torch.Tensor, torch.Tensor]]


@dataclass
class TrainState:
    """Networks, optimizers and the append-only loss history of one GVS run."""
    G: GeneratorNet
    S: SegmentorNet
    opt_g: torch.optim.Optimizer
    opt_s: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    last_losses: Dict[str, float] = field(default_factory=dict)
    diagnostics_dir: Optional[str] = None

    @classmethod
    def initial(cls, cfg: TrainConfig) -> "TrainState":
        G = build_generator(cfg.generator, seed=cfg.seed)
        S = build_segmentor(cfg.segmentor, seed=cfg.seed + 1)
        return cls(
            G=G,
            S=S,
            opt_g=torch.optim.Adam(G.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps),
            opt_s=torch.optim.Adam(S.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps),
        )

    def record(self, epoch: int) -> Dict[str, float]:
        row = {"step": self.step, "epoch": epoch, **self.last_losses}
        self.history.append(row)
        return row

    def state_dict(self) -> Dict[str, Any]:
        return {
            "generator": self.G.state_dict(),
            "segmentor": self.S.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_s": self.opt_s.state_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "history": [dict(row) for row in self.history],
        }

    def load_state_dict(self, payload: Dict[str, Any]) -> None:
        load_state_checked(self.G, payload["generator"], "generator")
        load_state_checked(self.S, payload["segmentor"], "segmentor")
        self.opt_g.load_state_dict(payload["opt_g"])
        self.opt_s.load_state_dict(payload["opt_s"])
        self.epoch = int(payload["epoch"])
        self.step = int(payload["step"])
        self.history = [dict(row) for row in payload["history"]]

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=LOSS_COLUMNS)


def as_batch(batch: Batch, like: torch.nn.Module) -> Tuple[torch.Tensor, torch.Tensor]:
    """Convert a list of Samples (or an (x, y) pair) to tensors on the module's device."""
    param = next(like.parameters())
    if isinstance(batch, tuple):
        x, y = batch
    else:
        if len(batch) == 0:
            raise InvalidInputError("Batch must not be empty")
        x = torch.from_numpy(stack_images([s.image for s in batch]))
        y = torch.from_numpy(stack_masks([s.mask for s in batch]))
    if x.shape[0] == 0:
        raise InvalidInputError("Batch must not be empty")
    return x.to(device=param.device, dtype=param.dtype), y.to(device=param.device)


def _check_finite(loss: torch.Tensor, name: str, state: TrainState) -> None:
    if torch.isfinite(loss):
        return
    snapshot_path = None
    if state.diagnostics_dir:
        os.makedirs(state.diagnostics_dir, exist_ok=True)
        snapshot_path = os.path.join(state.diagnostics_dir, f"nonfinite_step{state.step}.pt")
        torch.save({"loss": name, "step": state.step, "epoch": state.epoch, **state.state_dict()}, snapshot_path)
    logger.error(f"❌ {name} became non-finite at step {state.step} (snapshot: {snapshot_path})")
    raise NonFiniteLossError(
        f"{name} is not finite at step {state.step}",
        loss=name,
        step=state.step,
        epoch=state.epoch,
        snapshot=snapshot_path,
    )


def step_A(batch: Batch, state: TrainState, cfg: TrainConfig) -> TrainState:
    """Fix G, update S on the weighted (or plain) cross-entropy of G(x_p)."""
    x_p, y_t = as_batch(batch, state.S)

    state.G.eval()
    with torch.no_grad():
        x_s = state.G(x_p)

    state.S.train()
    for _ in range(cfg.a_steps):
        pred = state.S(x_s)
        if cfg.use_difference_aware:
            w = difference_weight_map(x_p, x_s, floor=cfg.weight_floor)
            loss = difference_aware_loss(pred, y_t, w, literal=cfg.wce_mode == "literal")
        else:
            loss = seg_ce_loss(pred, y_t)
        _check_finite(loss, "L_seg", state)

        state.opt_s.zero_grad(set_to_none=True)
        loss.backward()
        state.opt_s.step()

    state.last_losses["L_seg"] = float(loss.detach())
    return state


def step_B(batch: Batch, state: TrainState, cfg: TrainConfig) -> TrainState:
    """Fix S, update G on L_s2 + lambda * L_R."""
    x_p, _ = as_batch(batch, state.G)

    state.G.train()
    state.S.train()
    with frozen(state.S):
        for _ in range(cfg.b_steps):
            x_s = state.G(x_p)
            ls2 = adv_fool_loss(state.S(x_s))
            lr_ = residual_loss(x_p, x_s)
            lg = generator_total(ls2, lr_, cfg.lambda_)
            _check_finite(lg, "L_G", state)

            state.opt_g.zero_grad(set_to_none=True)
            lg.backward()
            state.opt_g.step()
        # Frozen parameters never receive gradients, but clear stale ones.
        state.S.zero_grad(set_to_none=True)

    state.last_losses.update({"L_s2": float(ls2.detach()), "L_R": float(lr_.detach()), "L_G": float(lg.detach())})
    return state


def select_training_subset(n: int, cfg: TrainConfig) -> np.ndarray:
    """Indices of the first ceil(f*N) samples of the seed-shuffled stream."""
    if cfg.train_fraction >= 1.0:
        return np.arange(n)
    keep = max(1, math.ceil(cfg.train_fraction * n))
    return np.random.default_rng(cfg.seed).permutation(n)[:keep]


def epoch_order(n: int, epoch: int, cfg: TrainConfig) -> np.ndarray:
    if not cfg.shuffle:
        return np.arange(n)
    return np.random.default_rng([cfg.seed, epoch]).permutation(n)


def checkpoint_header(cfg: TrainConfig, epoch: int) -> Dict[str, Any]:
    return {
        "spec": {
            "generator": cfg.generator.model_dump(mode="json"),
            "segmentor": cfg.segmentor.model_dump(mode="json"),
        },
        "seed": cfg.seed,
        "epoch": epoch,
        "config_hash": config_hash(cfg),
        "train_config": cfg.model_dump(mode="json"),
    }


def _resume_key(cfg: TrainConfig) -> str:
    return config_hash(cfg.model_dump(mode="json", exclude={"epochs"}))


def resume_state(path: str, cfg: TrainConfig) -> TrainState:
    """Rebuild a TrainState from an epoch checkpoint; only `epochs` may differ."""
    payload = read_checkpoint(path)
    stored = payload["header"].get("train_config")
    if stored is None or _resume_key(TrainConfig.model_validate(stored)) != _resume_key(cfg):
        raise CheckpointError(
            f"Checkpoint {path} was trained with a different configuration", path=path
        )
    state = TrainState.initial(cfg)
    state.load_state_dict(payload)
    logger.info(f"🔄 Resumed from {path} at epoch {state.epoch} (step {state.step})")
    return state


def write_loss_log(state: TrainState, out_dir: str) -> str:
    path = os.path.join(out_dir, "losses.csv")
    state.loss_frame().to_csv(path, index=False)
    return path


def train_gvs(
    data: Iterable[Sample],
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    state: Optional[TrainState] = None,
    progress: bool = False,
    visualizer: Optional[ExperimentVisualizer] = None,
) -> Tuple[TrainState, List[str]]:
    """
    Run alternating GVS training for cfg.epochs epochs.

    Writes checkpoints/epoch_{e}.ckpt and losses.csv under out_dir after every
    epoch when out_dir is given. Returns the final state and the checkpoint
    paths written by this call.
    """
    samples = list(data)
    if not samples:
        raise InvalidInputError("train_gvs needs at least one sample")

    seed_everything(cfg.seed)
    subset = select_training_subset(len(samples), cfg)
    x_all = torch.from_numpy(stack_images([samples[i].image for i in subset]))
    y_all = torch.from_numpy(stack_masks([samples[i].mask for i in subset]))
    n = x_all.shape[0]

    if state is None:
        state = TrainState.initial(cfg)
    if out_dir:
        state.diagnostics_dir = os.path.join(out_dir, "diagnostics")

    logger.info(
        f"🧪 GVS training: {n} samples, batch {cfg.batch_size}, epochs {state.epoch + 1}..{cfg.epochs}, "
        f"lambda={cfg.lambda_}, difference_aware={cfg.use_difference_aware}"
    )
    checkpoints: List[str] = []
    for epoch in range(state.epoch, cfg.epochs):
        if visualizer:
            visualizer.show_epoch_header(epoch + 1, cfg.epochs)
        order = torch.from_numpy(epoch_order(n, epoch, cfg))
        starts = range(0, n, cfg.batch_size)
        rows = []
        for start in tqdm(starts, desc=f"Epoch {epoch + 1}", disable=not progress, leave=False):
            idx = order[start:start + cfg.batch_size]
            batch = (x_all[idx], y_all[idx])
            step_A(batch, state, cfg)
            step_B(batch, state, cfg)
            state.step += 1
            rows.append(state.record(epoch + 1))

        state.epoch = epoch + 1
        means = {k: float(np.mean([r[k] for r in rows])) for k in LOSS_COLUMNS[2:]}
        logger.info(f"✅ Epoch {state.epoch}/{cfg.epochs}: " + ", ".join(f"{k}={v:.4f}" for k, v in means.items()))
        if visualizer:
            visualizer.show_epoch_summary(state.epoch, means)

        if out_dir:
            path = os.path.join(out_dir, "checkpoints", f"epoch_{state.epoch}.ckpt")
            try:
                save_checkpoint(path, checkpoint_header(cfg, state.epoch), state.state_dict())
                write_loss_log(state, out_dir)
            except CheckpointError as e:
                # The in-memory state survives for the caller.
                e.state = state
                logger.error(f"❌ {e.message}")
                raise
            except OSError as e:
                err = CheckpointError(f"Could not write training artifacts: {e}", path=path)
                err.state = state
                logger.error(f"❌ {err.message}")
                raise err from e
            checkpoints.append(path)
            logger.info(f"💾 Saved {path}")

    return state, checkpoints
