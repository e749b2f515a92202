"""
Lesion-contrast enhancement and the downstream segmentation protocol.

Two sign conventions are supported:
    pathological_residue: x_en = x_p + alpha * (x_p - x_s)   (default)
    paper_literal:        x_en = x_p + alpha * (x_s - x_p)
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, field_validator

from .config import EnhanceConfig, TrainConfig
from .data_pipeline import ImageGrid, Sample
from .errors import InvalidInputError
from .evaluation import fit_segmentor, mean_dice
from .networks import GeneratorNet, predict_masks, synthesize

logger = logging.getLogger(__name__)


class DownstreamResult(BaseModel):
    alpha: float
    per_image_dice: List[float]
    mean_dice: float
    delta_vs_baseline: float = 0.0
    seed: int = 0

    @field_validator("per_image_dice")
    @classmethod
    def _dice_range(cls, values: List[float]) -> List[float]:
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("dice values must lie in [0, 1]")
        return values


def enhance_array(x_p: np.ndarray, x_s: np.ndarray, alpha: float, cfg: EnhanceConfig) -> np.ndarray:
    """Enhancement on raw arrays; the result is unclamped when cfg.clamp_output is off."""
    x_p = np.asarray(x_p, dtype=np.float32)
    x_s = np.asarray(x_s, dtype=np.float32)
    if x_p.shape != x_s.shape:
        raise InvalidInputError(f"enhance: shapes differ {x_p.shape} vs {x_s.shape}")
    if alpha < 0:
        raise InvalidInputError(f"enhance: alpha must be >= 0, got {alpha}")

    a = np.float32(alpha)
    if cfg.sign_mode == "paper_literal":
        x_en = x_p + a * (x_s - x_p)
    else:
        x_en = x_p + a * (x_p - x_s)
    if cfg.clamp_output:
        x_en = np.clip(x_en, 0.0, 1.0)
    return x_en.astype(np.float32)


def enhance(x_p: ImageGrid, x_s: ImageGrid, alpha: float, cfg: Optional[EnhanceConfig] = None) -> np.ndarray:
    return enhance_array(x_p.pixels, x_s.pixels, alpha, cfg or EnhanceConfig())


def enhance_grid(x_p: ImageGrid, x_s: ImageGrid, alpha: float, cfg: Optional[EnhanceConfig] = None) -> ImageGrid:
    """Clamped enhancement wrapped as an ImageGrid."""
    cfg = (cfg or EnhanceConfig()).model_copy(update={"clamp_output": True})
    return ImageGrid(enhance(x_p, x_s, alpha, cfg))


def enhance_samples(
    samples: Sequence[Sample],
    G: GeneratorNet,
    alpha: float,
    cfg: Optional[EnhanceConfig] = None,
    batch_size: int = 8,
) -> List[ImageGrid]:
    syntheses = synthesize(G, [s.image for s in samples], batch_size=batch_size)
    return [enhance_grid(s.image, x_s, alpha, cfg) for s, x_s in zip(samples, syntheses)]


def run_downstream(
    data_train: Sequence[Sample],
    data_test: Sequence[Sample],
    G: GeneratorNet,
    alpha: float,
    seg_cfg: TrainConfig,
    enhance_cfg: Optional[EnhanceConfig] = None,
    train_fraction: float = 1.0,
    baseline_dice: Optional[float] = None,
) -> DownstreamResult:
    """
    Train a fresh segmentor on enhanced training images and score it on
    enhanced test images. `train_fraction` keeps the first ceil(f*N)
    training samples to study the low-data regime.
    """
    train, test = list(data_train), list(data_test)
    if not train or not test:
        raise InvalidInputError(f"run_downstream needs train and test samples, got {len(train)}/{len(test)}")
    if not 0.0 < train_fraction <= 1.0:
        raise InvalidInputError(f"train_fraction must be in (0, 1], got {train_fraction}")
    train = train[: max(1, int(np.ceil(train_fraction * len(train))))]

    enhanced_train = enhance_samples(train, G, alpha, enhance_cfg, seg_cfg.batch_size)
    enhanced_test = enhance_samples(test, G, alpha, enhance_cfg, seg_cfg.batch_size)

    fit = fit_segmentor(
        enhanced_train, [s.mask for s in train], seg_cfg.segmentor,
        lr=seg_cfg.lr,
        epochs=seg_cfg.epochs,
        batch_size=seg_cfg.batch_size,
        seed=seg_cfg.seed,
        record_dice=False,
    )
    preds = predict_masks(fit.segmentor, enhanced_test, batch_size=seg_cfg.batch_size)
    mean, scores = mean_dice(preds, np.stack([s.mask.pixels for s in test]))
    delta = 0.0 if baseline_dice is None else mean - baseline_dice
    logger.info(f"✅ Downstream alpha={alpha}: dice={mean:.4f} (delta {delta:+.4f})")
    return DownstreamResult(
        alpha=alpha, per_image_dice=scores, mean_dice=mean, delta_vs_baseline=delta, seed=seg_cfg.seed
    )


def run_downstream_grid(
    data_train: Sequence[Sample],
    data_test: Sequence[Sample],
    G: GeneratorNet,
    seg_cfg: TrainConfig,
    enhance_cfg: Optional[EnhanceConfig] = None,
    alphas: Optional[Sequence[float]] = None,
    train_fraction: float = 1.0,
) -> List[DownstreamResult]:
    """Every alpha of the grid, with deltas against the alpha = 0 arm."""
    enhance_cfg = enhance_cfg or EnhanceConfig()
    alphas = list(alphas if alphas is not None else enhance_cfg.alpha_grid)

    baseline = None
    results: Dict[float, DownstreamResult] = {}
    if 0.0 in alphas or 0 in alphas:
        results[0.0] = run_downstream(data_train, data_test, G, 0.0, seg_cfg, enhance_cfg, train_fraction)
        baseline = results[0.0].mean_dice
    for alpha in alphas:
        if float(alpha) in results:
            continue
        results[float(alpha)] = run_downstream(
            data_train, data_test, G, float(alpha), seg_cfg, enhance_cfg, train_fraction, baseline_dice=baseline
        )
    return [results[float(a)] for a in alphas]
