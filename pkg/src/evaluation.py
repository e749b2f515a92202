"""
Evaluation - identity metrics, dice, A-Dice and counterfeit images

Identity: masked PSNR/SSIM between the input and the synthesis with the
lesion zeroed out in both. Healthiness: A-Dice, the mean per-epoch training
dice of a fresh evaluation segmentor fitted at a high learning rate to
(images, lesion labels); lower means the lesions were harder to find.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, field_validator
from skimage.metrics import structural_similarity
from tqdm import tqdm

from .config import ADiceConfig, SegmentorSpec
from .data_pipeline import ImageGrid, LesionMask, Sample, stack_images, stack_masks
from .errors import InvalidInputError, NonFiniteDiceError, NonFiniteLossError, UndefinedMetricError
from .losses import seg_ce_loss
from .networks import GeneratorNet, SegmentorNet, build_segmentor, predict_masks, seed_everything, synthesize

logger = logging.getLogger(__name__)

DICE_EPS = 1e-6
PSNR_SENTINEL = 99.0
SSIM_WINDOW = 11

ArrayLike = Union[ImageGrid, LesionMask, np.ndarray]


def _array(x: ArrayLike) -> np.ndarray:
    return x.pixels if isinstance(x, (ImageGrid, LesionMask)) else np.asarray(x)


def _binary(x: ArrayLike) -> np.ndarray:
    """Binary mask from a LesionMask, a 0/1 array or a (2, H, W) probability map."""
    arr = _array(x)
    if arr.ndim == 3 and arr.shape[0] == 2:
        arr = arr.argmax(axis=0)
    return arr.astype(bool)


# ---------------------------------------------------------------------------
# Report models
# ---------------------------------------------------------------------------

class DiceCurve(BaseModel):
    """Per-epoch training dice of one evaluation-segmentor run."""
    seed: int
    values: List[float]

    @field_validator("values")
    @classmethod
    def _in_unit_interval(cls, values: List[float]) -> List[float]:
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("dice values must lie in [0, 1]")
        return values

    @property
    def adice(self) -> float:
        return adice_from_curve(self.values)


class RepeatFailure(BaseModel):
    """An A-Dice repeat dropped because its dice became non-finite."""
    seed: int
    error: str
    diagnostic: Dict[str, Any] = Field(default_factory=dict)


class MetricReport(BaseModel):
    mpsnr: Optional[float] = None
    mssim: Optional[float] = None
    adice: Optional[float] = None
    adice_repeats: List[float] = Field(default_factory=list)
    dice_curves: List[DiceCurve] = Field(default_factory=list)
    failed_repeats: List[RepeatFailure] = Field(default_factory=list)
    per_image: Dict[str, List[float]] = Field(default_factory=dict)
    n_images: int = 0
    config_hash: str = ""
    metadata: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("mssim")
    @classmethod
    def _mssim_range(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not -1.0 <= value <= 1.0:
            raise ValueError("mssim must lie in [-1, 1]")
        return value

    @field_validator("adice")
    @classmethod
    def _adice_range(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not 0.0 <= value <= 1.0:
            raise ValueError("adice must lie in [0, 1]")
        return value


# ---------------------------------------------------------------------------
# Pixel metrics
# ---------------------------------------------------------------------------

def dice_score(pred_mask: ArrayLike, gt: ArrayLike, eps: float = DICE_EPS) -> float:
    pred, truth = _binary(pred_mask), _binary(gt)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"dice_score: shapes differ {pred.shape} vs {truth.shape}")
    overlap = np.logical_and(pred, truth).sum()
    return float((2.0 * overlap + eps) / (pred.sum() + truth.sum() + eps))


def mean_dice(pred_masks: np.ndarray, gt_masks: np.ndarray) -> Tuple[float, List[float]]:
    """Per-image dice averaged over the batch; returns (mean, per-image list)."""
    scores = [dice_score(p, g) for p, g in zip(pred_masks, gt_masks)]
    return (float(np.mean(scores)) if scores else 0.0), scores


def _masked_pair(x_p: ArrayLike, x_s: ArrayLike, y_t: ArrayLike):
    a = _array(x_p).astype(np.float64)
    b = _array(x_s).astype(np.float64)
    mask = _array(y_t).astype(np.float64)
    if not (a.shape == b.shape == mask.shape):
        raise InvalidInputError(f"Shape mismatch: x_p {a.shape}, x_s {b.shape}, y_t {mask.shape}")
    if mask.size and np.all(mask == 1):
        raise UndefinedMetricError("Masked metric is undefined when the lesion mask covers every pixel")
    keep = 1.0 - mask
    return keep * a, keep * b


def mpsnr(x_p: ArrayLike, x_s: ArrayLike, y_t: ArrayLike) -> float:
    """Masked PSNR with peak 1.0 over the full grid; capped at 99 dB."""
    a, b = _masked_pair(x_p, x_s, y_t)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(PSNR_SENTINEL, 10.0 * math.log10(1.0 / mse))


def mssim(x_p: ArrayLike, x_s: ArrayLike, y_t: ArrayLike) -> float:
    """Masked single-scale SSIM (11-wide Gaussian window, sigma 1.5, data range 1)."""
    a, b = _masked_pair(x_p, x_s, y_t)
    if min(a.shape) < SSIM_WINDOW:
        raise InvalidInputError(f"mssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    return float(structural_similarity(
        b, a,
        data_range=1.0,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        win_size=SSIM_WINDOW,
    ))


def lesion_region_error(x: ArrayLike, healthy_truth: ArrayLike, y_t: ArrayLike) -> float:
    """Mean |x - healthy_truth| over lesion pixels (0 for an empty mask)."""
    mask = _array(y_t).astype(bool)
    if not mask.any():
        return 0.0
    diff = np.abs(_array(x).astype(np.float64) - _array(healthy_truth).astype(np.float64))
    return float(diff[mask].mean())


def identity_report(G: GeneratorNet, samples: Sequence[Sample], batch_size: int = 8) -> MetricReport:
    """MPSNR/MSSIM of G(x_p) against x_p with lesions masked out, per image and averaged."""
    if not samples:
        raise InvalidInputError("identity_report needs at least one sample")
    outputs = synthesize(G, [s.image for s in samples], batch_size=batch_size)
    psnrs, ssims, lesion_errors, input_errors = [], [], [], []
    for sample, x_s in zip(samples, outputs):
        psnrs.append(mpsnr(sample.image, x_s, sample.mask))
        ssims.append(mssim(sample.image, x_s, sample.mask))
        if sample.healthy_truth is not None:
            lesion_errors.append(lesion_region_error(x_s, sample.healthy_truth, sample.mask))
            input_errors.append(lesion_region_error(sample.image, sample.healthy_truth, sample.mask))

    per_image = {"mpsnr": psnrs, "mssim": ssims}
    metadata: Dict[str, Any] = {"ids": [s.id for s in samples]}
    if lesion_errors:
        per_image["lesion_error"] = lesion_errors
        metadata["lesion_error_mean"] = float(np.mean(lesion_errors))
        metadata["input_lesion_error_mean"] = float(np.mean(input_errors))
    return MetricReport(
        mpsnr=float(np.mean(psnrs)),
        mssim=float(np.mean(ssims)),
        per_image=per_image,
        n_images=len(samples),
        metadata=metadata,
    )


# ---------------------------------------------------------------------------
# Segmentor fitting and A-Dice
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    segmentor: SegmentorNet
    dice_curve: List[float]
    losses: List[float]


def _optimizer(name: str, params, lr: float, momentum: float = 0.9) -> torch.optim.Optimizer:
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum)
    return torch.optim.Adam(params, lr=lr)


def fit_segmentor(
    images: Sequence[ImageGrid],
    masks: Sequence[LesionMask],
    spec: SegmentorSpec,
    lr: float,
    epochs: int,
    batch_size: int = 8,
    optimizer: str = "adam",
    momentum: float = 0.9,
    grad_clip: Optional[float] = None,
    seed: int = 0,
    record_dice: bool = True,
    progress: bool = False,
) -> FitResult:
    """
    Train a fresh segmentor with plain cross-entropy.

    When record_dice is set, the mean per-image dice on the training images
    is recorded after every full epoch (eval mode). `grad_clip` bounds the
    global gradient norm of every step.
    """
    if len(images) == 0 or len(images) != len(masks):
        raise InvalidInputError(f"fit_segmentor needs aligned non-empty lists, got {len(images)} images / {len(masks)} masks")

    seed_everything(seed)
    S = build_segmentor(spec, seed=seed)
    opt = _optimizer(optimizer, S.parameters(), lr, momentum)
    x_all = torch.from_numpy(stack_images(images))
    y_all = torch.from_numpy(stack_masks(masks))
    n = x_all.shape[0]

    curve: List[float] = []
    losses: List[float] = []
    for epoch in tqdm(range(epochs), desc="Segmentor", disable=not progress, leave=False):
        S.train()
        order = torch.from_numpy(np.random.default_rng([seed, epoch]).permutation(n))
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = seg_ce_loss(S(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"Segmentor loss is not finite (seed {seed}, epoch {epoch + 1})",
                    seed=seed,
                    epoch=epoch + 1,
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(S.parameters(), grad_clip)
            opt.step()
            epoch_losses.append(float(loss.detach()))
        losses.append(float(np.mean(epoch_losses)))

        if record_dice:
            dice, _ = mean_dice(predict_masks(S, images, batch_size=batch_size), y_all.numpy())
            if not math.isfinite(dice):
                raise NonFiniteDiceError(
                    f"Dice is not finite (seed {seed}, epoch {epoch + 1})",
                    seed=seed,
                    epoch=epoch + 1,
                    partial_curve=list(curve),
                )
            curve.append(dice)

    return FitResult(segmentor=S, dice_curve=curve, losses=losses)


def adice_from_curve(values: Sequence[float]) -> float:
    """Mean of the recorded per-epoch dice values."""
    if len(values) == 0:
        raise InvalidInputError("A-Dice needs at least one recorded epoch")
    return float(np.mean(values))


def adice_repeats(
    images: Sequence[ImageGrid],
    masks: Sequence[LesionMask],
    cfg: ADiceConfig,
    progress: bool = False,
) -> Tuple[List[DiceCurve], List[RepeatFailure]]:
    """
    One fresh evaluation segmentor per repeat seed. A repeat whose dice turns
    non-finite is dropped and reported; training failures propagate.
    """
    if len(images) == 0 or len(images) != len(masks):
        raise InvalidInputError(f"adice needs aligned non-empty lists, got {len(images)} images / {len(masks)} masks")

    curves: List[DiceCurve] = []
    failures: List[RepeatFailure] = []
    for seed in tqdm(cfg.repeat_seeds(), desc="A-Dice repeats", disable=not progress):
        try:
            result = fit_segmentor(
                images, masks, cfg.segmentor,
                lr=cfg.eval_lr,
                epochs=cfg.epochs,
                batch_size=cfg.batch_size,
                optimizer=cfg.optimizer,
                momentum=cfg.momentum,
                grad_clip=cfg.grad_clip,
                seed=seed,
            )
        except NonFiniteDiceError as e:
            logger.warning(f"⚠️  A-Dice repeat seed={seed} aborted: {e.message}")
            failures.append(RepeatFailure(seed=seed, error=e.message, diagnostic=e.to_dict()))
            continue
        curve = DiceCurve(seed=seed, values=[min(1.0, max(0.0, v)) for v in result.dice_curve])
        logger.info(f"🧪 A-Dice repeat seed={seed}: {curve.adice:.4f}")
        curves.append(curve)

    if not curves:
        raise NonFiniteDiceError(
            f"All {len(failures)} A-Dice repeats aborted",
            failed_repeats=[f.model_dump() for f in failures],
        )
    return curves, failures


def adice(
    images: Sequence[ImageGrid],
    masks: Sequence[LesionMask],
    cfg: ADiceConfig,
    progress: bool = False,
) -> Tuple[float, List[DiceCurve]]:
    """A-Dice averaged over the completed repeats of cfg.repeats fresh evaluation segmentors."""
    curves, _ = adice_repeats(images, masks, cfg, progress=progress)
    return float(np.mean([c.adice for c in curves])), curves


def adice_report(images, masks, cfg: ADiceConfig, progress: bool = False) -> MetricReport:
    curves, failures = adice_repeats(images, masks, cfg, progress=progress)
    return MetricReport(
        adice=float(np.mean([c.adice for c in curves])),
        adice_repeats=[c.adice for c in curves],
        dice_curves=curves,
        failed_repeats=failures,
        n_images=len(images),
    )


# ---------------------------------------------------------------------------
# Counterfeits
# ---------------------------------------------------------------------------

def counterfeit_meanfill(x_p: ImageGrid, y_t: LesionMask) -> ImageGrid:
    """Replace lesion pixels by the mean of normal, non-background tissue."""
    image, mask = _array(x_p), _array(y_t).astype(bool)
    if image.shape != mask.shape:
        raise InvalidInputError(f"Shape mismatch: {image.shape} vs {mask.shape}")
    if not mask.any():
        return ImageGrid(image.copy())
    normal = (~mask) & (image > 0)
    if not normal.any():
        raise UndefinedMetricError("No normal tissue outside the lesion to take a mean from")
    filled = image.copy()
    filled[mask] = np.float32(image[normal].astype(np.float64).mean())
    return ImageGrid(filled)


def lesion_noise(y_t: LesionMask, seed: int, std: float = 0.2) -> np.ndarray:
    """Gaussian noise on lesion pixels, zero elsewhere."""
    mask = _array(y_t).astype(bool)
    noise = np.random.default_rng(seed).normal(0.0, std, size=mask.shape)
    return np.where(mask, noise, 0.0)


def counterfeit_noisefill(x_p: ImageGrid, y_t: LesionMask, seed: int, std: float = 0.2) -> ImageGrid:
    """Add zero-mean Gaussian noise (std 0.2) to lesion pixels, clamped to [0,1]."""
    image = _array(x_p)
    if image.shape != _array(y_t).shape:
        raise InvalidInputError(f"Shape mismatch: {image.shape} vs {_array(y_t).shape}")
    noisy = image.astype(np.float64) + lesion_noise(y_t, seed, std)
    return ImageGrid(np.clip(noisy, 0.0, 1.0).astype(np.float32))


def make_counterfeits(samples: Sequence[Sample], mode: str, seed: int = 0) -> List[ImageGrid]:
    if mode == "meanfill":
        return [counterfeit_meanfill(s.image, s.mask) for s in samples]
    if mode == "noisefill":
        return [counterfeit_noisefill(s.image, s.mask, seed + i) for i, s in enumerate(samples)]
    raise InvalidInputError(f"Unknown counterfeit mode: {mode}")


# ---------------------------------------------------------------------------
# Segmentor generalization
# ---------------------------------------------------------------------------

class GeneralizationReport(BaseModel):
    per_image: List[float]
    mean: float
    variance: float


def segmentor_generalization(S: SegmentorNet, data: Sequence[Sample], batch_size: int = 8) -> GeneralizationReport:
    """Dice of S on raw pathological images against their lesion masks."""
    samples = list(data)
    if not samples:
        raise InvalidInputError("segmentor_generalization needs at least one sample")
    preds = predict_masks(S, [s.image for s in samples], batch_size=batch_size)
    mean, scores = mean_dice(preds, np.stack([s.mask.pixels for s in samples]))
    return GeneralizationReport(per_image=scores, mean=mean, variance=float(np.var(scores)))


def random_dice_baseline(pred_fraction: float, lesion_fraction: float) -> float:
    """Expected dice of a random prediction covering `pred_fraction` of pixels: 2qf/(q+f)."""
    q, f = pred_fraction, lesion_fraction
    if q + f == 0:
        return 0.0
    return 2.0 * q * f / (q + f)
