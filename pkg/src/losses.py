"""
Training objectives.

All losses take probability maps of shape (N, 2, H, W) (channel 1 = tumor),
integer masks of shape (N, H, W) and images of shape (N, 1, H, W), and
reduce by the mean over every pixel of the batch.
"""

import torch

from .errors import InvalidConfigError, InvalidInputError

PROB_FLOOR = 1e-7


def _check_pred_target(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.dim() != 4 or pred.shape[1] != 2:
        raise InvalidInputError(f"Expected a (N, 2, H, W) probability map, got {tuple(pred.shape)}")
    if target.shape != (pred.shape[0],) + tuple(pred.shape[2:]):
        raise InvalidInputError(
            f"Target shape {tuple(target.shape)} does not match prediction {tuple(pred.shape)}"
        )


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def true_class_nll(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel -log p(true class), shape (N, H, W)."""
    _check_pred_target(pred, target)
    p_true = pred.gather(1, target.long().unsqueeze(1)).squeeze(1)
    # Only the lower floor: a perfect prediction must give exactly 0.
    return -torch.log(p_true.clamp_min(PROB_FLOOR))


def seg_ce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Segmentor cross-entropy against the lesion mask."""
    return true_class_nll(pred, target).mean()


def adv_fool_loss(pred: torch.Tensor) -> torch.Tensor:
    """Cross-entropy toward the all-zero (no tumor) mask."""
    zeros = torch.zeros((pred.shape[0],) + tuple(pred.shape[2:]), dtype=torch.long, device=pred.device)
    return seg_ce_loss(pred, zeros)


def residual_loss(x_p: torch.Tensor, x_s: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x_p, x_s)
    return torch.mean((x_p - x_s) ** 2)


def generator_total(ls2: torch.Tensor, lr_: torch.Tensor, lambda_: float) -> torch.Tensor:
    if lambda_ <= 0:
        raise InvalidConfigError(f"lambda_ must be > 0, got {lambda_}", lambda_=lambda_)
    return ls2 + lambda_ * lr_


def difference_weight_map(x_p: torch.Tensor, x_s: torch.Tensor, floor: float = 0.1) -> torch.Tensor:
    """
    w = max(floor, 1 - m) with m the per-image min-max normalized |x_p - x_s|.

    Returns (N, H, W), detached from the graph. An image with a flat
    difference map gets m = 0 everywhere, i.e. w = 1.
    """
    _check_same_shape(x_p, x_s)
    diff = (x_p - x_s).detach().abs()
    if diff.dim() == 4:
        diff = diff[:, 0]
    elif diff.dim() == 2:
        diff = diff.unsqueeze(0)

    flat = diff.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1)
    span = hi - lo
    m = torch.where(span > 0, (diff - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(diff))
    return torch.clamp(1.0 - m, min=floor, max=1.0)


def difference_aware_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    w: torch.Tensor,
    literal: bool = False,
) -> torch.Tensor:
    """
    Weighted cross-entropy that mutes well-transformed tumor pixels.

    Two-class form (default): tumor pixels contribute w * -log p_tumor and
    background pixels 1 * -log p_background. With `literal=True` only the
    tumor term is kept, still averaged over all pixels.
    """
    _check_pred_target(pred, target)
    if w.shape != target.shape:
        raise InvalidInputError(f"Weight map shape {tuple(w.shape)} does not match target {tuple(target.shape)}")
    if w.numel() and (w.min() < 0.1 - 1e-6 or w.max() > 1.0 + 1e-6):
        raise InvalidInputError(f"Weight map values must lie in [0.1, 1], got [{w.min():.4f}, {w.max():.4f}]")

    w = w.detach().to(pred.dtype)
    nll = true_class_nll(pred, target)
    tumor = target == 1
    if literal:
        return torch.where(tumor, w * nll, torch.zeros_like(nll)).mean()
    return (torch.where(tumor, w, torch.ones_like(w)) * nll).mean()
