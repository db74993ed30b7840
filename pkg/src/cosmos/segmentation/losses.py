"""Dice + cross-entropy segmentation loss with optional deep supervision."""

from __future__ import annotations

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5
FOREGROUND = (1, 2)


def _check_target(target: torch.Tensor, n_classes: int) -> torch.Tensor:
    if target.dim() == 5:
        target = target[:, 0]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
        raise ValueError(f"target holds classes outside 0..{n_classes - 1}")
    return target.long()


def one_hot(target: torch.Tensor, n_classes: int, dtype) -> torch.Tensor:
    return F.one_hot(target, n_classes).movedim(-1, 1).to(dtype)


def soft_dice_loss(probs: torch.Tensor, target_onehot: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - soft Dice over the whole batch, averaged over the foreground
    classes present in the target.

    An absent class would contribute eps / (sum p + eps), whose gradient
    grows without bound as the predicted mass shrinks; on small structures
    that collapses the class before it is ever learned. With no foreground
    at all the term is zero.
    """
    dims = (0,) + tuple(range(2, probs.dim()))
    inter = (probs * target_onehot).sum(dims)
    ref = target_onehot.sum(dims)
    dsc = (2 * inter + eps) / (probs.sum(dims) + ref + eps)
    present = [c for c in FOREGROUND if ref[c] > 0]
    if not present:
        return probs.sum() * 0.0
    return 1.0 - dsc[present].mean()


def cross_entropy_from_probs(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Voxel-mean negative log-likelihood of the true class."""
    p = probs.gather(1, target.unsqueeze(1)).clamp_min(1e-12)
    return -p.log().mean()


def seg_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft Dice (foreground classes, ε=1e-5) plus cross-entropy.

    ``probs`` is (N, C, D, H, W) class probabilities, ``target`` (N, D, H, W)
    integer labels.
    """
    target = _check_target(target, probs.shape[1])
    if probs.shape[2:] != target.shape[1:] or probs.shape[0] != target.shape[0]:
        raise ValueError(f"prediction {tuple(probs.shape)} and target {tuple(target.shape)} do not match")
    oh = one_hot(target, probs.shape[1], probs.dtype)
    return soft_dice_loss(probs, oh) + cross_entropy_from_probs(probs, target)


def seg_loss_from_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    target = _check_target(target, logits.shape[1])
    oh = one_hot(target, logits.shape[1], logits.dtype)
    return soft_dice_loss(torch.softmax(logits, 1), oh) + F.cross_entropy(logits, target)


def deep_supervision_weights(n: int) -> list[float]:
    w = [0.5 ** i for i in range(n)]
    s = sum(w)
    return [x / s for x in w]


def downsample_target(target: torch.Tensor, shape) -> torch.Tensor:
    """Nearest-neighbour subsampling of an integer label batch to ``shape``."""
    if tuple(target.shape[-3:]) == tuple(shape):
        return target
    steps = [n // m for n, m in zip(target.shape[-3:], shape)]
    return target[..., ::steps[0], ::steps[1], ::steps[2]]


def deep_supervision_loss(outputs, target: torch.Tensor, from_logits: bool = True) -> torch.Tensor:
    """Weighted sum over scales (weights 1, 1/2, 1/4, ... normalised to 1)."""
    if isinstance(outputs, torch.Tensor):
        outputs = [outputs]
    target = _check_target(target, outputs[0].shape[1])
    fn = seg_loss_from_logits if from_logits else seg_loss
    total = 0.0
    for w, out in zip(deep_supervision_weights(len(outputs)), outputs):
        total = total + w * fn(out, downsample_target(target, out.shape[2:]))
    return total
