"""Training objective of the target-aware translation network.

All functions take ``models`` exposing ``g_s2t``, ``g_t2s`` (callables mapping a
slice batch to its translation, with a ``segment`` method for the segmentor
path) and ``d_s``, ``d_t`` (callables mapping a slice batch to a score grid).
Batches are (N, 1, H, W) tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5


@dataclass(frozen=True)
class TranslationLossWeights:
    cycle: float = 0.01
    adversarial: float = 0.1
    identity: float = 0.5
    segmentor: float = 1.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


def l1(a, b):
    return (a - b).abs().mean()


def cycle_terms(x_s, x_t, fake_t, fake_s, models):
    return l1(x_s, models.g_t2s(fake_t)) + l1(x_t, models.g_s2t(fake_s))


def cycle_loss(x_s, x_t, models):
    """Mean L1 between each batch and its round trip through both generators."""
    if x_s.numel() == 0 or x_t.numel() == 0:
        raise ValueError("cycle_loss needs non-empty source and target batches")
    return cycle_terms(x_s, x_t, models.g_s2t(x_s), models.g_t2s(x_t), models)


def identity_loss(x_s, x_t, models):
    """Mean L1 change when a generator is fed an image already in its output domain."""
    return l1(x_t, models.g_s2t(x_t)) + l1(x_s, models.g_t2s(x_s))


def _gan_target_loss(scores, real: bool, mode: str):
    if mode == "lsgan":
        return ((scores - (1.0 if real else 0.0)) ** 2).mean()
    if mode == "log":
        target = torch.ones_like(scores) if real else torch.zeros_like(scores)
        return F.binary_cross_entropy_with_logits(scores, target)
    raise ValueError(f"unknown adversarial mode {mode!r}")


def adversarial_generator_term(fake_t, fake_s, models, mode="lsgan"):
    return 0.5 * (_gan_target_loss(models.d_t(fake_t), True, mode)
                  + _gan_target_loss(models.d_s(fake_s), True, mode))


def adversarial_discriminator_term(x_s, x_t, fake_t, fake_s, models, mode="lsgan"):
    fake_t, fake_s = fake_t.detach(), fake_s.detach()
    d_t = 0.5 * (_gan_target_loss(models.d_t(x_t), True, mode) + _gan_target_loss(models.d_t(fake_t), False, mode))
    d_s = 0.5 * (_gan_target_loss(models.d_s(x_s), True, mode) + _gan_target_loss(models.d_s(fake_s), False, mode))
    return 0.5 * (d_t + d_s)


def adversarial_losses(x_s, x_t, models, mode: str = "lsgan"):
    """Return ``(gen_loss, disc_loss)``.

    Least-squares form by default: the critics are pushed to score real
    slices 1 and translated slices 0, the generators to make translated slices
    score 1. Each critic's loss is the average of its real and fake terms and
    both losses average the two domains, so a critic stuck at 0.5 gives 0.25
    for both. ``mode="log"`` swaps in the binary cross-entropy surrogate.
    """
    fake_t, fake_s = models.g_s2t(x_s), models.g_t2s(x_t)
    gen = adversarial_generator_term(fake_t, fake_s, models, mode)
    disc = adversarial_discriminator_term(x_s, x_t, fake_t, fake_s, models, mode)
    return gen, disc


def one_hot(labels, n_classes: int = 3):
    """(N, H, W) or (N, 1, H, W) integer labels -> (N, C, H, W) float one-hot."""
    if labels.dim() == 4:
        labels = labels[:, 0]
    return F.one_hot(labels.long(), n_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def soft_dice(probs, target_onehot, classes=(1, 2), eps: float = DICE_EPS):
    """Soft Dice averaged over the listed classes that occur in the target.

    Sums run over the whole batch. Classes absent from the target are skipped
    so that a VS-only slice is not scored on the cochlea channel.
    """
    dims = tuple(d for d in range(probs.dim()) if d != 1)
    inter = (probs * target_onehot).sum(dims)
    denom = probs.sum(dims) + target_onehot.sum(dims)
    present = target_onehot.sum(dims) > 0
    scores = [(2 * inter[c] + eps) / (denom[c] + eps) for c in classes if present[c]]
    if not scores:
        return probs.new_ones(())
    return torch.stack(scores).mean()


def foreground_slices(y) -> torch.Tensor:
    y = y[:, 0] if y.dim() == 4 else y
    return (y > 0).flatten(1).any(dim=1)


def segmentor_loss(x_s, y_s, models, epoch: int, reverse_start: int = 5):
    """Segmentor objective on labelled source slices.

    ``1 - DSC(y, Seg_s2t(x))`` always, plus ``1 - DSC(y, Seg_t2s(C_s2t(x)))``
    once ``epoch >= reverse_start`` (epochs are 0-based). Slices without any
    foreground are dropped before the Dice is computed; a batch with no
    foreground returns a constant zero.
    """
    if y_s is None:
        raise ValueError("segmentor_loss needs source label slices")
    keep = foreground_slices(y_s)
    if not bool(keep.any()):
        return x_s.new_zeros(())
    x, y = x_s[keep], one_hot(y_s[keep]).to(x_s.dtype)
    loss = 1.0 - soft_dice(torch.softmax(models.g_s2t.segment(x), dim=1), y)
    if epoch >= reverse_start:
        fake_t = models.g_s2t(x)
        loss = loss + 1.0 - soft_dice(torch.softmax(models.g_t2s.segment(fake_t), dim=1), y)
    return loss


def generator_objective(x_s, x_t, models, weights: TranslationLossWeights, epoch: int,
                        seg_x=None, seg_y=None, reverse_start: int = 5, mode: str = "lsgan"):
    """Weighted sum of the four generator terms, sharing forward passes.

    Returns a dict with each unweighted term, ``total`` and the translated
    batches (``fake_t``, ``fake_s``) for the critic update.
    """
    fake_t, fake_s = models.g_s2t(x_s), models.g_t2s(x_t)
    zero = x_s.new_zeros(())
    terms = {
        "cycle": cycle_terms(x_s, x_t, fake_t, fake_s, models) if weights.cycle > 0 else zero,
        "adversarial": adversarial_generator_term(fake_t, fake_s, models, mode) if weights.adversarial > 0 else zero,
        "identity": identity_loss(x_s, x_t, models) if weights.identity > 0 else zero,
        "segmentor": (segmentor_loss(seg_x, seg_y, models, epoch, reverse_start)
                      if weights.segmentor > 0 and seg_x is not None else zero),
    }
    terms["total"] = (weights.cycle * terms["cycle"] + weights.adversarial * terms["adversarial"]
                      + weights.identity * terms["identity"] + weights.segmentor * terms["segmentor"])
    terms["fake_t"], terms["fake_s"] = fake_t, fake_s
    return terms
