"""Sliding-window inference, flip TTA, fold ensembling and VS post-processing."""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np
import torch
from scipy import ndimage

from ..volume import LabelMap, Volume

FLIP_AXES = [tuple(ax for ax, on in zip((2, 3, 4), mask) if on) for mask in itertools.product((0, 1), repeat=3)]


@lru_cache(maxsize=8)
def gaussian_importance(patch_shape: tuple[int, int, int], sigma_scale: float = 0.125) -> np.ndarray:
    """Gaussian window peaking at the patch centre, sigma = patch/8 per axis."""
    tmp = np.zeros(patch_shape)
    tmp[tuple(p // 2 for p in patch_shape)] = 1.0
    g = ndimage.gaussian_filter(tmp, [p * sigma_scale for p in patch_shape], mode="constant", cval=0)
    g = g / g.max()
    # zero weights would leave border voxels undefined
    g[g == 0] = g[g > 0].min()
    return g.astype(np.float32)


def window_starts(size: int, patch: int, overlap: float = 0.5) -> list[int]:
    if size <= patch:
        return [0]
    step = max(1, int(patch * (1 - overlap)))
    n = int(np.ceil((size - patch) / step)) + 1
    return [int(round(x)) for x in np.linspace(0, size - patch, n)]


def _logits(model, x: torch.Tensor) -> torch.Tensor:
    out = model(x)
    return out[0] if isinstance(out, (list, tuple)) else out


def tta_variants(model, x: torch.Tensor, tta: bool = True) -> list[torch.Tensor]:
    """Softmax outputs for each flip of ``x``, flipped back onto the input grid."""
    flips = FLIP_AXES if tta else [()]
    batch = torch.cat([torch.flip(x, f) if f else x for f in flips])
    probs = torch.softmax(_logits(model, batch), dim=1)
    n = x.shape[0]
    return [torch.flip(probs[i * n:(i + 1) * n], f) if f else probs[i * n:(i + 1) * n]
            for i, f in enumerate(flips)]


@torch.no_grad()
def sliding_window_probs(model, data: np.ndarray, patch_shape, tta: bool = False, overlap: float = 0.5,
                         batch_windows: int = 4) -> np.ndarray:
    """Per-class probabilities (C, Z, Y, X) for one preprocessed volume."""
    was_training = model.training
    model.eval()
    patch_shape = tuple(patch_shape)
    divisor = getattr(getattr(model, "config", None), "divisor", (1, 1, 1))
    # pad to at least the patch and to a multiple the network can pool
    padded = [max(n, p) for n, p in zip(data.shape, patch_shape)]
    padded = [int(np.ceil(n / d) * d) for n, d in zip(padded, divisor)]
    pad = [(0, P - n) for n, P in zip(data.shape, padded)]
    x = np.pad(data, pad, mode="constant") if any(p[1] for p in pad) else data
    starts = [window_starts(n, p, overlap) for n, p in zip(x.shape, patch_shape)]
    g = torch.from_numpy(gaussian_importance(patch_shape))
    acc = None
    weight = torch.zeros(x.shape)
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    windows = list(itertools.product(*starts))
    for i in range(0, len(windows), batch_windows):
        chunk = windows[i:i + batch_windows]
        sl = [tuple(slice(s, s + p) for s, p in zip(w, patch_shape)) for w in chunk]
        batch = torch.stack([xt[s] for s in sl])[:, None]
        variants = tta_variants(model, batch, tta)
        # float64 sums of up to 8 float32 values are exact, so identical
        # variants average back to themselves bit for bit
        probs = torch.stack(variants).double().mean(0).float()
        if acc is None:
            acc = torch.zeros((probs.shape[1],) + x.shape)
        for j, s in enumerate(sl):
            acc[(slice(None),) + s] += probs[j] * g
            weight[s] += g
    model.train(was_training)
    out = (acc / weight).numpy()
    return out[(slice(None),) + tuple(slice(0, n) for n in data.shape)]


def predict(models, v: Volume, tta: bool = True, overlap: float = 0.5) -> tuple[LabelMap, np.ndarray]:
    """Fold-ensembled prediction: mean softmax over models, then argmax."""
    if not models:
        raise ValueError("predict needs at least one model")
    probs = None
    for m in models:
        p = sliding_window_probs(m, v.data, m.config.patch_shape, tta=tta, overlap=overlap)
        probs = p if probs is None else probs + p
    probs = probs / len(models)
    return LabelMap(probs.argmax(0).astype(np.uint8), v.spacing, v.id), probs.astype(np.float32)


def postprocess_vs(lm: LabelMap) -> LabelMap:
    """Keep only the largest 26-connected VS component; cochlea is untouched.

    Ties go to the component whose first voxel in C order comes first, which
    is the lowest label ``ndimage.label`` assigns.
    """
    vs = lm.data == 1
    comps, n = ndimage.label(vs, structure=np.ones((3, 3, 3), dtype=bool))
    if n <= 1:
        return lm.with_data(lm.data.copy())
    sizes = np.bincount(comps.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    out = lm.data.copy()
    out[(comps > 0) & (comps != keep)] = 0
    return lm.with_data(out)
