"""Patch-based training of the 3D segmentation network, one fold at a time."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from ..checkpoint import load_checkpoint, save_checkpoint, seed_everything
from ..metrics import dice
from ..volume import LabelMap, Volume, crop_or_pad_array, resample, zscore_normalize
from .inference import predict
from .losses import deep_supervision_loss
from .unet import SegConfig, SegUNet

log = logging.getLogger(__name__)


class SegTrainingError(RuntimeError):
    pass


def preprocess(v: Volume, cfg: SegConfig) -> Volume:
    """Resample to the configured spacing (if any), then z-score the whole volume."""
    if cfg.target_spacing is not None:
        v = resample(v, cfg.target_spacing)
    return zscore_normalize(v)


def preprocess_label(lm: LabelMap, cfg: SegConfig) -> LabelMap:
    return resample(lm, cfg.target_spacing) if cfg.target_spacing is not None else lm


def fold_split(n_cases: int, folds: int, fold: int, seed: int = 0) -> tuple[list[int], list[int]]:
    """Seeded k-fold split. With a single fold the validation set is the training set."""
    if fold < 0 or fold >= folds:
        raise ValueError(f"fold {fold} out of range for {folds} folds")
    if n_cases < folds:
        raise ValueError(f"{folds} folds need at least {folds} cases, got {n_cases}")
    if folds == 1:
        idx = list(range(n_cases))
        return idx, idx
    order = np.random.default_rng(seed).permutation(n_cases)
    val = sorted(int(i) for i in order[fold::folds])
    train = sorted(int(i) for i in order if i not in set(val))
    return train, val


class PatchSampler:
    """Draws (image, label) patches; a ``foreground_ratio`` share is centred on
    a random foreground voxel of a randomly chosen present class."""

    def __init__(self, cases, cfg: SegConfig, rng: np.random.Generator, case_weights=None):
        self.images = [v.data for v, _ in cases]
        self.labels = [lm.data for _, lm in cases]
        self.cfg = cfg
        self.rng = rng
        w = np.ones(len(cases)) if case_weights is None else np.asarray(case_weights, dtype=np.float64)
        self.p = w / w.sum()
        self.fg = [{c: np.argwhere(lab == c) for c in (1, 2) if (lab == c).any()} for lab in self.labels]

    def _center(self, i: int, foreground: bool):
        shape = self.images[i].shape
        if foreground and self.fg[i]:
            classes = sorted(self.fg[i])
            coords = self.fg[i][classes[self.rng.integers(len(classes))]]
            c = coords[self.rng.integers(len(coords))]
            jitter = [self.rng.integers(-(p // 4), p // 4 + 1) for p in self.cfg.patch_shape]
            return [int(a + j) for a, j in zip(c, jitter)]
        # uniform over centres that keep the patch inside the volume
        return [int(self.rng.integers(p // 2, n - (p - p // 2) + 1)) if n >= p else n // 2
                for n, p in zip(shape, self.cfg.patch_shape)]

    def sample(self, n: int):
        xs, ys = [], []
        for _ in range(n):
            i = int(self.rng.choice(len(self.images), p=self.p))
            fg = self.rng.random() < self.cfg.foreground_ratio
            c = self._center(i, fg)
            x = crop_or_pad_array(self.images[i], self.cfg.patch_shape, c)
            y = crop_or_pad_array(self.labels[i], self.cfg.patch_shape, c)
            x, y = augment(x, y, self.cfg, self.rng)
            xs.append(x)
            ys.append(y)
        return (torch.from_numpy(np.stack(xs)[:, None].astype(np.float32)),
                torch.from_numpy(np.stack(ys).astype(np.int64)))


def augment(x: np.ndarray, y: np.ndarray, cfg: SegConfig, rng: np.random.Generator):
    if cfg.augment_rotation_deg > 0 and rng.random() < cfg.augment_rotation_prob:
        angle = rng.uniform(-cfg.augment_rotation_deg, cfg.augment_rotation_deg)
        x = ndimage.rotate(x, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
        y = ndimage.rotate(y, angle, axes=(1, 2), reshape=False, order=0, mode="constant", cval=0)
    if cfg.augment_flips:
        for ax in range(3):
            if rng.random() < 0.5:
                x, y = np.flip(x, ax), np.flip(y, ax)
    lo, hi = cfg.augment_scale
    if hi > lo:
        x = x * rng.uniform(lo, hi)
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def mean_foreground_dice(models, cases) -> float:
    scores = []
    for v, lm in cases:
        pred, _ = predict(models, v, tta=False)
        scores.append(np.mean([dice(pred, lm, c) for c in (1, 2)]))
    return float(np.mean(scores))


@dataclass
class FoldResult:
    model: SegUNet
    best_dice: float
    best_epoch: int
    history: list[dict]


def train_segmentation(train_cases, cfg: SegConfig, fold: int = 0, case_weights=None, log_path=None,
                       seed: int | None = None) -> FoldResult:
    """Train one fold on preprocessed ``(Volume, LabelMap)`` pairs.

    One epoch is ``iterations_per_epoch`` optimiser steps. SGD with
    Nesterov momentum and polynomial learning-rate decay; the returned model
    is the epoch with the best validation mean foreground Dice.
    """
    seed = cfg.seed if seed is None else seed
    train_idx, val_idx = fold_split(len(train_cases), cfg.folds, fold, seed)
    seed_everything(seed * 1000 + fold, cfg.deterministic)
    rng = np.random.default_rng([seed, fold])
    model = SegUNet(cfg)
    tr = [train_cases[i] for i in train_idx]
    va = [train_cases[i] for i in val_idx]
    weights = None if case_weights is None else [case_weights[i] for i in train_idx]
    sampler = PatchSampler(tr, cfg, rng, weights)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, nesterov=True,
                          weight_decay=cfg.weight_decay)
    steps = cfg.iterations_per_epoch
    total_steps = steps * cfg.epochs
    best = (-1.0, -1, None)
    history = []
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")
    it = 0
    for epoch in range(cfg.epochs):
        model.train()
        running = 0.0
        for _ in range(steps):
            for g in opt.param_groups:
                g["lr"] = cfg.lr * (1 - it / total_steps) ** 0.9
            x, y = sampler.sample(cfg.batch_size)
            loss = deep_supervision_loss(model(x), y)
            if not torch.isfinite(loss):
                raise SegTrainingError(f"non-finite segmentation loss at fold {fold} epoch {epoch} step {it}: "
                                       f"{float(loss)}; input range [{float(x.min()):.3g}, {float(x.max()):.3g}]")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 12.0)
            opt.step()
            running += float(loss.detach()) / steps
            it += 1
        record = {"fold": fold, "epoch": epoch, "loss": running}
        if (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1:
            record["val_dice"] = mean_foreground_dice([model], va)
            if record["val_dice"] > best[0]:
                best = (record["val_dice"], epoch, {k: t.clone() for k, t in model.state_dict().items()})
        history.append(record)
        log.info("seg fold %d epoch %d: %s", fold, epoch, record)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(record) + "\n")
    model.load_state_dict(best[2])
    model.eval()
    return FoldResult(model, best[0], best[1], history)


def save_seg_model(path, model: SegUNet, epoch: int | None = None, extra: dict | None = None) -> Path:
    return save_checkpoint(path, "segmentation", {"seg": model.config.to_dict()},
                           {"model": model.state_dict()}, None, epoch, extra)


def load_seg_model(path) -> SegUNet:
    ck = load_checkpoint(path)
    if ck["kind"] != "segmentation":
        raise ValueError(f"{path} holds a {ck['kind']!r} checkpoint, not a segmentation model")
    model = SegUNet(SegConfig.from_dict(ck["config"]["seg"]))
    model.load_state_dict(ck["weights"]["model"])
    model.eval()
    return model


def train_folds(train_cases, cfg: SegConfig, out_dir=None, case_weights=None, seed: int | None = None):
    """Train every fold; returns the list of best fold models (the ensemble)."""
    models = []
    for fold in range(cfg.folds):
        log_path = Path(out_dir) / f"fold_{fold}_log.jsonl" if out_dir is not None else None
        res = train_segmentation(train_cases, cfg, fold, case_weights, log_path, seed)
        if out_dir is not None:
            save_seg_model(Path(out_dir) / f"fold_{fold}.pt", res.model, res.best_epoch,
                           {"best_val_dice": res.best_dice})
        models.append(res.model)
    return models
