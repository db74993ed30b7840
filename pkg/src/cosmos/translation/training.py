"""Training loop and inference for the target-aware translation network."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..checkpoint import load_checkpoint, save_checkpoint, seed_everything
from ..volume import (CaseEntry, DatasetManifest, Volume, load_labelmap, load_volume, minmax_normalize,
                      save_volume)
from .losses import TranslationLossWeights, adversarial_discriminator_term, generator_objective
from .networks import Generator, TranslationModels

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


@dataclass
class TranslationConfig:
    base_channels: int = 16
    levels: int = 3
    disc_layers: int = 3
    epochs: int = 50
    steps_per_epoch: int | None = None
    batch_size: int = 4
    seg_batch_size: int = 4
    lr: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lr_decay: float = 0.95
    weights: TranslationLossWeights = field(default_factory=TranslationLossWeights)
    reverse_start: int = 5
    bg_slice_ratio: float = 0.25
    identity_warmup_steps: int = 200
    warmup_lr: float = 1e-3
    adv_mode: str = "lsgan"
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = TranslationLossWeights(**self.weights)
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TranslationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown translation config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SliceSet:
    """Axial slices of min-max normalised volumes, (N, 1, H, W)."""

    images: torch.Tensor
    labels: torch.Tensor | None = None

    @property
    def foreground(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(len(self.images), dtype=bool)
        return (self.labels > 0).flatten(1).any(dim=1).numpy()


def _pad_to_multiple(x: torch.Tensor, m: int, mode="replicate"):
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x, (h, w)
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


def volume_slices(volumes: list[Volume], labels=None, multiple: int = 4) -> SliceSet:
    imgs, labs = [], []
    for i, v in enumerate(volumes):
        x = torch.from_numpy(minmax_normalize(v).data[:, None])
        x, _ = _pad_to_multiple(x, multiple)
        imgs.append(x)
        if labels is not None:
            y = torch.from_numpy(labels[i].data[:, None].astype(np.int64))
            y, _ = _pad_to_multiple(y.float(), multiple, mode="constant")
            labs.append(y.long())
    return SliceSet(torch.cat(imgs), torch.cat(labs) if labels is not None else None)


def _check_finite(terms: dict, epoch: int, step: int) -> None:
    bad = {k: float(v) for k, v in terms.items() if not math.isfinite(float(v))}
    if bad:
        raise TrainingDivergedError(f"non-finite translation loss at epoch {epoch} step {step}: {bad}; "
                                    "lower the learning rate or check input normalisation")


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def identity_warmup(models: TranslationModels, sources: SliceSet, targets: SliceSet, steps: int,
                    batch_size: int, lr: float, rng: np.random.Generator) -> float:
    """Nudge both translators towards the identity map before adversarial training."""
    if steps <= 0:
        return float("nan")
    pool = torch.cat([sources.images, targets.images])
    params = list(models.g_s2t.encoder.parameters()) + list(models.g_s2t.translation_decoder.parameters()) \
        + list(models.g_t2s.encoder.parameters()) + list(models.g_t2s.translation_decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    loss = torch.zeros(())
    for _ in range(steps):
        x = pool[rng.integers(0, len(pool), size=batch_size)]
        loss = (models.g_s2t(x) - x).abs().mean() + (models.g_t2s(x) - x).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return float(loss.detach()) / 2.0


def _sample_seg_batch(sources: SliceSet, n: int, bg_ratio: float, rng: np.random.Generator):
    fg = np.flatnonzero(sources.foreground)
    if len(fg) == 0:
        return None, None
    pick_bg = rng.random(n) < bg_ratio
    idx = np.where(pick_bg, rng.integers(0, len(sources.images), size=n), fg[rng.integers(0, len(fg), size=n)])
    return sources.images[idx], sources.labels[idx]


@dataclass
class TranslationResult:
    models: TranslationModels
    history: list[dict]
    out_dir: Path | None = None


def build_models(cfg: TranslationConfig) -> TranslationModels:
    return TranslationModels(cfg.base_channels, cfg.levels, disc_layers=cfg.disc_layers)


def train_translation_on_volumes(src_vols, src_labels, tgt_vols, cfg: TranslationConfig,
                                 out_dir=None, on_epoch=None) -> TranslationResult:
    """Identity warm-up, then alternating generator and critic steps.

    ``on_epoch(epoch, models)`` is called after every epoch, e.g. to track
    translated intensities while training.
    """
    seed_everything(cfg.seed, cfg.deterministic)
    rng = np.random.default_rng(cfg.seed)
    models = build_models(cfg)
    mult = 2 ** (cfg.levels - 1)
    sources = volume_slices(src_vols, src_labels, mult)
    targets = volume_slices(tgt_vols, None, mult)
    w = cfg.weights

    warm = identity_warmup(models, sources, targets, cfg.identity_warmup_steps, cfg.batch_size,
                           cfg.warmup_lr, rng)
    log.info("identity warm-up done, L1 %.4f", warm)

    opt_g = torch.optim.Adam(models.generator_parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(models.discriminator_parameters(), lr=cfg.lr, betas=cfg.betas)
    sched_g = torch.optim.lr_scheduler.ExponentialLR(opt_g, cfg.lr_decay)
    sched_d = torch.optim.lr_scheduler.ExponentialLR(opt_d, cfg.lr_decay)
    steps = cfg.steps_per_epoch or max(1, len(sources.images) // cfg.batch_size)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "loss_history.jsonl").write_text("")
    history = []
    critics = [models.d_s, models.d_t]
    for epoch in range(cfg.epochs):
        acc = {k: 0.0 for k in ("cycle", "adversarial", "identity", "segmentor", "total", "discriminator")}
        for step in range(steps):
            x_s = sources.images[rng.integers(0, len(sources.images), size=cfg.batch_size)]
            x_t = targets.images[rng.integers(0, len(targets.images), size=cfg.batch_size)]
            seg_x = seg_y = None
            if w.segmentor > 0:
                seg_x, seg_y = _sample_seg_batch(sources, cfg.seg_batch_size, cfg.bg_slice_ratio, rng)

            _set_requires_grad(critics, False)
            terms = generator_objective(x_s, x_t, models, w, epoch, seg_x, seg_y, cfg.reverse_start, cfg.adv_mode)
            opt_g.zero_grad()
            terms["total"].backward()
            opt_g.step()

            _set_requires_grad(critics, True)
            d_loss = adversarial_discriminator_term(x_s, x_t, terms["fake_t"], terms["fake_s"], models, cfg.adv_mode)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            scalars = {k: float(terms[k].detach()) for k in ("cycle", "adversarial", "identity", "segmentor", "total")}
            scalars["discriminator"] = float(d_loss.detach())
            _check_finite(scalars, epoch, step)
            for k, v in scalars.items():
                acc[k] += v / steps
        record = {"epoch": epoch, **acc, "lr": opt_g.param_groups[0]["lr"]}
        history.append(record)
        sched_g.step()
        sched_d.step()
        log.info("translation epoch %d: %s", epoch, {k: round(v, 4) for k, v in record.items()})
        if out_dir is not None:
            with open(out_dir / "loss_history.jsonl", "a") as f:
                f.write(json.dumps(record) + "\n")
            save_translation_checkpoint(out_dir / "checkpoint.pt", models, cfg, epoch, opt_g, opt_d)
        if on_epoch is not None:
            on_epoch(epoch, models)
    return TranslationResult(models, history, out_dir)


def save_translation_checkpoint(path, models: TranslationModels, cfg: TranslationConfig, epoch: int,
                                opt_g=None, opt_d=None) -> Path:
    weights = {"g_s2t": models.g_s2t.state_dict(), "g_t2s": models.g_t2s.state_dict(),
               "d_s": models.d_s.state_dict(), "d_t": models.d_t.state_dict()}
    optim = {}
    if opt_g is not None:
        optim = {"generators": opt_g.state_dict(), "discriminators": opt_d.state_dict()}
    return save_checkpoint(path, "translation", {"topology": models.topology, "training": cfg.to_dict()},
                           weights, optim, epoch)


def load_translation_models(path) -> TranslationModels:
    ck = load_checkpoint(path)
    if ck["kind"] != "translation":
        raise ValueError(f"{path} holds a {ck['kind']!r} checkpoint, not a translation model")
    models = TranslationModels(**ck["config"]["topology"])
    for name, state in ck["weights"].items():
        getattr(models, name).load_state_dict(state)
    models.eval()
    return models


def train_translation(manifest: DatasetManifest, cfg: TranslationConfig, out_dir=None,
                      on_epoch=None) -> TranslationResult:
    """Train both generators and critics on the manifest's source and target splits."""
    if manifest.n_source < 1 or manifest.n_target < 1:
        raise ValueError("translation training needs at least one source and one target case")
    src_vols = [load_volume(manifest.resolve(e.volume)) for e in manifest.source]
    src_labels = [load_labelmap(manifest.resolve(e.label)) for e in manifest.source]
    tgt_vols = [load_volume(manifest.resolve(e.volume)) for e in manifest.target]
    return train_translation_on_volumes(src_vols, src_labels, tgt_vols, cfg, out_dir, on_epoch)


@torch.no_grad()
def translate(generator: Generator, v: Volume, batch_size: int = 16, tol: float = 1e-6) -> Volume:
    """Apply a 2D translator slice by slice along z to a min-max normalised volume."""
    lo, hi = float(v.data.min()), float(v.data.max())
    if lo < -tol or hi > 1 + tol:
        raise ContractError(f"translate expects intensities in [0, 1], got [{lo:.4g}, {hi:.4g}]")
    was_training = generator.training
    generator.eval()
    x = torch.from_numpy(np.ascontiguousarray(v.data[:, None]))
    x, (h, w) = _pad_to_multiple(x, getattr(generator, "multiple", 4))
    out = torch.cat([generator(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    generator.train(was_training)
    out = out[:, 0, :h, :w].clamp(0.0, 1.0).numpy()
    return v.with_data(out)


def _relative(path: Path, root) -> str:
    try:
        return os.path.relpath(path.resolve(), Path(root).resolve())
    except ValueError:
        return str(path.resolve())


def translate_dataset(models: TranslationModels, manifest: DatasetManifest, out_dir) -> DatasetManifest:
    """Translate every source case to the target contrast and pair it with its
    original label file, copied byte for byte. Returns a manifest whose
    ``pseudo_target`` split lists the new cases."""
    out_dir = Path(out_dir)
    entries = []
    for e in manifest.source:
        if e.label is None:
            raise ValueError(f"source case {e.id!r} has no label; cannot build a labelled pseudo-target case")
        v = minmax_normalize(load_volume(manifest.resolve(e.volume)))
        fake = translate(models.g_s2t, v)
        vpath = out_dir / f"{e.id}_pseudo.nii"
        lpath = out_dir / f"{e.id}_lbl.nii"
        save_volume(fake, vpath)
        out_dir.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(manifest.resolve(e.label), lpath)
        entries.append(CaseEntry(e.id, _relative(vpath, manifest.root), _relative(lpath, manifest.root),
                                 provenance="pseudo-image"))
    return DatasetManifest(source=list(manifest.source), target=list(manifest.target),
                           validation=list(manifest.validation), pseudo_target=entries,
                           root=manifest.root)
