"""Config-driven 3D U-Net with deep supervision (stands in for a self-configured nnU-Net)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn

N_CLASSES = 3


@dataclass
class SegConfig:
    patch_shape: tuple[int, int, int] = (16, 32, 32)
    base_channels: int = 16
    max_channels: int = 320
    n_downsamplings: int = 3
    deep_supervision: bool = True
    folds: int = 2
    epochs: int = 10
    # fixed optimiser steps per epoch, independent of the case count
    iterations_per_epoch: int = 32
    batch_size: int = 2
    lr: float = 1e-2
    momentum: float = 0.95
    weight_decay: float = 3e-5
    foreground_ratio: float = 2.0 / 3.0
    augment_flips: bool = True
    augment_rotation_deg: float = 15.0
    augment_rotation_prob: float = 0.2
    augment_scale: tuple[float, float] = (0.9, 1.1)
    target_spacing: tuple[float, float, float] | None = None
    val_every: int = 1
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        self.patch_shape = tuple(int(p) for p in self.patch_shape)
        self.augment_scale = tuple(self.augment_scale)
        if self.target_spacing is not None:
            self.target_spacing = tuple(float(s) for s in self.target_spacing)
        if len(self.patch_shape) != 3 or min(self.patch_shape) < 1:
            raise ValueError(f"patch_shape must be 3 positive ints, got {self.patch_shape}")
        if self.folds < 1:
            raise ValueError("folds must be >= 1")
        if self.iterations_per_epoch < 1 or self.epochs < 1:
            raise ValueError("epochs and iterations_per_epoch must be >= 1")
        if self.n_downsamplings < 0:
            raise ValueError("n_downsamplings must be >= 0")

    @classmethod
    def full_scale(cls, **overrides) -> "SegConfig":
        """Settings for real MRI at GPU budgets: 40x224x224 patches, 6 downsamplings, 5 folds."""
        base = dict(patch_shape=(40, 224, 224), base_channels=32, n_downsamplings=6, folds=5, epochs=200,
                    iterations_per_epoch=250, momentum=0.99,
                    target_spacing=(1.5, 0.410, 0.410))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown seg config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def strides(self) -> list[tuple[int, int, int]]:
        return pool_strides(self.patch_shape, self.n_downsamplings)

    @property
    def divisor(self) -> tuple[int, int, int]:
        """Per-axis factor the (padded) input must be divisible by."""
        d = [1, 1, 1]
        for s in self.strides:
            d = [a * b for a, b in zip(d, s)]
        return tuple(d)


def pool_strides(patch_shape, n_down: int) -> list[tuple[int, int, int]]:
    """Per-level strides: an axis is halved while it stays even and at least 4 voxels.

    Anisotropic patches like (40, 224, 224) stop pooling along z early, the
    way nnU-Net plans its pooling.
    """
    size = list(patch_shape)
    strides = []
    for _ in range(n_down):
        s = tuple(2 if (n % 2 == 0 and n >= 4) else 1 for n in size)
        size = [n // k for n, k in zip(size, s)]
        strides.append(s)
    return strides


def conv_block(cin: int, cout: int, stride=1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01),
    )


def _he_init(m: nn.Module) -> None:
    # He-normal for leaky ReLU; PyTorch's default conv init is several times
    # smaller and leaves tiny classes stuck for hundreds of steps
    if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
        nn.init.kaiming_normal_(m.weight, a=1e-2)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class SegUNet(nn.Module):
    """3D U-Net. In training mode with deep supervision it returns a list of
    logits ordered from full resolution downwards; otherwise a single tensor."""

    def __init__(self, config: SegConfig):
        super().__init__()
        self.config = config
        strides = config.strides
        widths = [min(config.base_channels * 2 ** i, config.max_channels) for i in range(len(strides) + 1)]
        self.encoder = nn.ModuleList([conv_block(1, widths[0])])
        for i, s in enumerate(strides):
            self.encoder.append(conv_block(widths[i], widths[i + 1], stride=s))
        self.ups = nn.ModuleList()
        self.decoder = nn.ModuleList()
        self.heads = nn.ModuleList()
        for i in reversed(range(len(strides))):
            s = strides[i]
            self.ups.append(nn.ConvTranspose3d(widths[i + 1], widths[i], s, stride=s))
            self.decoder.append(conv_block(2 * widths[i], widths[i]))
            self.heads.append(nn.Conv3d(widths[i], N_CLASSES, 1))
        self.apply(_he_init)

    def forward(self, x):
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
        outs = []
        x = skips.pop()
        for up, block, head in zip(self.ups, self.decoder, self.heads):
            x = block(torch.cat([up(x), skips.pop()], dim=1))
            if self.config.deep_supervision and self.training:
                outs.append(head(x))
        if self.config.deep_supervision and self.training:
            return outs[::-1]
        return self.heads[-1](x)
