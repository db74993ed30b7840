"""2D generators with a shared encoder and two decoders, and PatchGAN critics."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2),
    )


class Encoder(nn.Module):
    def __init__(self, in_channels: int, widths: list[int]):
        super().__init__()
        self.blocks = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.blocks.append(conv_block(cin, w))
            cin = w

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Mirror of the encoder.

    Instance norm strips absolute intensity from every feature map, and a
    translator has to reproduce intensities, so the raw input also goes
    through a small per-pixel branch (1x1 convolutions, no normalisation)
    whose output joins the last feature map in front of the head. That
    branch alone can express a voxelwise intensity map; the U-shaped path
    adds context.
    """

    def __init__(self, widths: list[int], out_channels: int, raw_channels: int = 1, pixel_channels: int = 8):
        super().__init__()
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for hi, lo in zip(widths[::-1][:-1], widths[::-1][1:]):
            self.ups.append(nn.ConvTranspose2d(hi, lo, 2, stride=2))
            self.blocks.append(conv_block(2 * lo, lo))
        self.pixel = nn.Sequential(
            nn.Conv2d(raw_channels, pixel_channels, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(pixel_channels, pixel_channels, 1), nn.LeakyReLU(0.2),
        )
        self.head = nn.Conv2d(widths[0] + pixel_channels, out_channels, 1)

    def forward(self, feats: list[torch.Tensor], raw: torch.Tensor) -> torch.Tensor:
        x = feats[-1]
        for up, block, skip in zip(self.ups, self.blocks, feats[-2::-1]):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(torch.cat([x, self.pixel(raw)], dim=1))


class Generator(nn.Module):
    """U-shaped generator: ``C = translation_decoder ∘ encoder`` and
    ``Seg = segmentation_decoder ∘ encoder`` share one encoder instance.

    Inputs are (N, 1, H, W) slices in [0, 1] with H and W divisible by
    ``2 ** (levels - 1)``. ``forward`` returns the translated slice (sigmoid
    output), ``segment`` the class logits.
    """

    def __init__(self, base_channels: int = 16, levels: int = 3, n_classes: int = 3):
        super().__init__()
        widths = [base_channels * 2 ** i for i in range(levels)]
        self.levels = levels
        self.encoder = Encoder(1, widths)
        self.translation_decoder = Decoder(widths, 1)
        self.segmentation_decoder = Decoder(widths, n_classes)

    @property
    def multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def forward(self, x):
        return torch.sigmoid(self.translation_decoder(self.encoder(x), x))

    def segment(self, x):
        return self.segmentation_decoder(self.encoder(x), x)

    def translate_and_segment(self, x):
        feats = self.encoder(x)
        return torch.sigmoid(self.translation_decoder(feats, x)), self.segmentation_decoder(feats, x)


class PatchDiscriminator(nn.Module):
    """PatchGAN critic emitting an (N, 1, h, w) grid of raw real/fake scores."""

    def __init__(self, base_channels: int = 16, n_layers: int = 3):
        super().__init__()

        def norm_layer(c):
            return nn.InstanceNorm2d(c, affine=True)

        layers: list[nn.Module] = [nn.Conv2d(1, base_channels, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        c = base_channels
        for i in range(1, n_layers):
            nc = base_channels * min(2 ** i, 8)
            layers += [nn.Conv2d(c, nc, 4, stride=2, padding=1), norm_layer(nc), nn.LeakyReLU(0.2)]
            c = nc
        nc = base_channels * min(2 ** n_layers, 8)
        layers += [nn.Conv2d(c, nc, 4, stride=1, padding=1), norm_layer(nc),
                   nn.LeakyReLU(0.2), nn.Conv2d(nc, 1, 4, stride=1, padding=1)]
        self.net = nn.Sequential(*layers)
        self.n_layers = n_layers

    def forward(self, x):
        return self.net(x)

    def grid_shape(self, h: int, w: int) -> tuple[int, int]:
        for _ in range(self.n_layers):
            h, w = h // 2, w // 2
        return h - 2, w - 2


class TranslationModels(nn.Module):
    """The two generators (S→T, T→S) and two discriminators (source, target)."""

    def __init__(self, base_channels: int = 16, levels: int = 3, disc_channels: int | None = None,
                 disc_layers: int = 3):
        super().__init__()
        disc_channels = disc_channels or base_channels
        self.g_s2t = Generator(base_channels, levels)
        self.g_t2s = Generator(base_channels, levels)
        self.d_s = PatchDiscriminator(disc_channels, disc_layers)
        self.d_t = PatchDiscriminator(disc_channels, disc_layers)
        self.topology = {"base_channels": base_channels, "levels": levels,
                         "disc_channels": disc_channels, "disc_layers": disc_layers}

    def generator_parameters(self):
        return list(self.g_s2t.parameters()) + list(self.g_t2s.parameters())

    def discriminator_parameters(self):
        return list(self.d_s.parameters()) + list(self.d_t.parameters())
