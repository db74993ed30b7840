"""
Translating source phantoms into the target domain
==================================================

Trains the two-way translator on the benchmark phantoms, with and without
the segmentation decoders, and measures how far the tumour intensity moves
toward its target-domain value. About four minutes on one core.

    python3 notebooks/02_translation.py
"""

from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from cosmos.config import load_run_config
from cosmos.phantom import generate_dataset
from cosmos.translation import train_translation, translate
from cosmos.volume import load_labelmap, load_volume, minmax_normalize

ROOT = Path(__file__).resolve().parents[1]
OUT = Path(__file__).parent / "out"
torch.set_num_threads(1)

cfg = load_run_config(ROOT / "configs" / "benchmark.yaml")
manifest = generate_dataset(cfg.phantom, OUT / "data")


def tissue_means(volumes, labels):
    out = {}
    for k, name in ((1, "VS"), (2, "cochlea")):
        out[name] = float(np.mean([v.data[lab.data == k].mean() for v, lab in zip(volumes, labels)]))
    return out


val_v = [minmax_normalize(load_volume(manifest.resolve(e.volume))) for e in manifest.validation]
val_l = [load_labelmap(manifest.resolve(e.label)) for e in manifest.validation]
src_v = [minmax_normalize(load_volume(manifest.resolve(e.volume))) for e in manifest.source]
src_l = [load_labelmap(manifest.resolve(e.label)) for e in manifest.source]
print("target domain     ", tissue_means(val_v, val_l))
print("source, untouched ", tissue_means(src_v, src_l))

# %%
# The segmentor term keeps the tumour's outline readable in the translated
# image; without it the adversarial term alone has to find the structure.
for seg_weight in (0.0, 1.0):
    tcfg = replace(cfg.translation, weights=replace(cfg.translation.weights, segmentor=seg_weight))
    res = train_translation(manifest, tcfg)
    translated = [translate(res.models.g_s2t, v) for v in src_v]
    print(f"translated, segmentor weight {seg_weight}:", tissue_means(translated, src_l))
