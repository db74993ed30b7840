"""
Phantom domains
===============

Generates the default benchmark dataset and looks at what separates the two
domains: the same anatomy, a different intensity for the tumour.

Run from the repository root::

    python3 notebooks/01_phantoms.py

Figures land in ``notebooks/out/``.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from cosmos.phantom import PhantomConfig, generate_dataset
from cosmos.volume import load_labelmap, load_volume, minmax_normalize

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# %%
# Eight source, eight target and four validation cases, 32x48x48 at 1 mm.
manifest = generate_dataset(PhantomConfig(seed=0), OUT / "data")
print(f"{manifest.n_source} source / {manifest.n_target} target / {len(manifest.validation)} validation")

# %%
# One source case and the validation case next to it, through the tumour.
src = manifest.source[0]
val = manifest.validation[0]
vs_src, lab_src = load_volume(manifest.resolve(src.volume)), load_labelmap(manifest.resolve(src.label))
vs_val, lab_val = load_volume(manifest.resolve(val.volume)), load_labelmap(manifest.resolve(val.label))


def tumour_slice(lab):
    counts = (lab.data == 1).sum(axis=(1, 2))
    return int(np.argmax(counts))


fig, axes = plt.subplots(2, 2, figsize=(7, 7))
for row, (v, lab, name) in enumerate([(vs_src, lab_src, "source"), (vs_val, lab_val, "target")]):
    z = tumour_slice(lab)
    axes[row, 0].imshow(v.data[z], cmap="gray")
    axes[row, 0].set_title(f"{name}, slice {z}")
    axes[row, 1].imshow(lab.data[z], cmap="viridis", vmin=0, vmax=2)
    axes[row, 1].set_title("labels (1 VS, 2 cochlea)")
for ax in axes.ravel():
    ax.axis("off")
fig.tight_layout()
fig.savefig(OUT / "phantom_slices.png", dpi=100)

# %%
# Per-tissue means after min-max scaling, which is what every network sees.
# The tumour flips from brighter than the head to darker; the cochlea stays
# at the top of the range in both domains.
for v, lab, name in [(vs_src, lab_src, "source"), (vs_val, lab_val, "target")]:
    x = minmax_normalize(v).data
    means = {t: float(x[lab.data == k].mean()) for k, t in ((1, "VS"), (2, "cochlea"))}
    head = float(x[(lab.data == 0) & (x > 0.2)].mean())
    print(f"{name:7s} head {head:.2f}  VS {means['VS']:.2f}  cochlea {means['cochlea']:.2f}")
