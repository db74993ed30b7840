import json
from dataclasses import replace

import numpy as np
import pytest

from cosmos.phantom import (SOURCE_CONTRAST, TARGET_CONTRAST, ContrastMap, PhantomConfig, PhantomConfigError,
                            case_seed, generate_dataset, render_case)
from cosmos.volume import load_labelmap


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*.nii"))}


def test_generation_is_byte_deterministic(tmp_path):
    cfg = PhantomConfig(n_source=2, n_target=2, n_validation=1, seed=7)
    generate_dataset(cfg, tmp_path / "a")
    generate_dataset(cfg, tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert len(a) == 2 * 2 + 2 + 1 * 2
    assert a == b
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_every_label_has_both_classes(small_dataset):
    _, m = small_dataset
    for e in m.source + m.validation:
        counts = load_labelmap(m.resolve(e.label)).counts()
        assert counts[1] >= 1 and counts[2] >= 1


def test_target_cases_have_no_labels_and_are_unpaired(small_dataset):
    root, m = small_dataset
    assert all(e.label is None for e in m.target)
    report = json.loads((root / "generation_report.json").read_text())
    seeds = {}
    for c in report["cases"]:
        seeds.setdefault(c["split"], set()).add(c["anatomy_seed"])
    assert not seeds["source"] & seeds["target"]
    assert not seeds["source"] & seeds["validation"]


def test_case_seed_is_order_independent():
    assert len({case_seed(5, i) for i in range(64)}) == 64
    assert case_seed(5, 3) == 5 ^ 3


def test_same_anatomy_both_contrasts():
    cfg = PhantomConfig()
    vs, ls = render_case(42, SOURCE_CONTRAST, cfg)
    vt, lt = render_case(42, TARGET_CONTRAST, cfg)
    assert np.array_equal(ls.data, lt.data)
    hs, _ = np.histogram(vs.data, bins=32, range=(0, 300))
    ht, _ = np.histogram(vt.data, bins=32, range=(0, 300))
    assert not np.array_equal(hs, ht)
    # the VS is the brightest structure in the source and darker than head in the target
    assert vs.data[ls.data == 1].mean() > vs.data[(ls.data == 0) & (vs.data > 50)].mean()
    assert vt.data[lt.data == 1].mean() < vt.data[(lt.data == 0) & (vt.data > 50)].mean()


def test_noiseless_render_hits_tissue_means():
    quiet = ContrastMap("quiet", dict(SOURCE_CONTRAST.means), {k: 0.0 for k in SOURCE_CONTRAST.sigmas})
    cfg = PhantomConfig(bias_field=False)
    v, lm = render_case(3, quiet, cfg)
    values = set(np.unique(v.data).tolist())
    assert values == {float(x) for x in quiet.means.values()}
    assert np.all(v.data[lm.data == 1] == quiet.means["vs"])
    assert np.all(v.data[lm.data == 2] == quiet.means["cochlea"])


def test_vs_volume_within_analytic_bounds():
    cfg = PhantomConfig()
    lo, hi = cfg.vs_radius_range
    for seed in range(20):
        _, lm = render_case(seed, SOURCE_CONTRAST, cfg)
        n = lm.counts()[1]
        # one voxel shell of slack on either side of the analytic ellipsoid volume
        assert 4 / 3 * np.pi * max(lo - 1, 0) ** 3 <= n <= 4 / 3 * np.pi * (hi + 1) ** 3


def test_cochlea_smaller_than_vs():
    cfg = PhantomConfig()
    for seed in range(20):
        _, lm = render_case(seed, TARGET_CONTRAST, cfg)
        c = lm.counts()
        assert 0 < c[2] < c[1]


def test_config_errors(tmp_path):
    flat = ContrastMap("flat", {"background": 0, "head": 100, "vs": 0, "cochlea": 40},
                       dict(SOURCE_CONTRAST.sigmas))
    with pytest.raises(PhantomConfigError):
        generate_dataset(PhantomConfig(source_contrast_map=flat), tmp_path)
    with pytest.raises(PhantomConfigError):
        PhantomConfig(cochlea_radius_range=(3, 5)).check()
    with pytest.raises(PhantomConfigError, match="fit"):
        render_case(0, SOURCE_CONTRAST, PhantomConfig(volume_shape=(12, 12, 12)))
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(PhantomConfigError, match="writable"):
        generate_dataset(PhantomConfig(n_source=1, n_target=1, n_validation=0), blocker / "sub")


def test_seed_changes_output(tmp_path):
    cfg = PhantomConfig(n_source=1, n_target=1, n_validation=0, seed=1)
    generate_dataset(cfg, tmp_path / "a")
    generate_dataset(replace(cfg, seed=2), tmp_path / "b")
    assert _files(tmp_path / "a") != _files(tmp_path / "b")
