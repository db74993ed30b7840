import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosmos.metrics import (CaseScore, aggregate, assd, dice, empty_sentinel, score_case, score_dataset,
                            surface_mask)
from cosmos.volume import CaseEntry, LabelMap, save_labelmap


def brute_surface(mask):
    """Foreground voxels with a background (or out-of-grid) 6-neighbour, by enumeration."""
    out = np.zeros_like(mask, dtype=bool)
    for idx in zip(*np.nonzero(mask)):
        for ax in range(3):
            for d in (-1, 1):
                n = list(idx)
                n[ax] += d
                if not 0 <= n[ax] < mask.shape[ax] or not mask[tuple(n)]:
                    out[idx] = True
    return out


def brute_assd(p, g, spacing):
    sp, sg = np.argwhere(brute_surface(p)), np.argwhere(brute_surface(g))
    if len(sp) == 0 and len(sg) == 0:
        return 0.0
    if len(sp) == 0 or len(sg) == 0:
        return float(np.sqrt(sum((n * s) ** 2 for n, s in zip(p.shape, spacing))))
    s = np.asarray(spacing)
    d = np.sqrt((((sp[:, None, :] - sg[None, :, :]) * s) ** 2).sum(-1))
    return float((d.min(1).sum() + d.min(0).sum()) / (len(sp) + len(sg)))


def brute_dice(p, g):
    if p.sum() + g.sum() == 0:
        return 1.0
    return 2.0 * (p & g).sum() / (p.sum() + g.sum())


masks = st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1),
                  st.floats(0.05, 0.7), st.tuples(*[st.sampled_from([0.5, 1.0, 1.5, 2.0, 0.41])] * 3))


@settings(max_examples=100, deadline=None)
@given(masks)
def test_assd_and_dice_match_brute_force(params):
    z, y, x, seed, density, spacing = params
    r = np.random.default_rng(seed)
    p = r.random((z, y, x)) < density
    g = r.random((z, y, x)) < density
    assert abs(assd(p.astype(np.uint8), g.astype(np.uint8), 1, spacing) - brute_assd(p, g, spacing)) <= 1e-9
    assert abs(dice(p.astype(np.uint8), g.astype(np.uint8), 1) - brute_dice(p, g)) <= 1e-12


def test_surface_matches_enumeration(rng):
    m = rng.random((6, 7, 8)) < 0.5
    assert np.array_equal(surface_mask(m), brute_surface(m))


def test_dice_examples():
    a = np.zeros((4, 4, 4), np.uint8)
    a[:2, :2, :2] = 1
    assert dice(a, a, 1) == 1.0
    b = np.zeros_like(a)
    b[2:, 2:, 2:] = 1
    assert dice(a, b, 1) == 0.0
    c = np.zeros_like(a)
    c[:2, :2, 1:3] = 1
    assert dice(a, c, 1) == 0.5
    assert dice(np.zeros_like(a), np.zeros_like(a), 1) == 1.0
    assert dice(a, np.zeros_like(a), 1) == 0.0
    with pytest.raises(ValueError):
        dice(a, a[:3], 1)


def test_assd_plates():
    p = np.zeros((8, 8, 8), np.uint8)
    g = np.zeros_like(p)
    p[2] = 1
    g[5] = 1
    assert assd(p, g, 1, (1, 1, 1)) == 3.0
    assert assd(p, g, 1, (1, 1, 1)) == brute_assd(p == 1, g == 1, (1, 1, 1))


def test_assd_edge_cases(rng):
    m = (rng.random((5, 5, 5)) < 0.4).astype(np.uint8)
    assert assd(m, m, 1) == 0.0
    empty = np.zeros_like(m)
    assert assd(empty, empty, 1) == 0.0
    assert assd(m, empty, 1, (1, 2, 3)) == empty_sentinel(m.shape, (1, 2, 3)) == pytest.approx(np.sqrt(25 + 100 + 225))
    with pytest.raises(ValueError):
        assd(m, m, 1, (0, 1, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_symmetry_and_spacing_scaling(seed, s):
    r = np.random.default_rng(seed)
    p = (r.random((6, 6, 6)) < 0.3).astype(np.uint8)
    g = (r.random((6, 6, 6)) < 0.3).astype(np.uint8)
    spacing = (1.0, 0.5, 2.0)
    assert dice(p, g, 1) == dice(g, p, 1)
    assert assd(p, g, 1, spacing) == pytest.approx(assd(g, p, 1, spacing), abs=1e-12)
    scaled = tuple(s * v for v in spacing)
    assert assd(p, g, 1, scaled) == pytest.approx(s * assd(p, g, 1, spacing), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dice_one_iff_identical(seed):
    r = np.random.default_rng(seed)
    p = (r.random((4, 4, 4)) < 0.3).astype(np.uint8)
    g = p.copy()
    if r.random() < 0.5:
        i = tuple(r.integers(0, 4, 3))
        g[i] = 1 - g[i]
    assert (dice(p, g, 1) == 1.0) == np.array_equal(p, g)


def _case(vs_d, co_d, vs_a, co_a, cid):
    return CaseScore(cid, {1: vs_d, 2: co_d}, {1: vs_a, 2: co_a})


def test_aggregate_matches_hand_computation():
    scores = [_case(0.9, 0.7, 1.0, 0.5, "a"), _case(0.8, 0.5, 2.0, 0.5, "b"), _case(0.7, 0.9, 3.0, 1.1, "c")]
    rep = aggregate("m", scores)
    vs, co, mean = rep.row("VS"), rep.row("cochlea"), rep.row("Mean")
    assert vs.dice_mean == pytest.approx(0.8) and vs.dice_std == pytest.approx(np.sqrt(0.02 / 3))
    assert vs.assd_mean == pytest.approx(2.0) and vs.assd_std == pytest.approx(np.sqrt(2 / 3))
    assert co.dice_mean == pytest.approx(0.7) and co.dice_std == pytest.approx(np.sqrt(0.08 / 3))
    assert co.assd_mean == pytest.approx(0.7) and co.assd_std == pytest.approx(np.sqrt(0.24 / 3))
    assert mean.dice_mean == (vs.dice_mean + co.dice_mean) / 2
    assert abs(mean.assd_mean - (vs.assd_mean + co.assd_mean) / 2) <= 1e-9
    assert mean.n_cases == 3 and rep.mean_dice == mean.dice_mean


def _write_cases(tmp_path, rng, n=3):
    entries, labels = [], []
    for i in range(n):
        a = np.zeros((8, 10, 10), np.uint8)
        a[2:5, 2:6, 2:6] = 1
        a[5:7, 7:9, 7:9] = 2
        a = np.roll(a, i, axis=2)
        lm = LabelMap(a, (1.0, 0.5, 0.5), f"c{i}")
        save_labelmap(lm, tmp_path / "gt" / f"c{i}.nii")
        entries.append(CaseEntry(f"c{i}", "ignored.nii", str(tmp_path / "gt" / f"c{i}.nii")))
        labels.append(lm)
    return entries, labels


def test_score_dataset_perfect_and_missing(tmp_path, rng):
    entries, labels = _write_cases(tmp_path, rng)
    for lm in labels:
        save_labelmap(lm, tmp_path / "pred" / f"{lm.id}.nii")
    scores, rep = score_dataset(tmp_path / "pred", entries)
    assert rep.row("Mean").dice_mean == 1.0 and rep.row("Mean").dice_std == 0.0
    assert rep.row("Mean").assd_mean == 0.0
    (tmp_path / "pred" / "c1.nii").unlink()
    scores, rep = score_dataset(tmp_path / "pred", entries)
    missing = [s for s in scores if s.missing]
    assert [s.case_id for s in missing] == ["c1"]
    assert missing[0].dice == {1: 0.0, 2: 0.0}
    assert missing[0].assd[1] == empty_sentinel(labels[1].shape, labels[1].spacing)
    with pytest.raises(ValueError, match="no predictions"):
        score_dataset(tmp_path / "nothing", entries)


def test_score_case_uses_label_spacing():
    a = np.zeros((6, 6, 6), np.uint8)
    a[1] = 1
    b = np.zeros_like(a)
    b[3] = 1
    s = score_case(LabelMap(b, (2.0, 1.0, 1.0)), LabelMap(a, (2.0, 1.0, 1.0), "x"))
    assert s.assd[1] == 4.0 and s.case_id == "x"
