import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from nodkit.augment import (ShrinkConfig, build_conditioning, cohort_diameter_stats,
                            diameter_of_mask, diameter_stats, refill_removed,
                            sample_target_percents, shrink_and_refill, shrink_lesion)
from nodkit.curate import BODY_LABEL, LOBE_LABELS, NODULE_LABEL
from nodkit.errors import DomainError
from nodkit.maskops import BinaryMask
from nodkit.volio import LabelMap, VolumeMeta

FACE = oracles.neighbourhood(1)


def _sphere_mask(radius, shape=(17, 17, 17)):
    c = tuple((s - 1) / 2 for s in shape)
    return BinaryMask(VolumeMeta(shape), oracles.ball(shape, c, radius))


def test_target_100_returns_input():
    m = _sphere_mask(4)
    res = shrink_lesion(m, ShrinkConfig(100))
    assert np.array_equal(res.mask.bits, m.bits)
    assert res.achieved_percent == 100.0 and res.iterations_used == 0
    assert res.removed.count == 0


def test_sphere_r6_half_volume_matches_erosion_oracle():
    m = _sphere_mask(6)
    its = oracles.erosion_iterates(m.bits, FACE, 50)
    pct = [100.0 * it.sum() / m.count for it in its]
    # the walk stops at the first iterate at or below the target
    stop = next(i for i, p in enumerate(pct) if p <= 50)
    best = min(range(stop + 1), key=lambda i: (abs(pct[i] - 50), i))
    res = shrink_lesion(m, ShrinkConfig(50))
    assert np.array_equal(res.mask.bits, its[best])
    assert res.achieved_percent == pytest.approx(pct[best], abs=1e-12)
    assert res.iterations_used == stop


def test_tiny_block_keeps_original_with_warning():
    bits = np.zeros((4, 4, 4), bool)
    bits[1:3, 1:3, 1:3] = True
    m = BinaryMask(VolumeMeta(bits.shape), bits)
    res = shrink_lesion(m, ShrinkConfig(10))
    assert np.array_equal(res.mask.bits, bits)
    assert res.achieved_percent == 100.0
    assert res.warning


def test_empty_lesion_and_bad_target():
    with pytest.raises(DomainError):
        shrink_lesion(BinaryMask.empty(VolumeMeta((2, 2, 2))), ShrinkConfig(50))
    with pytest.raises(DomainError):
        ShrinkConfig(0)
    with pytest.raises(DomainError):
        ShrinkConfig(120)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.floats(5, 99), st.sampled_from([1, 2, 3]))
def test_shrink_properties(radius, target, conn):
    m = _sphere_mask(radius + 0.3, shape=(13, 13, 13))
    res = shrink_lesion(m, ShrinkConfig(target, conn))
    assert np.all(res.mask.bits <= m.bits)
    assert 0 < res.achieved_percent <= 100
    assert res.achieved_percent == pytest.approx(100.0 * res.mask.count / m.count)
    its = oracles.erosion_iterates(m.bits, oracles.neighbourhood(conn), 50)
    seen = its[:res.iterations_used + 1]
    counts = [it.sum() for it in its]
    assert counts == sorted(counts, reverse=True)
    best_delta = min(abs(100.0 * it.sum() / m.count - target) for it in seen)
    assert abs(res.achieved_percent - target) == pytest.approx(best_delta, abs=1e-12)


def _two_lobe_labels(shape=(12, 8, 8)):
    lab = np.zeros(shape, np.uint8)
    lab[1:6, 1:7, 1:7] = 28
    lab[6:11, 1:7, 1:7] = 31
    return lab


def test_refill_nearest_and_tie():
    meta = VolumeMeta((5, 1, 1))
    lab = np.array([28, 0, 0, 0, 31], np.uint8).reshape(meta.dims)
    removed = np.zeros(meta.dims, bool)
    removed[1:4] = True
    out = refill_removed(LabelMap(meta, lab), BinaryMask(meta, removed)).labels.ravel()
    assert list(out) == [28, 28, 28, 31, 31]  # middle voxel is equidistant -> smaller label

    lab = np.array([0, 30, 0, 29, 29], np.uint8).reshape(meta.dims)
    removed = np.zeros(meta.dims, bool)
    removed[2] = True
    out = refill_removed(LabelMap(meta, lab), BinaryMask(meta, removed)).labels.ravel()
    assert out[2] == 29  # both at 1 mm; 29 < 30


def test_refill_matches_brute_force():
    rng = np.random.default_rng(4)
    spacing = (0.8, 1.1, 1.5)
    lab = _two_lobe_labels()
    meta = VolumeMeta(lab.shape, spacing)
    removed = rng.random(lab.shape) < 0.1
    out = refill_removed(LabelMap(meta, lab), BinaryMask(meta, removed)).labels
    lobe_pts = np.argwhere(np.isin(lab, LOBE_LABELS))
    lobe_ids = lab[tuple(lobe_pts.T)]
    for p in np.argwhere(removed):
        d = np.sqrt((((lobe_pts - p) * spacing) ** 2).sum(axis=1))
        near = lobe_ids[np.abs(d - d.min()) < 1e-9]
        assert out[tuple(p)] == near.min()
    assert np.array_equal(out[~removed], lab[~removed])


def test_refill_requires_lobes():
    meta = VolumeMeta((2, 2, 2))
    with pytest.raises(DomainError):
        refill_removed(LabelMap(meta, np.zeros(meta.dims)), BinaryMask(meta, np.ones(meta.dims)))


def test_shrink_and_refill_conserves_nodule_count():
    lab = _two_lobe_labels((16, 12, 12))
    lab[1:15, 1:11, 1:11] = np.where(lab[1:15, 1:11, 1:11] == 0, 28, lab[1:15, 1:11, 1:11])
    ball = oracles.ball(lab.shape, (7.5, 5.5, 5.5), 3.6)
    lab[ball] = NODULE_LABEL
    meta = VolumeMeta(lab.shape)
    labels = LabelMap(meta, lab)
    for target in (30, 50, 70, 90):
        new, res = shrink_and_refill(labels, BinaryMask(meta, ball), ShrinkConfig(target))
        assert np.count_nonzero(new.labels == NODULE_LABEL) == res.mask.count
        changed = new.labels != labels.labels
        assert np.all(changed <= res.removed.bits)
        assert set(np.unique(new.labels[res.removed.bits])) <= set(LOBE_LABELS)


def test_conditioning_bundle():
    meta = VolumeMeta((3, 3, 3), (0.7, 0.7, 1.25))
    empty = build_conditioning(LabelMap(meta, np.zeros(meta.dims, np.uint8)))
    assert empty.body.count == 0 and empty.nodule.count == 0
    assert empty.spacing == (0.7, 0.7, 1.25)
    lab = np.full(meta.dims, BODY_LABEL, np.uint8)
    lab[1, 1, 1] = NODULE_LABEL
    c = build_conditioning(LabelMap(meta, lab))
    assert c.nodule.count == 1 and c.body.bits[1, 1, 1]


def test_diameter_examples():
    meta = VolumeMeta((12, 3, 3), (0.7, 0.7, 1.25))
    one = np.zeros(meta.dims, bool)
    one[0, 0, 0] = True
    assert diameter_of_mask(BinaryMask(meta, one)) == 1.25
    line = np.zeros((12, 3, 3), bool)
    line[0:11, 1, 1] = True
    assert diameter_of_mask(BinaryMask(VolumeMeta(line.shape), line)) == 11.0
    assert diameter_of_mask(_sphere_mask(5)) == 11.0
    with pytest.raises(DomainError):
        diameter_of_mask(BinaryMask.empty(meta))


def test_diameter_stats_examples():
    s = diameter_stats([10.0, 20.0])
    assert s.mean == 15.0 and s.median == 10.0
    s = diameter_stats([7.5])
    assert s.mean == s.median == 7.5
    assert s.counts.sum() == 1 and s.counts[3] == 1
    with pytest.raises(DomainError):
        cohort_diameter_stats([])


def test_cohort_stats_match_sort_oracle():
    rng = np.random.default_rng(8)
    masks, diams = [], []
    for _ in range(101):
        bits = np.zeros((30, 4, 4), bool)
        n = int(rng.integers(1, 30))
        bits[:n, 1, 1] = True
        masks.append(BinaryMask(VolumeMeta(bits.shape, (1.3, 1.0, 1.0)), bits))
        diams.append(n * 1.3)
    s = cohort_diameter_stats(masks)
    d = sorted(diams)
    assert s.mean == pytest.approx(sum(d) / len(d), abs=1e-12)
    assert s.median == d[50]
    want = [sum(1 for x in d if 2 * k <= x < 2 * k + 2) for k in range(50)]
    assert list(s.counts) == want
    assert s.n == 101


def test_sampled_targets_in_range_and_seeded():
    a = sample_target_percents(100, seed=3)
    assert np.all((a >= 50) & (a < 100))
    assert np.array_equal(a, sample_target_percents(100, seed=3))
