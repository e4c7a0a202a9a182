from __future__ import annotations

import itertools

import numpy as np
import pytest

from gsstyle.errors import ValidationError
from gsstyle.grouping import (BACKGROUND, GroupIdentityMap, IdentityClassifier,
                              build_group_sets, classify_identity,
                              downsample_group_map, match_groups,
                              render_identity_map)
from gsstyle.scene import look_at_camera, make_orbit_cameras, make_scene
from gsstyle.splat import render


def test_one_hot_classification():
    e = np.zeros((1, 1, 16))
    e[0, 0, 2] = 10.0
    m = classify_identity(e, IdentityClassifier.embedding(4), np.ones((1, 1)))
    assert m.ids[0, 0] == 2


def test_tie_breaks_to_lowest_index():
    e = np.zeros((1, 1, 16))
    e[0, 0, 1] = 5.0
    e[0, 0, 3] = 5.0
    m = classify_identity(e, IdentityClassifier.embedding(4), np.ones((1, 1)))
    assert m.ids[0, 0] == 1


def test_uncovered_pixels_are_background():
    e = np.full((2, 2, 16), 3.0)
    cov = np.array([[1.0, 0.0], [1e-5, 0.5]])
    m = classify_identity(e, IdentityClassifier.embedding(2), cov)
    assert m.ids[0, 1] == BACKGROUND and m.ids[1, 0] == BACKGROUND
    assert m.ids[0, 0] == 0 and m.ids[1, 1] == 0


def test_argmax_invariant_under_monotone_logit_rescaling():
    rng = np.random.default_rng(0)
    e = rng.normal(size=(4, 4, 16))
    clf = IdentityClassifier.embedding(5)
    base = classify_identity(e, clf, np.ones((4, 4)))
    scaled = classify_identity(3.0 * e, clf, np.ones((4, 4)))
    assert np.array_equal(base.ids, scaled.ids)


def test_render_identity_map_matches_compositing_oracle(clf3):
    scene = make_scene("blocks", 80, 3, seed=4)
    cam = make_orbit_cameras(1, width=24, height=24)[0]
    m = render_identity_map(scene, cam, clf3)
    out = render(scene, cam)
    # oracle: argmax over the first K composited encoding channels directly
    logits = out.id_features[:, :, :3]
    expect = np.argmax(logits, axis=2)
    covered = out.coverage >= 1e-4
    assert np.array_equal(m.ids[covered], expect[covered])
    assert np.all(m.ids[~covered] == BACKGROUND)


def test_single_group_scene_all_covered_id0():
    scene = make_scene("blocks", 40, 1, seed=2)
    cam = make_orbit_cameras(1, width=24, height=24)[0]
    m = render_identity_map(scene, cam, IdentityClassifier.embedding(1))
    out = render(scene, cam)
    assert np.all(m.ids[out.coverage >= 1e-4] == 0)


def test_out_of_frustum_camera_all_background(clf3):
    scene = make_scene("blocks", 20, 3, seed=1)
    cam = look_at_camera([0.0, 0.0, 50.0], [0.0, 0.0, 100.0], width=16, height=16)
    m = render_identity_map(scene, cam, clf3)
    assert np.all(m.ids == BACKGROUND)


def test_identity_recovery_rate():
    # >= 99% of solidly covered pixels recover the generating group
    scene = make_scene("blocks", 300, 4, seed=3)
    cam = make_orbit_cameras(1, width=48, height=48)[0]
    out = render(scene, cam)
    m = classify_identity(out.id_features, IdentityClassifier.embedding(4),
                          out.coverage)
    solid = out.coverage > 0.5
    assert solid.sum() > 0
    assert np.mean(m.ids[solid] >= 0) >= 0.99


def test_build_group_sets_examples():
    gm = GroupIdentityMap(ids=np.array([[0, 1], [1, 0]], dtype=np.int32), k=2)
    gs = build_group_sets(gm, 2)
    assert sorted(map(tuple, gs.groups[0])) == [(0, 0), (1, 1)]
    assert sorted(map(tuple, gs.groups[1])) == [(0, 1), (1, 0)]
    empty = GroupIdentityMap(ids=np.full((2, 2), BACKGROUND, dtype=np.int32), k=2)
    gs2 = build_group_sets(empty, 2)
    assert all(len(g) == 0 for g in gs2.groups)


def test_build_group_sets_disjoint_and_covering():
    rng = np.random.default_rng(5)
    ids = rng.integers(-1, 4, size=(8, 8)).astype(np.int32)
    gs = build_group_sets(GroupIdentityMap(ids=ids, k=4), 4)
    seen = set()
    for g in gs.groups:
        cells = set(map(tuple, g))
        assert not (cells & seen)
        seen |= cells
    assert len(seen) == int(np.sum(ids != BACKGROUND))


def test_build_group_sets_rejects_oversized_ids():
    gm = GroupIdentityMap(ids=np.array([[3]], dtype=np.int32), k=3)
    with pytest.raises(ValidationError):
        build_group_sets(gm, 3)


def test_match_groups_exhaustive_emptiness_patterns():
    # matching rule over all emptiness patterns of K=3 target groups
    x = build_group_sets(GroupIdentityMap(
        ids=np.array([[0, 1, 2]], dtype=np.int32), k=3), 3)
    for pattern in itertools.product([False, True], repeat=3):
        ids = np.full((1, 3), BACKGROUND, dtype=np.int32)
        for i, filled in enumerate(pattern):
            if filled:
                ids[0, i] = i
        y = build_group_sets(GroupIdentityMap(ids=ids, k=3), 3)
        m = match_groups(x, y)
        for i, filled in enumerate(pattern):
            assert bool(m.to_group[i]) == filled


def test_match_groups_ignores_query_side():
    y = build_group_sets(GroupIdentityMap(
        ids=np.array([[0, BACKGROUND]], dtype=np.int32), k=2), 2)
    x1 = build_group_sets(GroupIdentityMap(
        ids=np.array([[0, 1]], dtype=np.int32), k=2), 2)
    x2 = build_group_sets(GroupIdentityMap(
        ids=np.full((1, 2), BACKGROUND, dtype=np.int32), k=2), 2)
    assert np.array_equal(match_groups(x1, y).to_group,
                          match_groups(x2, y).to_group)


def test_match_groups_k_mismatch():
    a = build_group_sets(GroupIdentityMap(
        ids=np.zeros((1, 1), dtype=np.int32), k=2), 2)
    b = build_group_sets(GroupIdentityMap(
        ids=np.zeros((1, 1), dtype=np.int32), k=3), 3)
    with pytest.raises(ValidationError):
        match_groups(a, b)


def test_downsample_stride1_identity():
    rng = np.random.default_rng(6)
    ids = rng.integers(-1, 3, size=(4, 4)).astype(np.int32)
    gm = GroupIdentityMap(ids=ids, k=3)
    out = downsample_group_map(gm, 1)
    assert np.array_equal(out.ids, ids)


def test_downsample_majority_rules():
    ids = np.array([[0, 0], [1, 2]], dtype=np.int32)
    out = downsample_group_map(GroupIdentityMap(ids=ids, k=3), 2)
    assert out.ids[0, 0] == 0      # majority
    ids = np.array([[0, 0], [1, 1]], dtype=np.int32)
    out = downsample_group_map(GroupIdentityMap(ids=ids, k=3), 2)
    assert out.ids[0, 0] == 0      # tie -> lowest id
    ids = np.array([[BACKGROUND, BACKGROUND], [BACKGROUND, 2]], dtype=np.int32)
    out = downsample_group_map(GroupIdentityMap(ids=ids, k=3), 2)
    assert out.ids[0, 0] == BACKGROUND   # strict background majority
    ids = np.array([[BACKGROUND, BACKGROUND], [1, 2]], dtype=np.int32)
    out = downsample_group_map(GroupIdentityMap(ids=ids, k=3), 2)
    assert out.ids[0, 0] == 1      # 50% background is not strict majority


def test_downsample_rejects_non_divisible():
    gm = GroupIdentityMap(ids=np.zeros((3, 4), dtype=np.int32), k=1)
    with pytest.raises(ValidationError):
        downsample_group_map(gm, 2)
