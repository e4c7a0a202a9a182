"""Condensed oracle/invariant suite runnable from the CLI.

Each check recomputes its expected value through an independent route
(brute-force compositing, exhaustive loops, algebraic identities) and
compares against the production path.  The full test suite in tests/ is a
superset; this is the in-binary smoke version.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .diffusion import (AttentionBlock, DDIMSchedule, LatentState,
                        StyleConditioning, cross_view_attention, ddim_denoise,
                        ddim_invert, make_schedule, self_attention)
from .grouping import (BACKGROUND, GroupIdentityMap, IdentityClassifier,
                       build_group_sets, classify_identity, match_groups)
from .scene import make_orbit_cameras, make_scene, scene_to_dict
from .splat import ALPHA_CLAMP, project_gaussian, render
from .styling import FeatureMap, FeatureExtractor, instance_style_loss, nnfm_oracle


def brute_force_render(scene, cam):
    """Per-pixel compositing over all Gaussians, no tiling, no culling."""
    splats = []
    for i, g in enumerate(scene.gaussians):
        s = project_gaussian(g, cam, cull=False, index=i)
        if s is not None:
            splats.append((s, g))
    splats.sort(key=lambda sg: (sg[0].depth, sg[0].gaussian_index))
    h, w = cam.height, cam.width
    color = np.zeros((h, w, 3))
    for r in range(h):
        for c in range(w):
            trans = 1.0
            for s, g in splats:
                d = np.array([c, r]) - s.center
                inv = np.linalg.inv(s.cov2d)
                alpha = min(g.opacity * math.exp(-0.5 * d @ inv @ d), ALPHA_CLAMP)
                color[r, c] += alpha * trans * g.color
                trans *= 1.0 - alpha
            color[r, c] += trans * scene.background
    return color


def _check_schedule():
    sch = make_schedule(50, 1e-4, 0.02)
    betas = np.linspace(1e-4, 0.02, 50)
    expect = 1.0
    for b in betas:
        expect *= 1.0 - b
    return abs(sch.alpha_bar[50] - expect) < 1e-12 and np.all(np.diff(sch.alpha_bar) < 0)


def _check_ddim_algebra():
    sch = make_schedule(20, 1e-3, 0.05)
    rng = np.random.default_rng(0)
    z0 = rng.uniform(size=(8, 8, 3))
    zero = lambda z, t, c: np.zeros_like(z)
    zt = ddim_invert(LatentState(z0, 0), zero, sch, StyleConditioning.null())
    tele = np.max(np.abs(zt.z - math.sqrt(sch.alpha_bar[-1]) * z0)) < 1e-10
    const = lambda z, t, c: np.full_like(z, 0.3)
    zt2 = ddim_invert(LatentState(z0, 0), const, sch, StyleConditioning.null())
    back = ddim_denoise(zt2, const, sch, StyleConditioning.null())
    return tele and np.max(np.abs(back.z - z0)) < 1e-10


def _check_attention():
    rng = np.random.default_rng(1)
    blk = AttentionBlock.seeded(rng, 8, 8)
    z = rng.normal(size=(4, 8))
    a1 = self_attention(blk, z)
    a2 = cross_view_attention(blk, z, np.concatenate([z], axis=0))
    if not np.array_equal(a1, a2):
        return False
    # dense oracle
    q, k, v = z @ blk.wq, z @ blk.wk, z @ blk.wv
    logits = q @ k.T / math.sqrt(blk.d)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return np.max(np.abs(w @ v - a1)) < 1e-6


def _check_group_matching():
    for pattern in itertools.product([0, 1], repeat=3):
        y_ids = np.full((1, 3), BACKGROUND, dtype=np.int32)
        for i, filled in enumerate(pattern):
            if filled:
                y_ids[0, i] = i
        y = build_group_sets(GroupIdentityMap(ids=y_ids, k=3), 3)
        x = build_group_sets(GroupIdentityMap(
            ids=np.array([[0, 1, 2]], dtype=np.int32), k=3), 3)
        m = match_groups(x, y)
        for i, filled in enumerate(pattern):
            if bool(m.to_group[i]) != bool(filled):
                return False
    return True


def _check_style_loss_oracle():
    rng = np.random.default_rng(2)
    hp = wp = 6
    f_i = FeatureMap(rng.normal(size=(hp, wp, 5)), stride=4)
    f_s = FeatureMap(rng.normal(size=(hp, wp, 5)), stride=4)
    m_i = GroupIdentityMap(rng.integers(-1, 3, size=(hp, wp)).astype(np.int32), k=3)
    m_s = GroupIdentityMap(rng.integers(-1, 3, size=(hp, wp)).astype(np.int32), k=3)
    match = match_groups(build_group_sets(m_s, 3), build_group_sets(m_s, 3))
    rep, _ = instance_style_loss(f_i, [f_s], [match], m_i, [m_s])
    oracle = nnfm_oracle(f_i, [f_s], [match], m_i, [m_s])
    return abs(rep.total - oracle) < 1e-6


def _check_render_oracle():
    scene = make_scene("blocks", 40, 3, seed=11)
    cam = make_orbit_cameras(1, width=24, height=24)[0]
    out = render(scene, cam, cutoff=False)
    oracle = brute_force_render(scene, cam)
    return float(np.max(np.abs(out.color - oracle))) < 1e-6


def _check_scene_determinism():
    a = scene_to_dict(make_scene("blocks", 50, 4, seed=7))
    b = scene_to_dict(make_scene("blocks", 50, 4, seed=7))
    import json
    return json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def _check_identity_recovery():
    scene = make_scene("blocks", 200, 4, seed=3)
    cam = make_orbit_cameras(1, width=32, height=32)[0]
    out = render(scene, cam)
    m = classify_identity(out.id_features, IdentityClassifier.embedding(4),
                          out.coverage)
    solid = out.coverage > 0.5
    return bool(np.all(m.ids[solid] >= 0))


CHECKS = [
    ("ddim schedule cumulative product", _check_schedule),
    ("ddim telescoping and roundtrip identities", _check_ddim_algebra),
    ("attention single-view reduction and dense oracle", _check_attention),
    ("group matching emptiness patterns", _check_group_matching),
    ("instance style loss vs exhaustive oracle", _check_style_loss_oracle),
    ("renderer vs brute-force compositing oracle", _check_render_oracle),
    ("scene generation determinism", _check_scene_determinism),
    ("identity map recovery on synthetic scene", _check_identity_recovery),
]


def run_selftest(log=print) -> int:
    """Run all checks; return the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        try:
            ok = fn()
        except Exception as exc:  # a crash is a failure, keep going
            log(f"FAIL {name}: {exc!r}")
            failures += 1
            continue
        log(("PASS " if ok else "FAIL ") + name)
        failures += 0 if ok else 1
    return failures
