"""Per-pixel group identity maps, group sets, and group matching.

BACKGROUND is a distinct label (-1 in arrays, 255 on disk), never group 0,
so uncovered pixels cannot leak into the style loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .scene import Camera, GaussianScene, ID_DIM
from .splat import COVERAGE_EPS, render

BACKGROUND = -1


@dataclass
class IdentityClassifier:
    weight: np.ndarray   # (K, 16) linear map from identity features to logits
    k: int

    @classmethod
    def embedding(cls, k: int) -> "IdentityClassifier":
        """Default classifier: take the first K coordinates of the composited
        encoding (exact for near-one-hot synthetic encodings)."""
        if k < 1:
            raise ValidationError("K must be >= 1")
        return cls(weight=np.eye(k, ID_DIM), k=k)


@dataclass
class GroupIdentityMap:
    ids: np.ndarray      # (H, W) int, values in [0, K) or BACKGROUND
    k: int
    source: str = ""     # view tag


@dataclass
class GroupSet:
    groups: list[np.ndarray]   # per identity, (n_i, 2) array of (row, col)
    k: int


@dataclass
class GroupMatching:
    """Per identity: True means matched to the same-id target group, False
    means the target group was empty and the match falls back to the union of
    all target groups."""
    to_group: np.ndarray       # (K,) bool
    k: int


def classify_identity(e_id: np.ndarray, clf: IdentityClassifier,
                      coverage: np.ndarray) -> GroupIdentityMap:
    """argmax over softmax(f(E_id)) per pixel; ties go to the lowest index,
    uncovered pixels to BACKGROUND.  (argmax of the softmax equals argmax of
    the logits, so the softmax is not materialized.)"""
    if e_id.shape[:2] != coverage.shape or e_id.shape[2] != ID_DIM:
        raise ValidationError("E_id / coverage shape mismatch")
    logits = e_id @ clf.weight.T
    ids = np.argmax(logits, axis=2).astype(np.int32)
    ids[coverage < COVERAGE_EPS] = BACKGROUND
    return GroupIdentityMap(ids=ids, k=clf.k)


def render_identity_map(scene: GaussianScene, cam: Camera,
                        clf: IdentityClassifier, out=None) -> GroupIdentityMap:
    """Composite identity encodings at `cam` and classify per pixel.  Pass a
    precomputed RenderOutput as `out` to avoid a second render."""
    if out is None:
        out = render(scene, cam)
    m = classify_identity(out.id_features, clf, out.coverage)
    return m


def build_group_sets(gmap: GroupIdentityMap, k: int) -> GroupSet:
    if gmap.ids.max(initial=BACKGROUND) >= k:
        raise ValidationError(f"identity map contains ids >= K = {k}")
    groups = []
    for i in range(k):
        rows, cols = np.nonzero(gmap.ids == i)
        groups.append(np.stack([rows, cols], axis=1))
    return GroupSet(groups=groups, k=k)


def match_groups(x: GroupSet, y: GroupSet) -> GroupMatching:
    """Mapping from training-view groups to key-view groups: same identity
    when the target group is nonempty, else the union of all target groups.
    Depends only on which target groups are empty."""
    if x.k != y.k:
        raise ValidationError(f"group count mismatch: {x.k} != {y.k}")
    to_group = np.array([len(y.groups[i]) > 0 for i in range(y.k)])
    return GroupMatching(to_group=to_group, k=y.k)


def downsample_group_map(gmap: GroupIdentityMap, stride: int) -> GroupIdentityMap:
    """Majority vote over stride x stride blocks; id ties go to the lowest id
    and BACKGROUND wins only with a strict majority of the block."""
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    if stride == 1:
        return GroupIdentityMap(ids=gmap.ids.copy(), k=gmap.k, source=gmap.source)
    h, w = gmap.ids.shape
    if h % stride or w % stride:
        raise ValidationError(f"stride {stride} does not divide {h}x{w}")
    blocks = gmap.ids.reshape(h // stride, stride, w // stride, stride)
    blocks = blocks.transpose(0, 2, 1, 3).reshape(h // stride, w // stride, -1)
    counts = np.stack([(blocks == i).sum(axis=2) for i in range(gmap.k)], axis=2)
    out = np.argmax(counts, axis=2).astype(np.int32)
    bg_count = (blocks == BACKGROUND).sum(axis=2)
    out[bg_count * 2 > stride * stride] = BACKGROUND
    return GroupIdentityMap(ids=out, k=gmap.k, source=gmap.source)
