"""Feature extraction, the group-matched nearest-neighbor style loss, key view
selection, and the color optimization loop.

The feature extractor is a seeded fixed 2-stage convolutional pyramid (total
stride 4, 32 channels) with a hand-written backward pass, standing in for a
pretrained network behind the same interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMatchingError, NumericError, ValidationError
from .grouping import (BACKGROUND, GroupIdentityMap, GroupMatching, GroupSet,
                       IdentityClassifier, build_group_sets, downsample_group_map,
                       match_groups, render_identity_map)
from .scene import Camera, GaussianScene
from .splat import render, render_backward

COS_EPS = 1e-12


# ---------------------------------------------------------------------------
# feature extractor


def _conv3(x, w, b):
    h, wid, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(b, (h, wid, w.shape[3])).copy()
    for dy in range(3):
        for dx in range(3):
            out += xp[dy:dy + h, dx:dx + wid] @ w[dy, dx]
    return out


def _conv3_back(dout, w, xshape):
    h, wid, _ = xshape
    dxp = np.zeros((h + 2, wid + 2, w.shape[2]))
    for dy in range(3):
        for dx in range(3):
            dxp[dy:dy + h, dx:dx + wid] += dout @ w[dy, dx].T
    return dxp[1:h + 1, 1:wid + 1]


def _pool2(x):
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _pool2_back(dout):
    return 0.25 * np.repeat(np.repeat(dout, 2, axis=0), 2, axis=1)


class FeatureExtractor:
    """Two conv(3x3) + ReLU + avgpool(2) stages; stride 4, 32 output channels."""

    stride = 4
    dim = 32

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(0, 1.0 / math.sqrt(9 * 3), (3, 3, 3, 16))
        self.b1 = rng.normal(0, 0.05, 16)
        self.w2 = rng.normal(0, 1.0 / math.sqrt(9 * 16), (3, 3, 16, 32))
        self.b2 = rng.normal(0, 0.05, 32)

    def forward(self, img: np.ndarray):
        """Return (features H/4 x W/4 x 32, cache for backward)."""
        h, w = img.shape[:2]
        if h % self.stride or w % self.stride:
            raise ValidationError(f"image size {h}x{w} not divisible by stride {self.stride}")
        a1 = _conv3(img, self.w1, self.b1)
        r1 = np.maximum(a1, 0.0)
        p1 = _pool2(r1)
        a2 = _conv3(p1, self.w2, self.b2)
        r2 = np.maximum(a2, 0.0)
        feat = _pool2(r2)
        cache = (img.shape, a1 > 0, p1.shape, a2 > 0)
        return feat, cache

    def backward(self, cache, dfeat: np.ndarray) -> np.ndarray:
        """Image-space gradient of an upstream feature-space gradient."""
        ishape, m1, p1shape, m2 = cache
        dr2 = _pool2_back(dfeat)
        da2 = dr2 * m2
        dp1 = _conv3_back(da2, self.w2, p1shape)
        dr1 = _pool2_back(dp1)
        da1 = dr1 * m1
        return _conv3_back(da1, self.w1, ishape)


@dataclass
class FeatureMap:
    features: np.ndarray   # (H', W', d)
    stride: int
    source: str = ""


def extract_features(img: np.ndarray, fx: FeatureExtractor,
                     source: str = "") -> FeatureMap:
    feat, _ = fx.forward(img)
    return FeatureMap(features=feat, stride=fx.stride, source=source)


# ---------------------------------------------------------------------------
# instance-level style loss


@dataclass
class StyleLossReport:
    total: float
    per_group: dict[int, float]
    n: int
    matched_indices: np.ndarray   # (H', W', 3) of (view, row, col); -1 where bg


def _candidate_pool(group_id: int, matchings: list[GroupMatching],
                    m_s_list: list[GroupIdentityMap]):
    """Candidate cells for one query group, pooled over key views.

    Returns (coords list of (view, row, col), features are gathered by the
    caller).  Ordering is view index then row-major cell index, which also
    fixes the argmin tie-break.
    """
    coords = []
    for v, (mm, ms) in enumerate(zip(matchings, m_s_list)):
        if mm.to_group[group_id]:
            mask = ms.ids == group_id
        else:
            mask = ms.ids != BACKGROUND
        rows, cols = np.nonzero(mask)
        coords.append(np.stack([np.full_like(rows, v), rows, cols], axis=1))
    return np.concatenate(coords, axis=0)


def instance_style_loss(f_i: FeatureMap, f_s_list: list[FeatureMap],
                        matchings: list[GroupMatching],
                        m_i: GroupIdentityMap,
                        m_s_list: list[GroupIdentityMap],
                        frozen: np.ndarray | None = None):
    """Group-matched nearest-neighbor cosine-distance loss.

    Returns (StyleLossReport, dL/dF_I).  For every non-background feature
    cell of the training view, the cosine distance to the nearest candidate
    cell of the matched key-view region (pooled over key views) is averaged
    over the N covered cells.  The argmin index is treated as a constant for
    the gradient; `frozen` replays previously matched indices instead of
    searching (used by finite-difference checks).
    """
    if not f_s_list:
        raise ValidationError("need at least one key view")
    if len(f_s_list) != len(m_s_list) or len(f_s_list) != len(matchings):
        raise ValidationError("key-view feature/map/matching counts differ")
    hp, wp, d = f_i.features.shape
    if m_i.ids.shape != (hp, wp):
        raise ValidationError("training group map not at feature resolution")
    for fm, ms in zip(f_s_list, m_s_list):
        if fm.stride != f_i.stride:
            raise ValidationError("feature stride mismatch between views")
        if ms.ids.shape != fm.features.shape[:2]:
            raise ValidationError("key group map not at feature resolution")
    if all((ms.ids == BACKGROUND).all() for ms in m_s_list):
        raise DegenerateMatchingError("all key-view groups are empty")

    grad = np.zeros_like(f_i.features)
    matched = np.full((hp, wp, 3), -1, dtype=np.int64)
    qrows, qcols = np.nonzero(m_i.ids != BACKGROUND)
    n = len(qrows)
    if n == 0:
        return StyleLossReport(0.0, {}, 0, matched), grad

    sum_d = 0.0
    per_group_sum: dict[int, float] = {}
    per_group_n: dict[int, int] = {}

    if frozen is not None:
        for r, c in zip(qrows, qcols):
            v, rr, cc = frozen[r, c]
            a = f_i.features[r, c]
            b = f_s_list[v].features[rr, cc]
            dist, da = _cos_dist_grad(a, b)
            sum_d += dist
            grad[r, c] += da / n
            matched[r, c] = (v, rr, cc)
            gid = int(m_i.ids[r, c])
            per_group_sum[gid] = per_group_sum.get(gid, 0.0) + dist
            per_group_n[gid] = per_group_n.get(gid, 0) + 1
    else:
        for gid in range(m_i.k):
            sel = m_i.ids[qrows, qcols] == gid
            if not np.any(sel):
                continue
            gr, gc = qrows[sel], qcols[sel]
            coords = _candidate_pool(gid, matchings, m_s_list)
            if len(coords) == 0:
                # the matched region is empty in every key view; global
                # fallback was empty too, covered by the degenerate check
                raise DegenerateMatchingError(
                    f"no candidate cells for group {gid}")
            cand = np.stack([f_s_list[v].features[r, c] for v, r, c in coords])
            a = f_i.features[gr, gc]                      # (q, d)
            na = np.linalg.norm(a, axis=1)
            nb = np.linalg.norm(cand, axis=1)
            denom = np.maximum(np.outer(na, nb), COS_EPS)
            dist = 1.0 - (a @ cand.T) / denom             # (q, cand)
            best = np.argmin(dist, axis=1)                # first = lowest index
            bestd = dist[np.arange(len(gr)), best]
            sum_d += float(bestd.sum())
            per_group_sum[gid] = float(bestd.sum())
            per_group_n[gid] = int(len(gr))
            for qi, (r, c) in enumerate(zip(gr, gc)):
                b = cand[best[qi]]
                _, da = _cos_dist_grad(f_i.features[r, c], b)
                grad[r, c] += da / n
                matched[r, c] = coords[best[qi]]

    total = sum_d / n
    per_group = {g: per_group_sum[g] / per_group_n[g] for g in per_group_sum}
    report = StyleLossReport(total=total, per_group=per_group, n=n,
                             matched_indices=matched)
    return report, grad


def _cos_dist_grad(a: np.ndarray, b: np.ndarray):
    """Cosine distance and its gradient w.r.t. a (zero where degenerate)."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    denom = max(na * nb, COS_EPS)
    s = float(a @ b) / denom
    if na * nb <= COS_EPS:
        return 1.0 - s, np.zeros_like(a)
    da = -(b / denom - s * a / (na * na))
    return 1.0 - s, da


def nnfm_oracle(f_i: FeatureMap, f_s_list: list[FeatureMap],
                matchings: list[GroupMatching], m_i: GroupIdentityMap,
                m_s_list: list[GroupIdentityMap]) -> float:
    """Exhaustive-loop ground truth for instance_style_loss.total.

    Deliberately written with scalar loops and no shared helpers so it stays
    an independent check on the vectorized path.
    """
    if all((ms.ids == BACKGROUND).all() for ms in m_s_list):
        raise DegenerateMatchingError("all key-view groups are empty")
    hp, wp, _ = f_i.features.shape
    total = 0.0
    n = 0
    for r in range(hp):
        for c in range(wp):
            gid = int(m_i.ids[r, c])
            if gid == BACKGROUND:
                continue
            n += 1
            best = None
            for v in range(len(f_s_list)):
                ids = m_s_list[v].ids
                use_group = bool(matchings[v].to_group[gid])
                for rr in range(ids.shape[0]):
                    for cc in range(ids.shape[1]):
                        if use_group:
                            if ids[rr, cc] != gid:
                                continue
                        elif ids[rr, cc] == BACKGROUND:
                            continue
                        a = f_i.features[r, c]
                        b = f_s_list[v].features[rr, cc]
                        na = math.sqrt(float(sum(x * x for x in a)))
                        nb = math.sqrt(float(sum(x * x for x in b)))
                        dot = float(sum(x * y for x, y in zip(a, b)))
                        dist = 1.0 - dot / max(na * nb, COS_EPS)
                        if best is None or dist < best:
                            best = dist
            if best is not None:
                total += best
    return total / n if n else 0.0


# ---------------------------------------------------------------------------
# key-view selection


def select_key_views(cameras: list[Camera], k: int) -> list[int]:
    """Farthest-point sampling over camera positions, seeded at index 0."""
    if not 1 <= k <= len(cameras):
        raise ValidationError(f"k must be in [1, {len(cameras)}]")
    pos = np.array([c.position for c in cameras])
    chosen = [0]
    mind = np.linalg.norm(pos - pos[0], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(pos - pos[nxt], axis=1))
    return chosen


# ---------------------------------------------------------------------------
# stage-2 optimization


@dataclass
class TransferConfig:
    iterations: int = 300
    lr: float = 0.01
    optimizer: str = "adam"         # "adam" or "sgd"
    lambda_style: float = 1.0
    lambda_content: float = 0.05
    mode: str = "ist"               # "ist" or "direct"
    batch: int = 1                  # training views per iteration
    seed: int = 0

    def validate(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.batch < 1:
            raise ValidationError("batch must be >= 1")
        if self.lambda_style < 0 or self.lambda_content < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError("optimizer must be 'adam' or 'sgd'")
        if self.mode not in ("ist", "direct"):
            raise ValidationError("mode must be 'ist' or 'direct'")


class _Adam:
    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, x, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return x - self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class KeyViewData:
    """Precomputed per-key-view state for the IST loop."""
    features: FeatureMap
    group_map: GroupIdentityMap      # at feature resolution
    matching: GroupMatching          # emptiness pattern of this view's groups


def prepare_key_views(scene: GaussianScene, key_images: list[np.ndarray],
                      key_cams: list[Camera], fx: FeatureExtractor,
                      clf: IdentityClassifier) -> list[KeyViewData]:
    """Key-view features and group maps; group maps are rendered from the
    scene geometry at the key cameras (exact, unlike segmenting the stylized
    pixels) and downsampled to the feature stride."""
    out = []
    for i, (img, cam) in enumerate(zip(key_images, key_cams)):
        fm = extract_features(img, fx, source=f"key{i}")
        gm = downsample_group_map(render_identity_map(scene, cam, clf), fx.stride)
        gs = build_group_sets(gm, clf.k)
        out.append(KeyViewData(features=fm, group_map=gm,
                               matching=match_groups(gs, gs)))
    return out


def ist_loss(scene: GaussianScene, cam: Camera, key_data: list[KeyViewData],
             f_orig: np.ndarray, cfg: TransferConfig, fx: FeatureExtractor,
             clf: IdentityClassifier, frozen: np.ndarray | None = None):
    """One forward/backward evaluation of the stage-2 objective at `cam`.

    Returns (style_loss, content_loss, color gradient (N, 3), report).
    """
    out = render(scene, cam)
    feat, cache = fx.forward(out.color)
    f_i = FeatureMap(features=feat, stride=fx.stride)
    m_i = downsample_group_map(
        render_identity_map(scene, cam, clf, out=out), fx.stride)
    report, dstyle = instance_style_loss(
        f_i, [k.features for k in key_data], [k.matching for k in key_data],
        m_i, [k.group_map for k in key_data], frozen=frozen)
    diff = feat - f_orig
    content = float(np.mean(diff ** 2))
    dfeat = cfg.lambda_style * dstyle + cfg.lambda_content * 2.0 * diff / diff.size
    dimg = fx.backward(cache, dfeat)
    grads = render_backward(scene, cam, dimg)
    return report.total, content, grads.d_color, report


def optimize_scene(scene: GaussianScene, key_images: list[np.ndarray],
                   key_cams: list[Camera], train_cams: list[Camera],
                   cfg: TransferConfig, fx: FeatureExtractor,
                   clf: IdentityClassifier):
    """Optimize per-Gaussian colors against the stylized key views.

    mode="ist": group-matched nearest-neighbor style loss plus a feature
    reconstruction anchor against the original renders.  mode="direct":
    plain pixel MSE against the stylized key views at the key cameras.
    Returns (stylized scene, trace) where trace is a list of dicts with
    iteration / style_loss / content_loss / total.
    """
    cfg.validate()
    for img, cam in zip(key_images, key_cams):
        if img.shape[:2] != (cam.height, cam.width):
            raise ValidationError("key image resolution does not match its camera")
    if cfg.iterations == 0:
        return scene, []

    colors = scene.colors()
    work = scene.with_colors(colors)
    opt = _Adam(colors.shape, cfg.lr) if cfg.optimizer == "adam" else None

    rng = np.random.default_rng(cfg.seed)
    trace = []

    if cfg.mode == "direct":
        for it in range(cfg.iterations):
            i = it % len(key_cams)
            cam, target = key_cams[i], key_images[i]
            out = render(work, cam)
            diff = out.color - target
            loss = float(np.mean(diff ** 2))
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at iteration {it}")
            dimg = 2.0 * diff / diff.size
            g = render_backward(work, cam, dimg).d_color
            colors = _apply_step(colors, g, opt, cfg.lr)
            work = scene.with_colors(colors)
            trace.append({"iteration": it, "style_loss": loss,
                          "content_loss": 0.0, "total": loss})
        return work, trace

    key_data = prepare_key_views(scene, key_images, key_cams, fx, clf)
    order = rng.permutation(len(train_cams))
    f_orig = {}
    for it in range(cfg.iterations):
        style = content = 0.0
        g = np.zeros_like(colors)
        for bi in range(cfg.batch):
            ci = int(order[(it * cfg.batch + bi) % len(train_cams)])
            cam = train_cams[ci]
            if ci not in f_orig:
                f_orig[ci] = fx.forward(render(scene, cam).color)[0]
            s, c, gv, _ = ist_loss(work, cam, key_data, f_orig[ci], cfg, fx, clf)
            style += s / cfg.batch
            content += c / cfg.batch
            g += gv / cfg.batch
        total = cfg.lambda_style * style + cfg.lambda_content * content
        if not math.isfinite(total):
            raise NumericError(f"non-finite loss at iteration {it}")
        colors = _apply_step(colors, g, opt, cfg.lr)
        work = scene.with_colors(colors)
        trace.append({"iteration": it, "style_loss": style,
                      "content_loss": content, "total": total})
    return work, trace


def _apply_step(colors, grad, opt, lr):
    if opt is not None:
        colors = opt.step(colors, grad)
    else:
        colors = colors - lr * grad
    return np.clip(colors, 0.0, 1.0)
