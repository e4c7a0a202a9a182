"""Multi-view consistency metrics via exact depth reprojection, plus Gram
style / feature reconstruction losses.

The scene owns its geometry, so view warping uses the rendered depth directly
instead of estimated optical flow; the covisibility mask plays the role of
masked scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .scene import Camera, GaussianScene
from .splat import COVERAGE_EPS, RenderOutput, render
from .styling import FeatureExtractor

WEIGHT_MIN = 0.5          # minimum accumulated bilinear splat weight
DEPTH_REL_TOL = 0.01      # occlusion test: 1% relative depth agreement


@dataclass
class WarpResult:
    warped: np.ndarray    # (H, W, 3)
    mask: np.ndarray      # (H, W) bool, covisible pixels


@dataclass
class ConsistencyReport:
    pairs: list[dict]
    short_range: dict
    long_range: dict


def _pixel_rays(cam: Camera) -> np.ndarray:
    """Unit ray directions in camera space, (H, W, 3)."""
    f = cam.focal()
    xs = (np.arange(cam.width) - (cam.width - 1) / 2) / f
    ys = (np.arange(cam.height) - (cam.height - 1) / 2) / f
    d = np.stack([np.broadcast_to(xs, (cam.height, cam.width)),
                  np.broadcast_to(ys[:, None], (cam.height, cam.width)),
                  np.ones((cam.height, cam.width))], axis=2)
    return d / np.linalg.norm(d, axis=2, keepdims=True)


def warp_view(src: RenderOutput, cam_src: Camera, cam_dst: Camera,
              dst: RenderOutput | None = None) -> WarpResult:
    """Forward-warp `src` into `cam_dst` using the rendered depth channel.

    Every covered source pixel is unprojected along its ray by its depth
    (camera-space distance), reprojected, and splatted with bilinear weights.
    Destination pixels pass the mask when the accumulated weight exceeds 0.5
    and, when `dst` is given, the reprojected depth agrees with the
    destination's rendered depth within 1% (occlusion test).
    """
    if src.depth is None:
        raise ValidationError("source render has no depth channel")
    h, w = src.depth.shape
    rays = _pixel_rays(cam_src)
    valid = src.depth > 0
    p_world = (cam_src.rotation() @ (rays * src.depth[..., None]).reshape(-1, 3).T).T \
        + cam_src.position
    p_dst = (cam_dst.rotation().T @ (p_world - cam_dst.position).T).T.reshape(h, w, 3)
    z = p_dst[..., 2]
    dist = np.linalg.norm(p_dst, axis=2)
    f = cam_dst.focal()
    u = f * p_dst[..., 0] / np.where(z > 0, z, 1.0) + (cam_dst.width - 1) / 2
    v = f * p_dst[..., 1] / np.where(z > 0, z, 1.0) + (cam_dst.height - 1) / 2
    ok = valid & (z > cam_dst.near)

    hw, ww = cam_dst.height, cam_dst.width
    wsum = np.zeros((hw, ww))
    csum = np.zeros((hw, ww, 3))
    dsum = np.zeros((hw, ww))
    uu, vv = u[ok], v[ok]
    cols = src.color[ok]
    dd = dist[ok]
    x0 = np.floor(uu).astype(int)
    y0 = np.floor(vv).astype(int)
    fx = uu - x0
    fy = vv - y0
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            inb = (xi >= 0) & (xi < ww) & (yi >= 0) & (yi < hw)
            np.add.at(wsum, (yi[inb], xi[inb]), wt[inb])
            np.add.at(csum, (yi[inb], xi[inb]), wt[inb, None] * cols[inb])
            np.add.at(dsum, (yi[inb], xi[inb]), wt[inb] * dd[inb])
    mask = wsum > WEIGHT_MIN
    warped = csum / np.maximum(wsum, 1e-12)[..., None]
    warped[~(wsum > 0)] = 0.0
    if dst is not None:
        warp_depth = dsum / np.maximum(wsum, 1e-12)
        agree = (dst.depth > 0) & (
            np.abs(warp_depth - dst.depth) <= DEPTH_REL_TOL * dst.depth)
        mask &= agree
    return WarpResult(warped=warped, mask=mask)


def consistency_score(a: np.ndarray, b: np.ndarray, mask: np.ndarray,
                      fx: FeatureExtractor | None = None,
                      mode: str = "rmse") -> float:
    """Masked RMSE in color space, or in feature space over feature cells
    whose stride block is majority-masked."""
    if a.shape != b.shape or a.shape[:2] != mask.shape:
        raise ValidationError("image/mask shape mismatch")
    if not np.any(mask):
        raise ValidationError("empty mask: consistency score undefined")
    if mode == "rmse":
        diff = (a - b)[mask]
        return float(np.sqrt(np.mean(diff ** 2)))
    if mode == "feature":
        if fx is None:
            raise ValidationError("feature mode needs a feature extractor")
        fa, _ = fx.forward(a)
        fb, _ = fx.forward(b)
        s = fx.stride
        h, w = mask.shape
        frac = mask.reshape(h // s, s, w // s, s).mean(axis=(1, 3))
        cell_mask = frac > 0.5
        if not np.any(cell_mask):
            raise ValidationError("empty feature-cell mask")
        diff = (fa - fb)[cell_mask]
        return float(np.sqrt(np.mean(diff ** 2)))
    raise ValidationError(f"unknown mode {mode!r}")


def _gram(feat: np.ndarray) -> np.ndarray:
    f = feat.reshape(-1, feat.shape[2])
    return f.T @ f / len(f)


def perceptual_metrics(img: np.ndarray, style: np.ndarray,
                       content_ref: np.ndarray | None,
                       fx: FeatureExtractor) -> dict:
    """Gram-matrix style loss against `style` and feature reconstruction loss
    against `content_ref` (skipped when None)."""
    f_img, _ = fx.forward(img)
    f_sty, _ = fx.forward(style)
    style_loss = float(np.sum((_gram(f_img) - _gram(f_sty)) ** 2))
    out = {"style_loss": style_loss}
    if content_ref is not None:
        if content_ref.shape != img.shape:
            raise ValidationError("content reference size mismatch")
        f_ref, _ = fx.forward(content_ref)
        out["content_loss"] = float(np.mean((f_img - f_ref) ** 2))
    return out


def consistency_report(scene: GaussianScene, cameras: list[Camera],
                       fx: FeatureExtractor) -> ConsistencyReport:
    """Short-range pairs are consecutive cameras; long-range pairs take each
    camera with its positionally farthest camera.  For each pair the first
    view is warped into the second and scored on the covisibility mask."""
    if len(cameras) < 2:
        raise ValidationError("need at least 2 cameras")
    renders = [render(scene, c) for c in cameras]
    pos = np.array([c.position for c in cameras])

    def score(i, j, kind):
        wr = warp_view(renders[i], cameras[i], cameras[j], dst=renders[j])
        try:
            frmse = consistency_score(wr.warped, renders[j].color, wr.mask,
                                      fx=fx, mode="feature")
        except ValidationError:
            frmse = None    # too little covisibility for any feature cell
        return {
            "kind": kind, "src": i, "dst": j,
            "rmse": consistency_score(wr.warped, renders[j].color, wr.mask),
            "feature_rmse": frmse,
        }

    pairs = [score(i, i + 1, "short") for i in range(len(cameras) - 1)]
    for i in range(len(cameras)):
        j = int(np.argmax(np.linalg.norm(pos - pos[i], axis=1)))
        pairs.append(score(i, j, "long"))

    def agg(kind):
        sel = [p for p in pairs if p["kind"] == kind]
        fsel = [p["feature_rmse"] for p in sel if p["feature_rmse"] is not None]
        return {"rmse": float(np.mean([p["rmse"] for p in sel])),
                "feature_rmse": float(np.mean(fsel)) if fsel else None}

    return ConsistencyReport(pairs=pairs, short_range=agg("short"),
                             long_range=agg("long"))


def instance_region_consistency(images: list[np.ndarray],
                                group_maps, fx: FeatureExtractor) -> float:
    """Mean pairwise distance between per-view mean features of matching
    instance regions; used to compare cross-view alignment on vs. off."""
    feats = [fx.forward(img)[0] for img in images]
    k = group_maps[0].k
    dists = []
    for gid in range(k):
        means = []
        for f, gm in zip(feats, group_maps):
            sel = gm.ids == gid
            if np.any(sel):
                means.append(f[sel].mean(axis=0))
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                dists.append(float(np.linalg.norm(means[i] - means[j])))
    return float(np.mean(dists)) if dists else 0.0
