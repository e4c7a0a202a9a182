"""Perspective projection of 3D Gaussians and front-to-back alpha compositing.

Rendering composites color, 16-d identity features, coverage, and an expected
splat depth in one pass.  The backward pass is the adjoint of the compositing
sum restricted to per-Gaussian colors / identity encodings: the compositing
weight w_i of a splat at a pixel is also d(pixel)/d(c_i).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import ValidationError
from .scene import Camera, Gaussian, GaussianScene, quat_to_rotmat, validate_scene

ALPHA_CLAMP = 0.99
FALLOFF_CUTOFF = 1.0 / 255.0
COVERAGE_EPS = 1e-4       # tau_cov: below this the depth channel reads 0
LOWPASS = 0.3             # px^2 screen-space dilation added to cov2d
# radius of the 1/255 falloff contour along the major axis; outside it every
# contribution is zeroed by FALLOFF_CUTOFF, so bbox and cutoff rules agree
CUT_RADIUS = math.sqrt(-2.0 * math.log(FALLOFF_CUTOFF))


@dataclass
class Splat2D:
    center: np.ndarray        # (2,) pixel coords (x, y)
    cov2d: np.ndarray         # (2, 2) SPD, pixels^2
    depth: float              # camera-space distance of mu
    gaussian_index: int


@dataclass
class RenderOutput:
    color: np.ndarray         # (H, W, 3) in [0, 1], background composited
    depth: np.ndarray         # (H, W), 0 where coverage < tau_cov
    id_features: np.ndarray   # (H, W, 16) composited identity encodings
    coverage: np.ndarray      # (H, W) accumulated sum of alpha_i * T_i

    _background: np.ndarray = None  # set by render()

    def foreground(self) -> np.ndarray:
        """Color before background compositing."""
        if self._background is None:
            return self.color
        return self.color - (1.0 - self.coverage)[..., None] * self._background


@dataclass
class ColorGradient:
    d_color: np.ndarray       # (N, 3) dL/dc_i
    d_id: np.ndarray          # (N, 16) dL/de_i


def project_gaussian(g: Gaussian, cam: Camera, cull: bool = True,
                     index: int = -1) -> Optional[Splat2D]:
    """EWA-style linearized projection of one Gaussian.

    Returns None when mu is behind the near plane, or (if cull) when the
    1/255 falloff contour misses the image entirely.
    """
    w2c = cam.rotation().T
    p = w2c @ (g.mu - cam.position)
    z = p[2]
    if z < cam.near:
        return None
    f = cam.focal()
    u = f * p[0] / z + (cam.width - 1) / 2
    v = f * p[1] / z + (cam.height - 1) / 2
    jac = np.array([[f / z, 0.0, -f * p[0] / z ** 2],
                    [0.0, f / z, -f * p[1] / z ** 2]])
    m = jac @ w2c
    cov2d = m @ g.covariance() @ m.T + LOWPASS * np.eye(2)
    if cull:
        lam_max = 0.5 * (cov2d[0, 0] + cov2d[1, 1]) + math.hypot(
            0.5 * (cov2d[0, 0] - cov2d[1, 1]), cov2d[0, 1])
        r = CUT_RADIUS * math.sqrt(max(lam_max, 0.0))
        if (u + r < -0.5 or u - r > cam.width - 0.5
                or v + r < -0.5 or v - r > cam.height - 0.5):
            return None
    return Splat2D(center=np.array([u, v]), cov2d=cov2d,
                   depth=float(np.linalg.norm(p)), gaussian_index=index)


def _sorted_splats(scene: GaussianScene, cam: Camera, cull: bool) -> list[Splat2D]:
    splats = []
    for i, g in enumerate(scene.gaussians):
        s = project_gaussian(g, cam, cull=cull, index=i)
        if s is not None:
            splats.append(s)
    splats.sort(key=lambda s: (s.depth, s.gaussian_index))
    return splats


def _splat_weights(scene: GaussianScene, cam: Camera,
                   cutoff: bool) -> Iterator[tuple[int, slice, slice, np.ndarray]]:
    """Yield (gaussian_index, row slice, col slice, weight patch) front to back.

    The weight patch is alpha_i' * T_i over the splat's pixel window; the
    shared transmittance image is updated in depth order, so iteration order
    matters and must not be reordered.
    """
    h, w = cam.height, cam.width
    trans = np.ones((h, w))
    ys = np.arange(h)
    xs = np.arange(w)
    for s in _sorted_splats(scene, cam, cull=cutoff):
        g = scene.gaussians[s.gaussian_index]
        a, b, c = s.cov2d[0, 0], s.cov2d[0, 1], s.cov2d[1, 1]
        det = a * c - b * b
        if det <= 0:
            continue
        if cutoff:
            lam_max = 0.5 * (a + c) + math.hypot(0.5 * (a - c), b)
            r = CUT_RADIUS * math.sqrt(lam_max)
            x0 = max(int(math.floor(s.center[0] - r)), 0)
            x1 = min(int(math.ceil(s.center[0] + r)) + 1, w)
            y0 = max(int(math.floor(s.center[1] - r)), 0)
            y1 = min(int(math.ceil(s.center[1] + r)) + 1, h)
            if x0 >= x1 or y0 >= y1:
                continue
        else:
            x0, x1, y0, y1 = 0, w, 0, h
        dx = xs[x0:x1] - s.center[0]
        dy = ys[y0:y1] - s.center[1]
        # quadratic form d^T cov2d^{-1} d via the 2x2 inverse
        q = (c * dx[None, :] ** 2 - 2 * b * dy[:, None] * dx[None, :]
             + a * dy[:, None] ** 2) / det
        falloff = np.exp(-0.5 * q)
        if cutoff:
            falloff = np.where(falloff < FALLOFF_CUTOFF, 0.0, falloff)
        alpha = np.minimum(g.opacity * falloff, ALPHA_CLAMP)
        rows, cols = slice(y0, y1), slice(x0, x1)
        weight = alpha * trans[rows, cols]
        yield s.gaussian_index, rows, cols, weight, s.depth
        trans[rows, cols] *= 1.0 - alpha


def render(scene: GaussianScene, cam: Camera, cutoff: bool = True) -> RenderOutput:
    """Alpha-composite the scene front to back at `cam`.

    cutoff=False disables both the 1/255 falloff cutoff and the footprint
    culling, making the result exactly comparable to a brute-force per-pixel
    compositing oracle.
    """
    violations = validate_scene(scene)
    if violations:
        raise ValidationError("; ".join(violations[:5]))
    h, w = cam.height, cam.width
    fg = np.zeros((h, w, 3))
    idf = np.zeros((h, w, 16))
    cov = np.zeros((h, w))
    depth_acc = np.zeros((h, w))
    for gi, rows, cols, weight, depth in _splat_weights(scene, cam, cutoff):
        g = scene.gaussians[gi]
        fg[rows, cols] += weight[..., None] * g.color
        idf[rows, cols] += weight[..., None] * g.id_enc
        cov[rows, cols] += weight
        depth_acc[rows, cols] += weight * depth
    covered = cov >= COVERAGE_EPS
    depth = np.where(covered, depth_acc / np.where(covered, cov, 1.0), 0.0)
    color = fg + (1.0 - cov)[..., None] * scene.background
    out = RenderOutput(color=color, depth=depth, id_features=idf, coverage=cov)
    out._background = scene.background
    return out


def render_backward(scene: GaussianScene, cam: Camera,
                    upstream: np.ndarray, cutoff: bool = True) -> ColorGradient:
    """Adjoint of render() w.r.t. per-Gaussian colors or identity encodings.

    upstream has shape (H, W, 3) (color path) or (H, W, 16) (identity path);
    geometry, opacity, and background are frozen and receive no gradient.
    """
    if upstream.shape[:2] != (cam.height, cam.width) or upstream.shape[2] not in (3, 16):
        raise ValidationError(
            f"upstream shape {upstream.shape} does not match a "
            f"{cam.height}x{cam.width} render with 3 or 16 channels")
    n = scene.n
    d_color = np.zeros((n, 3))
    d_id = np.zeros((n, 16))
    target = d_color if upstream.shape[2] == 3 else d_id
    for gi, rows, cols, weight, _ in _splat_weights(scene, cam, cutoff):
        target[gi] += np.tensordot(weight, upstream[rows, cols], axes=([0, 1], [0, 1]))
    return ColorGradient(d_color=d_color, d_id=d_id)
