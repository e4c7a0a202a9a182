"""Scene and camera data model, synthetic scene generation, JSON serialization.

A scene is an ordered list of anisotropic 3D Gaussians.  Each Gaussian carries
a 16-d identity encoding; synthetic scenes set it to 10 * onehot(group) plus a
small seeded jitter, so the generating group is recoverable by argmax.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError

ID_DIM = 16
PRESETS = ("blocks", "plane", "orbit-clutter")


def quat_to_rotmat(q):
    """Unit quaternion (w, x, y, z) -> 3x3 rotation matrix."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class Gaussian:
    mu: np.ndarray          # (3,) world-space mean
    scale: np.ndarray       # (3,) per-axis stddev, > 0
    rot: np.ndarray         # (4,) unit quaternion (w, x, y, z)
    opacity: float          # in (0, 1]
    color: np.ndarray       # (3,) RGB in [0, 1]
    id_enc: np.ndarray      # (16,) identity encoding

    def covariance(self) -> np.ndarray:
        """World-space covariance R S S^T R^T (always PSD by construction)."""
        r = quat_to_rotmat(self.rot)
        return r @ np.diag(self.scale ** 2) @ r.T


@dataclass
class GaussianScene:
    gaussians: list[Gaussian]
    background: np.ndarray  # (3,) RGB
    n_groups: int
    seed: int

    @property
    def n(self) -> int:
        return len(self.gaussians)

    def colors(self) -> np.ndarray:
        return np.array([g.color for g in self.gaussians])

    def with_colors(self, colors: np.ndarray) -> "GaussianScene":
        gs = [replace(g, color=np.asarray(c, dtype=float)) for g, c in zip(self.gaussians, colors)]
        return GaussianScene(gs, self.background.copy(), self.n_groups, self.seed)


@dataclass
class Camera:
    position: np.ndarray    # (3,)
    rot: np.ndarray         # (4,) unit quaternion, camera-to-world
    fov_y: float            # degrees
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation; columns are the camera axes (x right,
        y down, z forward)."""
        return quat_to_rotmat(self.rot)

    def focal(self) -> float:
        return 0.5 * self.height / math.tan(math.radians(self.fov_y) / 2)


@dataclass
class ViewSet:
    cameras: list[Camera]
    key_indices: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# generation


def _unit_quat(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def _group_palette(k: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(i / k, 0.75, 0.9) for i in range(k)])


def make_scene(preset: str, n_gaussians: int, n_groups: int, seed: int) -> GaussianScene:
    """Deterministic synthetic scene with K spatially contiguous groups.

    Presets:
      blocks        - compact clusters on a jittered grid
      plane         - thin fronto-parallel slab at z = 0, clusters side by side
      orbit-clutter - clusters scattered on a shell around the origin
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    if n_gaussians < 1:
        raise ValidationError("n_gaussians must be >= 1")
    if not 1 <= n_groups <= ID_DIM:
        raise ValidationError(f"n_groups must be in [1, {ID_DIM}]")

    rng = np.random.default_rng(seed)
    palette = _group_palette(n_groups)
    centers = _cluster_centers(preset, n_groups, rng)

    gaussians = []
    for i in range(n_gaussians):
        group = i % n_groups
        if preset == "plane":
            offset = rng.normal(scale=[0.45, 0.45, 0.02], size=3)
            scale = np.exp(rng.normal([-2.0, -2.0, -3.5], 0.25))
        else:
            offset = rng.normal(scale=0.3, size=3)
            scale = np.exp(rng.normal(-2.0, 0.3, size=3))
        color = np.clip(palette[group] + rng.normal(scale=0.05, size=3), 0.0, 1.0)
        id_enc = np.zeros(ID_DIM)
        id_enc[group] = 10.0
        id_enc += rng.uniform(-0.09, 0.09, size=ID_DIM)
        gaussians.append(Gaussian(
            mu=centers[group] + offset,
            scale=scale,
            rot=_unit_quat(rng),
            opacity=float(rng.uniform(0.85, 0.98)),
            color=color,
            id_enc=id_enc,
        ))
    return GaussianScene(gaussians, background=np.full(3, 0.5),
                         n_groups=n_groups, seed=seed)


def _cluster_centers(preset: str, k: int, rng) -> np.ndarray:
    if preset == "blocks":
        side = math.ceil(math.sqrt(k))
        grid = []
        for i in range(k):
            gx, gy = i % side, i // side
            grid.append([(gx - (side - 1) / 2) * 2.2,
                         (gy - (side - 1) / 2) * 2.2, 0.0])
        return np.array(grid) + rng.normal(scale=0.1, size=(k, 3))
    if preset == "plane":
        xs = (np.arange(k) - (k - 1) / 2) * (3.0 / max(k, 2))
        return np.stack([xs, np.zeros(k), np.zeros(k)], axis=1)
    # orbit-clutter: directions on a shell
    dirs = rng.normal(size=(k, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * rng.uniform(1.0, 1.8, size=(k, 1))


def true_groups(scene: GaussianScene) -> np.ndarray:
    """Generating group index of each Gaussian (argmax of the near-one-hot
    identity encoding)."""
    return np.array([int(np.argmax(g.id_enc)) for g in scene.gaussians])


def make_orbit_cameras(n: int, radius: float = 5.0, elevation: float = 0.8,
                       width: int = 64, height: int = 64, fov_y: float = 45.0,
                       target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """n cameras on a circle around `target`, all looking at it."""
    target = np.asarray(target, dtype=float)
    cams = []
    for i in range(n):
        ang = 2 * math.pi * i / n
        pos = target + np.array([radius * math.cos(ang), radius * math.sin(ang), elevation])
        cams.append(look_at_camera(pos, target, width=width, height=height, fov_y=fov_y))
    return cams


def look_at_camera(position, target, width=64, height=64, fov_y=45.0,
                   near=0.05, far=100.0) -> Camera:
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(up, fwd)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=1)  # camera-to-world, y points down
    return Camera(position=position, rot=rotmat_to_quat(r), fov_y=fov_y,
                  width=width, height=height, near=near, far=far)


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix -> unit quaternion (w, x, y, z), w >= 0."""
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k]) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# validation


def validate_scene(scene: GaussianScene) -> list[str]:
    """Return a list of human-readable invariant violations (empty = valid).

    Never raises; used both as a guard inside render() and as a CLI check.
    """
    out = []
    if scene.n_groups < 1:
        out.append("scene: n_groups must be >= 1")
    for i, g in enumerate(scene.gaussians):
        if abs(np.linalg.norm(g.rot) - 1.0) > 1e-6:
            out.append(f"gaussian {i}: quaternion norm != 1")
        if not np.all(g.scale > 0):
            out.append(f"gaussian {i}: non-positive scale component")
        if not (0.0 < g.opacity <= 1.0):
            out.append(f"gaussian {i}: opacity outside (0, 1]")
        if not (np.all(g.color >= 0.0) and np.all(g.color <= 1.0)):
            out.append(f"gaussian {i}: color component outside [0, 1]")
        if g.id_enc.shape != (ID_DIM,):
            out.append(f"gaussian {i}: id_enc must have length {ID_DIM}")
        elif scene.n_groups >= 1 and not 0 <= int(np.argmax(g.id_enc)) < scene.n_groups:
            out.append(f"gaussian {i}: group index outside [0, {scene.n_groups})")
    return out


def validate_camera(cam: Camera) -> list[str]:
    out = []
    if cam.width < 1 or cam.height < 1:
        out.append("camera: width and height must be >= 1")
    if not 0.0 < cam.fov_y < 180.0:
        out.append("camera: fov_y must be in (0, 180)")
    if not 0.0 < cam.near < cam.far:
        out.append("camera: need 0 < near < far")
    r = cam.rotation()
    if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
        out.append("camera: rotation not orthonormal")
    return out


# ---------------------------------------------------------------------------
# serialization (full round-trip float precision; canonical byte layout)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def scene_to_dict(scene: GaussianScene) -> dict:
    return {
        "seed": scene.seed,
        "n_groups": scene.n_groups,
        "background": list(map(float, scene.background)),
        "gaussians": [
            {
                "mu": list(map(float, g.mu)),
                "scale": list(map(float, g.scale)),
                "rot": list(map(float, g.rot)),
                "opacity": float(g.opacity),
                "color": list(map(float, g.color)),
                "id_enc": list(map(float, g.id_enc)),
            }
            for g in scene.gaussians
        ],
    }


def scene_from_dict(d: dict) -> GaussianScene:
    gaussians = [
        Gaussian(
            mu=np.array(g["mu"], dtype=float),
            scale=np.array(g["scale"], dtype=float),
            rot=np.array(g["rot"], dtype=float),
            opacity=float(g["opacity"]),
            color=np.array(g["color"], dtype=float),
            id_enc=np.array(g["id_enc"], dtype=float),
        )
        for g in d["gaussians"]
    ]
    return GaussianScene(gaussians, np.array(d["background"], dtype=float),
                         int(d["n_groups"]), int(d["seed"]))


def save_scene(scene: GaussianScene, path) -> None:
    Path(path).write_text(_dumps(scene_to_dict(scene)))


def load_scene(path) -> GaussianScene:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"scene file not found: {p}")
    return scene_from_dict(json.loads(p.read_text()))


def camera_to_dict(cam: Camera) -> dict:
    return {
        "position": list(map(float, cam.position)),
        "rot": list(map(float, cam.rot)),
        "fov_y": float(cam.fov_y),
        "width": int(cam.width),
        "height": int(cam.height),
        "near": float(cam.near),
        "far": float(cam.far),
    }


def camera_from_dict(d: dict) -> Camera:
    return Camera(position=np.array(d["position"], dtype=float),
                  rot=np.array(d["rot"], dtype=float), fov_y=float(d["fov_y"]),
                  width=int(d["width"]), height=int(d["height"]),
                  near=float(d["near"]), far=float(d["far"]))


def save_viewset(vs: ViewSet, path) -> None:
    d = {"cameras": [camera_to_dict(c) for c in vs.cameras],
         "key_indices": list(map(int, vs.key_indices))}
    Path(path).write_text(_dumps(d))


def load_viewset(path) -> ViewSet:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"camera file not found: {p}")
    d = json.loads(p.read_text())
    if "cameras" not in d:  # single-camera file
        return ViewSet([camera_from_dict(d)], [])
    vs = ViewSet([camera_from_dict(c) for c in d["cameras"]],
                 [int(i) for i in d.get("key_indices", [])])
    if len(set(vs.key_indices)) != len(vs.key_indices) or any(
            not 0 <= i < len(vs.cameras) for i in vs.key_indices):
        raise ValidationError("key_indices must be unique and in range")
    return vs
