"""DDIM inversion/denoising, attention, and the seeded toy denoiser.

The denoiser is a fixed-weight 3-level convolutional encoder/decoder that
works directly in RGB image space.  Conditioning enters through two fixed
interfaces: a per-view depth map concatenated as a fourth input channel and a
12-d style embedding added to the middle features.  One attention slot
(enc1/enc2/mid/dec1/dec2-last) can be activated; in multi-view lockstep mode
that slot attends over the concatenated features of all views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError, ValidationError

CVSA_BLOCKS = ("none", "enc1", "enc2", "mid", "dec1", "dec2-last")
EMBED_DIM = 12


@dataclass
class DDIMSchedule:
    alpha_bar: np.ndarray   # length T+1, alpha_bar[0] = 1, strictly decreasing

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DDIMSchedule:
    """Cumulative-product schedule over a linear beta ramp."""
    if T < 1:
        raise ValidationError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValidationError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DDIMSchedule(alpha_bar=alpha_bar)


@dataclass
class LatentState:
    z: np.ndarray
    t: int


@dataclass
class StyleConditioning:
    style_image: np.ndarray | None   # (H, W, 3) reference, or None for null
    embedding: np.ndarray            # (12,) pure function of style_image
    depth: np.ndarray | None = None  # (H, W) per-view depth channel

    @classmethod
    def from_style(cls, style_image: np.ndarray, depth=None) -> "StyleConditioning":
        return cls(style_image=style_image, embedding=style_embedding(style_image),
                   depth=depth)

    @classmethod
    def null(cls, depth=None) -> "StyleConditioning":
        return cls(style_image=None, embedding=np.zeros(EMBED_DIM), depth=depth)


def style_embedding(img: np.ndarray) -> np.ndarray:
    """Mean color (3) plus the 3x3 channel correlation matrix (9)."""
    x = img.reshape(-1, 3)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / len(x)
    std = np.sqrt(np.diag(cov))
    corr = cov / np.maximum(np.outer(std, std), 1e-8)
    return np.concatenate([mean, corr.ravel()])


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionBlock:
    wq: np.ndarray   # (d_in, d)
    wk: np.ndarray
    wv: np.ndarray

    @property
    def d(self) -> int:
        return self.wq.shape[1]

    @classmethod
    def seeded(cls, rng, d_in: int, d: int) -> "AttentionBlock":
        s = 1.0 / math.sqrt(d_in)
        return cls(wq=rng.normal(0, s, (d_in, d)),
                   wk=rng.normal(0, s, (d_in, d)),
                   wv=rng.normal(0, s, (d_in, d)))


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def self_attention(blk: AttentionBlock, z: np.ndarray) -> np.ndarray:
    """Softmax(Q(z) K(z)^T / sqrt(d)) V(z), rows of z are tokens."""
    if z.shape[1] != blk.wq.shape[0]:
        raise ValidationError(f"feature dim {z.shape[1]} != block dim {blk.wq.shape[0]}")
    q = z @ blk.wq
    k = z @ blk.wk
    v = z @ blk.wv
    return _softmax_rows(q @ k.T / math.sqrt(blk.d)) @ v


def cross_view_attention(blk: AttentionBlock, z: np.ndarray,
                         others: np.ndarray) -> np.ndarray:
    """Queries from z, keys/values from the concatenated view features
    `others` (which must include z's own features)."""
    if z.shape[1] != blk.wq.shape[0] or others.shape[1] != blk.wq.shape[0]:
        raise ValidationError("feature dim mismatch between views and block")
    q = z @ blk.wq
    k = others @ blk.wk
    v = others @ blk.wv
    return _softmax_rows(q @ k.T / math.sqrt(blk.d)) @ v


# ---------------------------------------------------------------------------
# toy denoiser


def _conv3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 same-padding convolution; w has shape (3, 3, Cin, Cout)."""
    h, wid, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(b, (h, wid, w.shape[3])).copy()
    for dy in range(3):
        for dx in range(3):
            out += xp[dy:dy + h, dx:dx + wid] @ w[dy, dx]
    return out


def _pool2(x: np.ndarray) -> np.ndarray:
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def _time_embedding(t: int) -> np.ndarray:
    freqs = np.array([1.0, 0.1, 0.01, 0.001])
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


class Denoiser:
    """Seeded fixed-weight noise predictor with one optional attention slot.

    Channel plan: input 4 (RGB + depth) -> enc1 16 -> enc2 32 -> mid 48
    -> dec1 32 -> dec2 16 -> output 3.  Weights are never trained; the
    output convolution is scaled down so the predicted noise stays small and
    smooth (keeps the invert/denoise roundtrip tight).
    """

    CHANNELS = {"enc1": 16, "enc2": 32, "mid": 48, "dec1": 32, "dec2-last": 16}
    OUT_SCALE = 0.7
    STYLE_SCALE = 30.0

    def __init__(self, seed: int = 0, cvsa_block: str = "dec2-last"):
        if cvsa_block not in CVSA_BLOCKS:
            raise ValidationError(f"cvsa_block must be one of {CVSA_BLOCKS}")
        self.seed = seed
        self.cvsa_block = cvsa_block
        rng = np.random.default_rng(seed)

        def conv(cin, cout, scale=1.0):
            s = scale / math.sqrt(9 * cin)
            return rng.normal(0, s, (3, 3, cin, cout)), np.zeros(cout)

        self.w_enc1 = conv(4, 16)
        self.w_enc2 = conv(16, 32)
        self.w_mid = conv(32, 48)
        self.w_dec1 = conv(48 + 32, 32)
        self.w_dec2 = conv(32 + 16, 16)
        self.w_out = conv(16, 3, scale=self.OUT_SCALE)
        self.style_proj = rng.normal(0, self.STYLE_SCALE / math.sqrt(EMBED_DIM),
                                     (EMBED_DIM, 48))
        self.time_proj = rng.normal(0, 1.0 / math.sqrt(8), (8, 48))
        # every slot draws its weights so the stream of random numbers (and
        # hence all conv weights) is independent of which slot is active
        self.attn = {name: AttentionBlock.seeded(rng, c, c)
                     for name, c in self.CHANNELS.items()}

    def __call__(self, z: np.ndarray, t: int, cond: StyleConditioning) -> np.ndarray:
        return self.forward_views([z], t, [cond], cross_view=False)[0]

    def forward_views(self, zs: list[np.ndarray], t: int,
                      conds: list[StyleConditioning],
                      cross_view: bool = False) -> list[np.ndarray]:
        """Predict noise for each view.

        With cross_view=True the active attention slot shares keys/values
        across all views (lockstep); otherwise each view is independent and
        the slot computes plain self-attention.
        """
        joint = cross_view and self.cvsa_block != "none" and len(zs) > 0

        states = []
        for z, cond in zip(zs, conds):
            depth = cond.depth if cond.depth is not None else np.zeros(z.shape[:2])
            states.append({"x": np.concatenate([z, depth[..., None]], axis=2),
                           "cond": cond})

        def stage(name, key, fn):
            feats = [fn(s) for s in states]
            if name == self.cvsa_block:
                feats = self._attend(name, feats, joint)
            for s, f in zip(states, feats):
                s[key] = f

        stage("enc1", "e1", lambda s: np.tanh(_conv3(s["x"], *self.w_enc1)))
        stage("enc2", "e2", lambda s: np.tanh(_conv3(_pool2(s["e1"]), *self.w_enc2)))

        def mid_fn(s):
            m = _conv3(_pool2(s["e2"]), *self.w_mid)
            m = m + s["cond"].embedding @ self.style_proj + _time_embedding(t) @ self.time_proj
            return np.tanh(m)

        stage("mid", "m", mid_fn)
        stage("dec1", "d1", lambda s: np.tanh(
            _conv3(np.concatenate([_upsample2(s["m"]), s["e2"]], axis=2), *self.w_dec1)))
        stage("dec2-last", "d2", lambda s: np.tanh(
            _conv3(np.concatenate([_upsample2(s["d1"]), s["e1"]], axis=2), *self.w_dec2)))
        return [_conv3(s["d2"], *self.w_out) for s in states]

    def _attend(self, name: str, feats: list[np.ndarray], joint: bool) -> list[np.ndarray]:
        blk = self.attn[name]
        shapes = [f.shape for f in feats]
        toks = [f.reshape(-1, f.shape[2]) for f in feats]
        if joint:
            kv = np.concatenate(toks, axis=0)
            return [(tk + cross_view_attention(blk, tk, kv)).reshape(sh)
                    for tk, sh in zip(toks, shapes)]
        return [(tk + self_attention(blk, tk)).reshape(sh)
                for tk, sh in zip(toks, shapes)]


# ---------------------------------------------------------------------------
# DDIM recursions


def _check_finite(z: np.ndarray, what: str, step: int) -> None:
    if not np.all(np.isfinite(z)):
        raise NumericError(f"non-finite latent at {what} step {step}")


def ddim_invert(z0: LatentState, den, sch: DDIMSchedule,
                cond: StyleConditioning) -> LatentState:
    """Run the deterministic inversion recursion from t=0 up to t=T."""
    if z0.t != 0:
        raise ValidationError("inversion must start at t = 0")
    ab = sch.alpha_bar
    z = z0.z
    for t in range(1, sch.T + 1):
        eps = den(z, t, cond)
        z = (math.sqrt(ab[t]) / math.sqrt(ab[t - 1])) * (
            z - math.sqrt(1 - ab[t - 1]) * eps) + math.sqrt(1 - ab[t]) * eps
        _check_finite(z, "inversion", t)
    return LatentState(z=z, t=sch.T)


def ddim_denoise(zT: LatentState, den, sch: DDIMSchedule,
                 cond: StyleConditioning) -> LatentState:
    """Run the deterministic denoising recursion from t=T down to t=0."""
    if zT.t != sch.T:
        raise ValidationError("denoising must start at t = T")
    ab = sch.alpha_bar
    z = zT.z
    for t in range(sch.T, 0, -1):
        eps = den(z, t, cond)
        z = math.sqrt(ab[t - 1]) * (z - math.sqrt(1 - ab[t]) * eps) / math.sqrt(ab[t]) \
            + math.sqrt(1 - ab[t - 1]) * eps
        _check_finite(z, "denoising", t)
    return LatentState(z=z, t=0)


# ---------------------------------------------------------------------------
# key-view stylization


def stylize_key_views(renders: list[np.ndarray], depths: list[np.ndarray],
                      style: StyleConditioning, den: Denoiser,
                      sch: DDIMSchedule) -> list[np.ndarray]:
    """Invert each view under null conditioning, denoise under style
    conditioning; with an active attention slot all views advance in lockstep
    so the slot can mix features across views at every timestep."""
    if len(renders) != len(depths) or not renders:
        raise ValidationError("need equally many renders and depths (>= 1)")
    shape = renders[0].shape
    if any(r.shape != shape for r in renders) or any(
            d.shape != shape[:2] for d in depths):
        raise ValidationError("all views must share one resolution")

    nulls = [StyleConditioning.null(depth=d) for d in depths]
    styles = [replace(style, depth=d) for d in depths]
    cvsa = getattr(den, "cvsa_block", "none") != "none"

    if not cvsa:
        outs = []
        for img, cn, cs in zip(renders, nulls, styles):
            zT = ddim_invert(LatentState(img, 0), den, sch, cn)
            z0 = ddim_denoise(zT, den, sch, cs)
            outs.append(np.clip(z0.z, 0.0, 1.0))
        return outs

    ab = sch.alpha_bar
    zs = [img.astype(float) for img in renders]
    for t in range(1, sch.T + 1):
        eps = den.forward_views(zs, t, nulls, cross_view=True)
        zs = [(math.sqrt(ab[t]) / math.sqrt(ab[t - 1])) * (
            z - math.sqrt(1 - ab[t - 1]) * e) + math.sqrt(1 - ab[t]) * e
            for z, e in zip(zs, eps)]
        for z in zs:
            _check_finite(z, "inversion", t)
    for t in range(sch.T, 0, -1):
        eps = den.forward_views(zs, t, styles, cross_view=True)
        zs = [math.sqrt(ab[t - 1]) * (z - math.sqrt(1 - ab[t]) * e) / math.sqrt(ab[t])
              + math.sqrt(1 - ab[t - 1]) * e for z, e in zip(zs, eps)]
        for z in zs:
            _check_finite(z, "denoising", t)
    return [np.clip(z, 0.0, 1.0) for z in zs]
