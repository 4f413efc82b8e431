"""Software renderer for arm scenes.

Scenes are rasterised in colour at 160x210 (width x height), converted to
grey-scale and bilinearly resized to 84x84. Two fixed styles exist: ``A``
(clean simulator look) and ``B`` (a darker, textured, slightly shifted
"camera" look used as the second image domain).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RenderConfig
from .sim import Arm, SceneConfig

RAW_W, RAW_H = 160, 210
OUT = 84
GREY = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class StyleParams:
    background: tuple[float, float, float]
    texture_amp: float
    base_color: tuple[float, float, float]
    link_color: tuple[float, float, float]
    link_width: float
    joint_color: tuple[float, float, float]
    joint_radius: float
    tip_color: tuple[float, float, float]
    tip_radius: float
    target_color: tuple[float, float, float]
    offset: tuple[float, float] = (0.0, 0.0)
    shading: float = 0.0
    texture_seed: int = 0


@dataclass(frozen=True)
class Occluder:
    """Filled rectangle in 84x84 output pixel coordinates (x0, y0, x1, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float
    value: float = 0.5


def style_params(style: str, rcfg: RenderConfig | None = None) -> StyleParams:
    rcfg = rcfg or RenderConfig()
    if style == "A":
        return StyleParams(
            background=(0.9, 0.92, 0.95),
            texture_amp=0.0,
            base_color=(0.4, 0.4, 0.42),
            link_color=(0.55, 0.55, 0.6),
            link_width=0.06,
            joint_color=(0.3, 0.3, 0.3),
            joint_radius=0.04,
            tip_color=(0.25, 0.25, 0.25),
            tip_radius=0.035,
            target_color=(0.05, 0.1, 0.85),
        )
    if style == "B":
        return StyleParams(
            background=(0.3, 0.26, 0.22),
            texture_amp=0.08,
            base_color=(0.62, 0.6, 0.58),
            link_color=(0.85, 0.78, 0.7),
            link_width=0.06 * rcfg.b_thickness_scale,
            joint_color=(0.95, 0.95, 0.9),
            joint_radius=0.05,
            tip_color=(1.0, 1.0, 1.0),
            tip_radius=0.04,
            target_color=(0.3, 0.5, 1.0),
            offset=(rcfg.b_offset_x, rcfg.b_offset_y),
            shading=0.12,
            texture_seed=rcfg.b_texture_seed,
        )
    raise ValueError(f"unknown render style {style!r}")


@functools.lru_cache(maxsize=4)
def _texture(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:RAW_H, 0:RAW_W] / np.array([RAW_H, RAW_W])[:, None, None]
    tex = np.zeros((RAW_H, RAW_W))
    for _ in range(6):
        fx, fy = rng.uniform(1.0, 6.0, 2)
        ph = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    tex /= 6.0
    tex += 0.5 * rng.standard_normal((RAW_H, RAW_W))
    return tex


@functools.lru_cache(maxsize=4)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear (half-pixel centre) resampling matrix of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    m[np.arange(n_out), i0] += 1 - w
    m[np.arange(n_out), i1] += w
    return m


def resize_bilinear(img: np.ndarray, out_h: int = OUT, out_w: int = OUT) -> np.ndarray:
    ry = _resize_matrix(img.shape[0], out_h)
    rx = _resize_matrix(img.shape[1], out_w)
    return ry @ img @ rx.T


class Renderer:
    """Rasterises :class:`SceneConfig` values for a given arm geometry."""

    def __init__(self, arm: Arm, rcfg: RenderConfig | None = None):
        self.arm = arm
        self.rcfg = rcfg or RenderConfig()
        c = arm.cfg
        self.x0, self.y0, self.size = c.frame_x0, c.frame_y0, c.frame_size
        self.px_w = self.size / RAW_W
        self.px_h = self.size / RAW_H
        self.aa = 0.5 * (self.px_w + self.px_h)
        self.xs = self.x0 + (np.arange(RAW_W) + 0.5) * self.px_w
        self.ys = self.y0 + self.size - (np.arange(RAW_H) + 0.5) * self.px_h
        self._styles = {s: style_params(s, self.rcfg) for s in ("A", "B")}

    # world box -> raw pixel index window, clipped to the canvas
    def _window(self, xmin, xmax, ymin, ymax):
        j0 = max(int(np.floor((xmin - self.x0) / self.px_w)), 0)
        j1 = min(int(np.ceil((xmax - self.x0) / self.px_w)) + 1, RAW_W)
        i0 = max(int(np.floor((self.y0 + self.size - ymax) / self.px_h)), 0)
        i1 = min(int(np.ceil((self.y0 + self.size - ymin) / self.px_h)) + 1, RAW_H)
        return i0, i1, j0, j1

    def _blend(self, img, win, cov, color):
        i0, i1, j0, j1 = win
        if i0 >= i1 or j0 >= j1:
            return
        patch = img[i0:i1, j0:j1]
        patch += cov[..., None] * (np.asarray(color) - patch)

    def _capsule(self, img, p, q, radius, color):
        pad = radius + 2 * self.aa
        win = self._window(min(p[0], q[0]) - pad, max(p[0], q[0]) + pad, min(p[1], q[1]) - pad, max(p[1], q[1]) + pad)
        i0, i1, j0, j1 = win
        if i0 >= i1 or j0 >= j1:
            return
        X = self.xs[None, j0:j1]
        Y = self.ys[i0:i1, None]
        d = np.asarray(q) - np.asarray(p)
        dd = float(d @ d)
        t = ((X - p[0]) * d[0] + (Y - p[1]) * d[1]) / dd if dd > 0 else np.zeros_like(X * Y)
        t = np.clip(t, 0.0, 1.0)
        dist = np.hypot(X - (p[0] + t * d[0]), Y - (p[1] + t * d[1]))
        self._blend(img, win, np.clip((radius - dist) / self.aa + 0.5, 0.0, 1.0), color)

    def _disc(self, img, c, radius, color):
        self._capsule(img, c, c, radius, color)

    def _rect_world(self, img, xmin, xmax, ymin, ymax, color):
        win = self._window(xmin, xmax, ymin, ymax)
        i0, i1, j0, j1 = win
        if i0 >= i1 or j0 >= j1:
            return
        X = self.xs[None, j0:j1]
        Y = self.ys[i0:i1, None]
        cx = np.clip(np.minimum(X - xmin, xmax - X) / self.px_w + 0.5, 0, 1)
        cy = np.clip(np.minimum(Y - ymin, ymax - Y) / self.px_h + 0.5, 0, 1)
        self._blend(img, win, cx * cy, color)

    def render_rgb(self, scene: SceneConfig, style: str = "A") -> np.ndarray:
        sp = self._styles.get(style)
        if sp is None:
            raise ValueError(f"unknown render style {style!r}")
        img = np.empty((RAW_H, RAW_W, 3))
        img[:] = sp.background
        if sp.texture_amp:
            img += sp.texture_amp * _texture(sp.texture_seed)[..., None]
        if sp.shading:
            ramp = np.linspace(-sp.shading, sp.shading, RAW_W)[None, :, None]
            img += ramp
        off = np.asarray(sp.offset)
        pts = self.arm.points(scene.q) + off
        self._rect_world(img, pts[0, 0] - 0.12, pts[0, 0] + 0.02, pts[0, 1] - 0.1, pts[0, 1] + 0.1, sp.base_color)
        for k in range(3):
            self._capsule(img, pts[k], pts[k + 1], sp.link_width / 2, sp.link_color)
        for k in range(3):
            self._disc(img, pts[k], sp.joint_radius, sp.joint_color)
        self._disc(img, pts[3], sp.tip_radius, sp.tip_color)
        self._disc(img, np.asarray(scene.target) + off, self.arm.cfg.target_radius, sp.target_color)
        return img

    def render(self, scene: SceneConfig, style: str = "A", occluders: Sequence[Occluder] = ()) -> np.ndarray:
        """Render one 84x84 grey-scale observation with values in [0, 1]."""
        rgb = self.render_rgb(scene, style)
        grey = np.clip(rgb @ GREY, 0.0, 1.0)
        for oc in occluders:
            j0 = int(round(oc.x0 * RAW_W / OUT))
            j1 = int(round(oc.x1 * RAW_W / OUT))
            i0 = int(round(oc.y0 * RAW_H / OUT))
            i1 = int(round(oc.y1 * RAW_H / OUT))
            grey[max(i0, 0):max(i1, 0), max(j0, 0):max(j1, 0)] = oc.value
        return np.clip(resize_bilinear(grey), 0.0, 1.0)

    def render_batch(self, scenes: Sequence[SceneConfig], style: str = "A") -> np.ndarray:
        return np.stack([self.render(s, style) for s in scenes])

    def world_to_pixel(self, xy) -> np.ndarray:
        """Continuous (col, row) position in the 84x84 image; pixel k spans [k, k+1)."""
        xy = np.asarray(xy, dtype=np.float64)
        col = (xy[..., 0] - self.x0) / self.size * OUT
        row = (self.y0 + self.size - xy[..., 1]) / self.size * OUT
        return np.stack([col, row], axis=-1)


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    data = to_bytes(img)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM written by :func:`write_pgm`; returns uint8 (H, W)."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError("truncated PGM data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)
