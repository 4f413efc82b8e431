"""Perception: image -> normalised scene configuration regression.

Covers labelled dataset generation, image augmentation, the MDSET1 file
format, supervised training with mixed style-A/style-B minibatches, and
error evaluation in normalised units.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import PerceptionConfig
from .nn import Network, RMSProp, build_network, linear_lr, perception_spec, quadratic_loss
from .render import OUT, Renderer, to_bytes
from .sim import Arm

log = logging.getLogger(__name__)

DATASET_MAGIC = b"MDSET1\n"
STYLES = ("A", "B")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, 84, 84) uint8
    thetas: np.ndarray  # (N, 2 + dof) float32 in [0, 1]
    style: str
    dof: int
    seed: int = 0
    augment: bool = False
    ranges: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.thetas)

    def inputs(self, idx=slice(None)) -> np.ndarray:
        return as_input(self.images[idx])


def as_input(images_u8: np.ndarray) -> np.ndarray:
    """uint8 (N, 84, 84) -> float32 network input (N, 84, 84, 1)."""
    return (np.asarray(images_u8, dtype=np.float32) * np.float32(1.0 / 255.0))[..., None]


def sample_scenes(arm: Arm, count: int, rng: np.random.Generator):
    """Draw ``count`` episode start states (uniform q and q*, in-frame targets)."""
    return [arm.sample_scene(rng) for _ in range(count)]


# -- augmentation ---------------------------------------------------------------

def augment_batch(images: np.ndarray, rng: np.random.Generator, rotation_deg: float = 5.0,
                  translation_px: float = 3.0, noise: float = 0.02, brightness: float = 0.1) -> np.ndarray:
    """Rotate, translate, add Gaussian noise and shift brightness, then clamp.

    ``images`` is float (N, H, W) in [0, 1]. Random draws happen in a fixed
    order so results are reproducible per generator state.
    """
    images = np.asarray(images)
    dt = images.dtype if images.dtype.kind == "f" else np.dtype(np.float64)
    images = images.astype(dt, copy=False)
    n, h, w = images.shape
    ang = np.deg2rad(rng.uniform(-rotation_deg, rotation_deg, n)) if rotation_deg else np.zeros(n)
    tx = rng.uniform(-translation_px, translation_px, n) if translation_px else np.zeros(n)
    ty = rng.uniform(-translation_px, translation_px, n) if translation_px else np.zeros(n)
    bright = rng.uniform(-brightness, brightness, n) if brightness else np.zeros(n)
    out = images.copy()
    if rotation_deg or translation_px:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        rr, cc = np.mgrid[0:h, 0:w].astype(dt)
        cos, sin = np.cos(ang), np.sin(ang)
        # source coordinates as per-image affine maps of the output grid
        k_c = (cx - cos * (cx + tx) - sin * (cy + ty)).astype(dt)[:, None, None]
        k_r = (cy - cos * (cy + ty) + sin * (cx + tx)).astype(dt)[:, None, None]
        cos, sin = cos.astype(dt)[:, None, None], sin.astype(dt)[:, None, None]
        src_c = cos * cc + sin * rr
        src_c += k_c
        np.clip(src_c, 0, w - 1, out=src_c)
        src_r = cos * rr - sin * cc
        src_r += k_r
        np.clip(src_r, 0, h - 1, out=src_r)
        r0 = np.minimum(np.floor(src_r), h - 2)
        c0 = np.minimum(np.floor(src_c), w - 2)
        src_r -= r0
        src_c -= c0
        fr, fc = src_r, src_c
        r0 *= w
        r0 += c0
        idx = r0.astype(np.intp)
        idx += (np.arange(n) * (h * w))[:, None, None]
        flat = images.ravel()

        top = flat[idx]
        top += fc * (flat[idx + 1] - top)
        bot = flat[idx + w]
        bot += fc * (flat[idx + w + 1] - bot)
        bot -= top
        bot *= fr
        out = top + bot
    if noise:
        z = rng.standard_normal(out.shape, dtype=np.float32 if dt == np.float32 else np.float64)
        z *= noise
        out += z
    out += bright.astype(dt)[:, None, None]
    return np.clip(out, 0.0, 1.0, out=out)


def augment(image: np.ndarray, rng: np.random.Generator, **magnitudes) -> np.ndarray:
    return augment_batch(np.asarray(image)[None], rng, **magnitudes)[0]


# -- datasets -------------------------------------------------------------------

def gen_dataset(count: int, style: str, rng: np.random.Generator, arm: Arm, renderer: Renderer | None = None,
                augment_images: bool = False, seed: int = 0) -> Dataset:
    if count < 1:
        raise ValueError("dataset count must be >= 1")
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}")
    renderer = renderer or Renderer(arm)
    images = np.empty((count, OUT, OUT), dtype=np.uint8)
    thetas = np.empty((count, arm.theta_dim), dtype=np.float32)
    for i in range(count):
        st = arm.sample_scene(rng)
        img = renderer.render(st.scene, style)
        if augment_images:
            img = augment(img, rng)
        images[i] = to_bytes(img)
        thetas[i] = arm.normalize_theta(st.scene)
    return Dataset(images, thetas, style, arm.dof, seed, augment_images, arm.norm_ranges())


def dumps_dataset(ds: Dataset) -> bytes:
    header = {
        "format": 1,
        "count": len(ds),
        "dof": ds.dof,
        "style": ds.style,
        "ranges": ds.ranges,
        "seed": ds.seed,
        "augment": ds.augment,
    }
    rec = np.empty(len(ds), dtype=[("theta", "<f4", (2 + ds.dof,)), ("image", "u1", (OUT * OUT,))])
    rec["theta"] = ds.thetas
    rec["image"] = ds.images.reshape(len(ds), -1)
    body = rec.tobytes()
    header["body_crc32"] = zlib.crc32(body)
    blob = json.dumps(header, sort_keys=True).encode()
    return DATASET_MAGIC + struct.pack("<Q", len(blob)) + blob + body


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def loads_dataset(raw: bytes) -> Dataset:
    if not raw.startswith(DATASET_MAGIC):
        raise DatasetError("bad magic: not an MDSET1 dataset")
    pos = len(DATASET_MAGIC)
    if len(raw) < pos + 8:
        raise DatasetError("truncated dataset header length")
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    try:
        header = json.loads(raw[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"corrupt dataset header: {exc}") from None
    pos += hlen
    if header.get("format") != 1:
        raise DatasetError(f"unsupported dataset format {header.get('format')!r}")
    count, dof = int(header["count"]), int(header["dof"])
    dt = np.dtype([("theta", "<f4", (2 + dof,)), ("image", "u1", (OUT * OUT,))])
    if len(raw) - pos != count * dt.itemsize:
        raise DatasetError(f"dataset body is {len(raw) - pos} bytes, expected {count * dt.itemsize}")
    crc = header.get("body_crc32")
    if crc is not None and zlib.crc32(raw[pos:]) != crc:
        raise DatasetError("dataset body checksum mismatch")
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=pos)
    return Dataset(
        images=rec["image"].reshape(count, OUT, OUT).copy(),
        thetas=rec["theta"].astype(np.float32),
        style=header["style"],
        dof=dof,
        seed=header.get("seed", 0),
        augment=header.get("augment", False),
        ranges=header.get("ranges", {}),
    )


def load_dataset(path) -> Dataset:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from None
    return loads_dataset(raw)


# -- training -------------------------------------------------------------------

def real_count(p_real: float, batch: int) -> int:
    """Number of style-B samples in a minibatch (round half up)."""
    return int(np.floor(p_real * batch + 0.5))


def new_perception_net(dof: int, rng: np.random.Generator, dtype=np.float32) -> Network:
    return build_network(perception_spec(dof), rng, dtype=dtype)


class MixedBatcher:
    """Draws minibatches with an exact style-B / style-A split."""

    def __init__(self, data_a: Dataset | None, data_b: Dataset | None, p_real: float, batch: int,
                 augment_a: bool = False, augment_b: bool = True):
        self.n_b = real_count(p_real, batch)
        self.n_a = batch - self.n_b
        if self.n_b and (data_b is None or len(data_b) == 0):
            raise DatasetError("mix needs style-B samples but the style-B dataset is empty")
        if self.n_a and (data_a is None or len(data_a) == 0):
            raise DatasetError("mix needs style-A samples but the style-A dataset is empty")
        self.data_a, self.data_b = data_a, data_b
        self.augment_a, self.augment_b = augment_a, augment_b

    def _part(self, ds: Dataset, n: int, aug: bool, rng):
        idx = rng.integers(0, len(ds), n)
        imgs = ds.images[idx]
        if aug:
            x = augment_batch(imgs.astype(np.float32) / np.float32(255), rng)[..., None]
        else:
            x = as_input(imgs)
        return x, ds.thetas[idx]

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        parts = []
        if self.n_b:
            parts.append(self._part(self.data_b, self.n_b, self.augment_b, rng))
        if self.n_a:
            parts.append(self._part(self.data_a, self.n_a, self.augment_a, rng))
        if len(parts) == 1:
            return parts[0]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


class PerceptionTrainer:
    """Owns a perception net, its RMSProp state and the sampling generator."""

    def __init__(self, net: Network, cfg: PerceptionConfig, seed: int = 0):
        self.net = net
        self.cfg = cfg
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.opt = RMSProp(net.params(), lr=cfg.lr_start, rho=cfg.rho, eps=cfg.eps)
        self.step = 0
        self.trace: list[tuple[int, float]] = []
        self._window: list[float] = []

    def train(self, data_a: Dataset | None, data_b: Dataset | None, steps: int, p_real: float | None = None,
              total_steps: int | None = None) -> list[tuple[int, float]]:
        cfg = self.cfg
        p = cfg.p_real if p_real is None else p_real
        batcher = MixedBatcher(data_a, data_b, p, cfg.batch_size, cfg.augment_sim, cfg.augment_real)
        total = total_steps or steps
        for _ in range(steps):
            x, y = batcher.sample(self.rng)
            loss, grad = quadratic_loss(self.net.forward(x), y)
            self.net.backward(grad, input_grad=False)
            self.opt.step(self.net.grads(), lr=linear_lr(self.step, total, cfg.lr_start, cfg.lr_end))
            self.step += 1
            self._window.append(loss)
            if self.step % cfg.log_every == 0:
                self.trace.append((self.step, float(np.mean(self._window))))
                self._window = []
                if self.step % (cfg.log_every * 50) == 0:
                    log.info("perception step %d loss %.5f", self.step, self.trace[-1][1])
        return self.trace

    def checkpoint(self, extra: dict | None = None) -> Checkpoint:
        payload = {
            "kind": "perception",
            "rng": self.rng.bit_generator.state,
            "trace": self.trace,
            "window": self._window,
        }
        payload.update(extra or {})
        return Checkpoint.from_network(self.net, step=self.step, seed=self.seed, opt=self.opt, extra=payload)

    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, self.checkpoint(extra))

    @classmethod
    def load(cls, path, cfg: PerceptionConfig) -> "PerceptionTrainer":
        ck = load_checkpoint(path)
        tr = cls(ck.network(), cfg, ck.seed)
        if ck.opt_state is not None:
            tr.opt.load_state(ck.opt_state)
        tr.step = ck.step
        tr.rng.bit_generator.state = ck.extra["rng"]
        tr.trace = [tuple(t) for t in ck.extra.get("trace", [])]
        tr._window = list(ck.extra.get("window", []))
        return tr


def train_perception(net: Network, data_a: Dataset | None, data_b: Dataset | None, p_real: float, steps: int,
                     cfg: PerceptionConfig | None = None, seed: int = 0) -> tuple[Network, list[tuple[int, float]]]:
    cfg = cfg or PerceptionConfig()
    trainer = PerceptionTrainer(net, cfg, seed)
    trace = trainer.train(data_a, data_b, steps, p_real)
    return trainer.net, trace


def predict(net: Network, images_u8: np.ndarray, chunk: int = 200) -> np.ndarray:
    out = [net.predict(as_input(images_u8[i : i + chunk])) for i in range(0, len(images_u8), chunk)]
    return np.concatenate(out).astype(np.float64)


def eval_perception(net: Network, ds: Dataset) -> tuple[float, float, np.ndarray]:
    """Mean and std of the Euclidean error in normalised units, plus per-sample errors."""
    if len(ds) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    err = np.linalg.norm(predict(net, ds.images) - ds.thetas.astype(np.float64), axis=1)
    return float(err.mean()), float(err.std()), err
