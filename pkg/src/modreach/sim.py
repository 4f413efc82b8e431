"""Planar 3-link arm: kinematics, discrete actions, reward and episodes.

Joint vectors passed around the package hold only the *active* joints
(length ``dof``); inactive joints sit at their rest angles. With one DoF
only the second joint moves, with two the second and third.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import ArmConfig, ConfigError

ACTIVE_JOINTS = {1: (1,), 2: (1, 2), 3: (0, 1, 2)}
DELTA_SIGNS = (-1, 0, 1)


class EpisodeError(RuntimeError):
    """Raised when an episode is driven incorrectly (e.g. stepped after done)."""


@dataclass(frozen=True)
class Action:
    id: int
    joint_index: int
    delta: float


@dataclass(frozen=True)
class SceneConfig:
    target: np.ndarray  # (2,) world metres
    q: np.ndarray  # (dof,) radians


@dataclass(frozen=True)
class EpisodeState:
    scene: SceneConfig
    q_star: np.ndarray
    n: int = 0
    near: int = 0
    step: int = 0
    done: bool = False
    success: bool = False
    distance: float = float("nan")


def chain_points(q_full, lengths) -> np.ndarray:
    """Base, joint and end-effector positions, shape (..., 4, 2).

    ``q_full`` may be batched over leading axes.
    """
    q_full = np.asarray(q_full, dtype=np.float64)
    phi = np.cumsum(q_full, axis=-1)
    seg = np.asarray(lengths, dtype=np.float64)[..., None] * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    pts = np.cumsum(seg, axis=-2)
    zero = np.zeros(pts.shape[:-2] + (1, 2))
    return np.concatenate([zero, pts], axis=-2)


def forward_kinematics(q_full, lengths) -> np.ndarray:
    """End-effector position for full joint vector(s) ``q_full``."""
    q_full = np.asarray(q_full, dtype=np.float64)
    phi = np.cumsum(q_full, axis=-1)
    lengths = np.asarray(lengths, dtype=np.float64)
    return np.stack([(lengths * np.cos(phi)).sum(-1), (lengths * np.sin(phi)).sum(-1)], axis=-1)


def reward(d: float, n: int, delta: float = 0.05, lam: float = 1e-3, hold: int = 4) -> float:
    """Distance-shaped reward: small negative cost outside the threshold,
    zero while holding inside it, and 1 once held ``hold`` times."""
    if d < 0 or n < 0:
        raise ValueError("distance and count must be non-negative")
    if d > delta:
        return lam * (delta / d - 1.0)
    return 1.0 if n >= hold else 0.0


class Arm:
    """Geometry and episode dynamics for one DoF setting of the arm."""

    def __init__(self, cfg: ArmConfig | None = None, dof: int | None = None):
        cfg = cfg or ArmConfig()
        if dof is not None:
            cfg = replace(cfg, dof=dof)
        cfg.validate()
        self.cfg = cfg
        self.dof = cfg.dof
        self.active = np.array(ACTIVE_JOINTS[self.dof])
        self.lengths = np.array(cfg.link_lengths, dtype=np.float64)
        self.rest = np.array(cfg.rest_angles, dtype=np.float64)
        self.lo = np.array(cfg.joint_lo, dtype=np.float64)[self.active]
        self.hi = np.array(cfg.joint_hi, dtype=np.float64)[self.active]
        self.actions = [
            Action(3 * k + m, k, DELTA_SIGNS[m] * cfg.step_size)
            for k in range(self.dof)
            for m in range(3)
        ]
        self._deltas = np.zeros((len(self.actions), self.dof))
        for a in self.actions:
            self._deltas[a.id, a.joint_index] = a.delta

    @property
    def n_actions(self) -> int:
        return 3 * self.dof

    @property
    def theta_dim(self) -> int:
        return 2 + self.dof

    def full_q(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        out = np.broadcast_to(self.rest, q.shape[:-1] + (3,)).copy()
        out[..., self.active] = q
        return out

    def forward_kinematics(self, q) -> np.ndarray:
        return forward_kinematics(self.full_q(q), self.lengths)

    def points(self, q) -> np.ndarray:
        return chain_points(self.full_q(q), self.lengths)

    def action(self, a) -> Action:
        idx = a.id if isinstance(a, Action) else a
        if not isinstance(idx, (int, np.integer)) or not 0 <= idx < self.n_actions:
            raise ValueError(f"invalid action {a!r} for dof={self.dof}")
        return self.actions[int(idx)]

    def apply_action(self, q, a) -> np.ndarray:
        act = self.action(a)
        out = np.array(q, dtype=np.float64)
        j = act.joint_index
        out[j] = min(max(out[j] + act.delta, self.lo[j]), self.hi[j])
        return out

    def all_successors(self, q) -> np.ndarray:
        """Configurations reached by every action, shape (n_actions, dof)."""
        return np.clip(np.asarray(q, dtype=np.float64) + self._deltas, self.lo, self.hi)

    # -- frame / normalisation ------------------------------------------------

    def in_frame(self, xy, margin: float | None = None) -> bool:
        m = self.cfg.target_radius if margin is None else margin
        x0, y0, s = self.cfg.frame_x0, self.cfg.frame_y0, self.cfg.frame_size
        return bool(x0 + m <= xy[0] <= x0 + s - m and y0 + m <= xy[1] <= y0 + s - m)

    def normalize(self, target, q) -> np.ndarray:
        """Map (target, q) to the unit cube; batched inputs are allowed."""
        target = np.asarray(target, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        c = self.cfg
        t = (target - np.array([c.frame_x0, c.frame_y0])) / c.frame_size
        qn = (q - self.lo) / (self.hi - self.lo)
        theta = np.concatenate([t, qn], axis=-1)
        tol = 1e-9
        if np.any(theta < -tol) or np.any(theta > 1 + tol):
            raise ValueError("scene configuration outside normalisation ranges")
        return np.clip(theta, 0.0, 1.0)

    def normalize_theta(self, scene: SceneConfig) -> np.ndarray:
        return self.normalize(scene.target, scene.q)

    def denormalize(self, theta) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        if np.any(theta < -1e-9) or np.any(theta > 1 + 1e-9):
            raise ValueError("normalised vector outside [0, 1]")
        c = self.cfg
        target = theta[..., :2] * c.frame_size + np.array([c.frame_x0, c.frame_y0])
        q = self.lo + theta[..., 2:] * (self.hi - self.lo)
        return target, q

    def denormalize_theta(self, theta) -> SceneConfig:
        target, q = self.denormalize(theta)
        return SceneConfig(target, q)

    def norm_ranges(self) -> dict:
        c = self.cfg
        return {
            "target_lo": [c.frame_x0, c.frame_y0],
            "target_hi": [c.frame_x0 + c.frame_size, c.frame_y0 + c.frame_size],
            "q_lo": self.lo.tolist(),
            "q_hi": self.hi.tolist(),
        }

    # -- episodes ---------------------------------------------------------------

    def distance(self, scene: SceneConfig) -> float:
        ee = self.forward_kinematics(scene.q)
        return float(math.hypot(ee[0] - scene.target[0], ee[1] - scene.target[1]))

    def sample_scene(self, rng: np.random.Generator) -> EpisodeState:
        q = rng.uniform(self.lo, self.hi)
        for _ in range(self.cfg.sample_retries):
            q_star = rng.uniform(self.lo, self.hi)
            target = self.forward_kinematics(q_star)
            if self.in_frame(target):
                scene = SceneConfig(target, q)
                return EpisodeState(scene, q_star, distance=self.distance(scene))
        raise ConfigError("could not sample an in-frame target; check joint limits and frame")

    def reward(self, d: float, n: int) -> float:
        c = self.cfg
        return reward(d, n, c.reach_threshold, c.reward_scale, c.hold_count)

    def step(self, state: EpisodeState, a) -> tuple[EpisodeState, float, bool]:
        if state.done:
            raise EpisodeError("step() called on a finished episode")
        c = self.cfg
        q = self.apply_action(state.scene.q, a)
        scene = SceneConfig(state.scene.target, q)
        d = self.distance(scene)
        n = state.n + 1 if d <= c.reach_threshold else 0
        near = state.near + 1 if d <= c.success_radius else 0
        r = self.reward(d, n)
        t = state.step + 1
        done = n >= c.hold_count or t >= c.max_steps
        new = EpisodeState(
            scene,
            state.q_star,
            n=n,
            near=near,
            step=t,
            done=done,
            success=state.success or near >= c.hold_count,
            distance=d,
        )
        return new, r, done


def parse_scene(text: str) -> SceneConfig:
    """Parse a literal such as ``q=0.1,0.2,-0.3;target=0.45,0.20``."""
    parts = {}
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        key, sep, val = chunk.partition("=")
        if not sep:
            raise ValueError(f"bad scene literal chunk {chunk!r}")
        parts[key.strip()] = np.array([float(v) for v in val.split(",")])
    if set(parts) != {"q", "target"} or parts["target"].shape != (2,):
        raise ValueError("scene literal needs q=... and target=x,y")
    return SceneConfig(parts["target"], parts["q"])
