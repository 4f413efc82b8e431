"""Perception and control joined at the scene-configuration bottleneck."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, FinetuneConfig
from .control import (
    ReplayMemory,
    bellman_targets,
    eval_scenes,
    kgps_action,
    rollout,
    state_from_json,
    state_to_json,
    td_loss,
)
from .nn import Network, RMSProp, ShapeError, linear_lr, quadratic_loss
from .perception import Dataset, MixedBatcher, as_input
from .render import Renderer
from .sim import Arm, EpisodeState

log = logging.getLogger(__name__)

CM_PER_PX = 16.0 / 7.0
REPORT_FIELDS = ["net", "style", "episodes", "success_rate", "d_med_cm", "d_q3_cm", "d_med_px", "d_q3_px",
                 "avg_reward"]


class CombinedNet:
    """Image -> bottleneck theta -> Q-values. Holds references, never copies weights."""

    def __init__(self, perception: Network, control: Network):
        out = tuple(perception.output_shape)
        if out != tuple(control.input_shape):
            raise ShapeError(f"perception output {out} does not match control input {control.input_shape}")
        self.perception = perception
        self.control = control

    @property
    def n_actions(self) -> int:
        return int(self.control.output_shape[0])

    def bottleneck(self, x: np.ndarray) -> np.ndarray:
        return self.perception.predict(x)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.control.forward(self.perception.forward(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.control.predict(self.perception.predict(x))

    __call__ = predict

    def copy(self) -> "CombinedNet":
        return CombinedNet(self.perception.copy(), self.control.copy())


def combine(perception: Network, control: Network) -> CombinedNet:
    return CombinedNet(perception, control)


def mixed_upstream(g_p: np.ndarray, g_q: np.ndarray, beta: float) -> np.ndarray:
    """Upstream gradient for a perception batch stacked as [supervised; task].

    Backprop is linear in the upstream gradient and sums over samples, so one
    backward pass with this gradient yields beta * dLp + (1 - beta) * dLq.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    return np.concatenate([beta * g_p, (1.0 - beta) * g_q])


class FineTuner:
    """End-to-end fine-tuning of a combined net with the weighted loss."""

    def __init__(self, combined: CombinedNet, arm: Arm, cfg: FinetuneConfig, data_a: Dataset | None,
                 data_b: Dataset | None, seed: int = 0, renderer: Renderer | None = None):
        cfg.validate()
        if combined.n_actions != arm.n_actions:
            raise ShapeError("control part does not match the arm's action count")
        self.net, self.arm, self.cfg, self.seed = combined, arm, cfg, seed
        self.renderer = renderer or Renderer(arm)
        self.rng = np.random.default_rng(seed)
        self.target = combined.copy()
        self.opt_p = RMSProp(combined.perception.params(), lr=cfg.lr_start, rho=cfg.rho, eps=cfg.eps)
        self.opt_c = RMSProp(combined.control.params(), lr=cfg.control_lr_start, rho=cfg.rho, eps=cfg.eps)
        self.memory = ReplayMemory(cfg.replay_capacity, (84, 84), np.uint8)
        self.batcher = None
        if not cfg.naive:
            self.batcher = MixedBatcher(data_a, data_b, cfg.p_real, cfg.perception_batch, False, cfg.augment_real)
        self.state: EpisodeState | None = None
        self.image: np.ndarray | None = None
        self.step = 0
        self.updates = 0
        self.trace: list[tuple[int, float, float]] = []
        self._window: list[tuple[float, float]] = []

    def _observe(self, state: EpisodeState) -> np.ndarray:
        return np.clip(np.rint(self.renderer.render(state.scene, "A") * 255), 0, 255).astype(np.uint8)

    def _act(self, state: EpisodeState, image: np.ndarray) -> int:
        if self.rng.random() < self.cfg.explore:
            return kgps_action(self.arm, state.scene.q, state.q_star)
        return int(np.argmax(self.net.predict(as_input(image[None]))[0]))

    def update(self) -> tuple[float, float]:
        """One optimisation step on both parts; returns (task loss, perception loss)."""
        cfg = self.cfg
        perc, ctrl = self.net.perception, self.net.control
        obs, actions, rewards, next_obs, terminal = self.memory.sample(self.rng, cfg.task_batch)
        x_q = as_input(obs)
        y = bellman_targets(self.target.predict(as_input(next_obs)), rewards, terminal, cfg.gamma)

        if self.batcher is not None:
            x_p, t_p = self.batcher.sample(self.rng)
            out = perc.forward(np.concatenate([x_p, x_q]))
            loss_p, g_p = quadratic_loss(out[: len(x_p)], t_p)
            theta = out[len(x_p):]
        else:
            theta = perc.forward(x_q)
            loss_p = float("nan")
        loss_q, g_out = td_loss(ctrl.forward(theta), actions, y)
        g_bn = ctrl.backward(g_out, input_grad=True)
        self.opt_c.step(ctrl.grads(), lr=linear_lr(self.step, cfg.steps, cfg.control_lr_start, cfg.control_lr_end))

        g = g_bn if self.batcher is None else mixed_upstream(g_p, g_bn, cfg.beta)
        perc.backward(g.astype(perc.dtype, copy=False), input_grad=False)
        self.opt_p.step(perc.grads(), lr=linear_lr(self.step, cfg.steps, cfg.lr_start, cfg.lr_end))
        self.updates += 1
        if self.updates % cfg.target_sync == 0:
            self.sync_target()
        return loss_q, loss_p

    def train(self, steps: int | None = None, log_every: int = 100) -> list[tuple[int, float, float]]:
        cfg, arm = self.cfg, self.arm
        end = cfg.steps if steps is None else self.step + steps
        while self.step < end:
            if self.state is None or self.state.done:
                self.state = arm.sample_scene(self.rng)
                self.image = self._observe(self.state)
            a = self._act(self.state, self.image)
            new, r, _ = arm.step(self.state, a)
            new_image = self._observe(new)
            self.memory.push(self.image, a, r, new_image, new.n >= arm.cfg.hold_count)
            self.state, self.image = new, new_image
            self.step += 1
            if len(self.memory) >= max(cfg.learn_start, cfg.task_batch):
                self._window.append(self.update())
            if self._window and self.step % log_every == 0:
                lq, lp = np.mean(self._window, axis=0)
                self.trace.append((self.step, float(lq), float(lp)))
                self._window = []
                if self.step % (log_every * 10) == 0:
                    log.info("finetune step %d task %.5f perception %.5f", self.step, lq, lp)
        return self.trace

    def sync_target(self) -> None:
        for t, p in zip(self.target.perception.params() + self.target.control.params(),
                        self.net.perception.params() + self.net.control.params()):
            t[...] = p

    # -- persistence --------------------------------------------------------------

    def save(self, out_dir) -> None:
        """Write ``perception.mdqn`` and ``control.mdqn`` (each loadable on its own) plus resume state."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        extra = {
            "kind": "finetune",
            "updates": self.updates,
            "rng": self.rng.bit_generator.state,
            "trace": self.trace,
            "episode": state_to_json(self.state),
            "window": self._window,
        }
        save_checkpoint(out / "perception.mdqn",
                        Checkpoint.from_network(self.net.perception, self.step, self.seed, self.opt_p, extra))
        save_checkpoint(out / "control.mdqn",
                        Checkpoint.from_network(self.net.control, self.step, self.seed, self.opt_c, {"kind": "control"}))
        arrays = self.memory.arrays()
        for k, p in enumerate(self.target.perception.params() + self.target.control.params()):
            arrays[f"target_{k}"] = p
        if self.image is not None:
            arrays["image"] = self.image
        with open(out / "finetune_state.npz", "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, out_dir, arm: Arm, cfg: FinetuneConfig, data_a, data_b,
             renderer: Renderer | None = None) -> "FineTuner":
        out = Path(out_dir)
        pk, ck = load_checkpoint(out / "perception.mdqn"), load_checkpoint(out / "control.mdqn")
        tuner = cls(combine(pk.network(), ck.network()), arm, cfg, data_a, data_b, pk.seed, renderer)
        if pk.opt_state is not None:
            tuner.opt_p.load_state(pk.opt_state)
        if ck.opt_state is not None:
            tuner.opt_c.load_state(ck.opt_state)
        ex = pk.extra
        if ex.get("kind") != "finetune":
            raise ConfigError(f"{out} does not hold a fine-tuning run")
        tuner.step, tuner.updates = pk.step, ex["updates"]
        tuner.rng.bit_generator.state = ex["rng"]
        tuner.trace = [tuple(t) for t in ex.get("trace", [])]
        tuner.state = state_from_json(ex.get("episode"))
        tuner._window = [tuple(w) for w in ex.get("window", [])]
        side = out / "finetune_state.npz"
        if side.exists():
            with np.load(side) as d:
                tuner.memory.load_arrays(d)
                params = tuner.target.perception.params() + tuner.target.control.params()
                for k, p in enumerate(params):
                    p[...] = d[f"target_{k}"]
                if "image" in d:
                    tuner.image = d["image"].copy()
        return tuner


def finetune(combined: CombinedNet, arm: Arm, cfg: FinetuneConfig, data_a: Dataset | None, data_b: Dataset | None,
             seed: int = 0, steps: int | None = None) -> CombinedNet:
    """Fine-tune ``combined`` in place and return it."""
    if not 0.0 <= cfg.beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {cfg.beta}")
    FineTuner(combined, arm, cfg, data_a, data_b, seed).train(steps)
    return combined


# -- evaluation -----------------------------------------------------------------

Observer = Callable[[Sequence[EpisodeState]], np.ndarray]


def image_observer(renderer: Renderer, style: str, workers: int = 1) -> Observer:
    """Render each state's scene; the policy sees nothing else."""
    def render(st):
        return renderer.render(st.scene, style)

    def observe(states):
        if workers > 1 and len(states) > 1:
            with ThreadPoolExecutor(workers) as pool:
                imgs = list(pool.map(render, states))
        else:
            imgs = [render(s) for s in states]
        # quantise like a stored 8-bit frame
        return as_input(np.clip(np.rint(np.stack(imgs) * 255), 0, 255).astype(np.uint8))
    return observe


def eval_e2e(combined: CombinedNet, arm: Arm, episodes: int = 400, style: str = "A", seed: int = 0,
             renderer: Renderer | None = None, workers: int = 1, observe: Observer | None = None) -> dict:
    """Greedy image-based rollouts; distances in metres, plus cm and pixel summaries."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if observe is None:
        observe = image_observer(renderer or Renderer(arm), style, workers)

    def act(states):
        return np.argmax(combined.predict(observe(states)), axis=1)

    res = rollout(arm, act, eval_scenes(arm, episodes, seed))
    res.update(style=style, **pixel_metrics(res))
    return res


def cm_to_px(d_cm):
    return np.asarray(d_cm) / CM_PER_PX


def pixel_metrics(res: dict) -> dict:
    d_med_cm, d_q3_cm = 100 * res["d_med"], 100 * res["d_q3"]
    return {
        "d_med_cm": d_med_cm, "d_q3_cm": d_q3_cm,
        "d_med_px": float(cm_to_px(d_med_cm)), "d_q3_px": float(cm_to_px(d_q3_cm)),
    }


def report_row(name: str, style: str, res: dict) -> dict:
    row = {"net": name, "style": style, "episodes": res["episodes"], "success_rate": res["success_rate"],
           "avg_reward": res["avg_reward"]}
    row.update(pixel_metrics(res))
    return row


def write_report(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in REPORT_FIELDS})
