"""Q-learning on scene configurations with kinematics-guided exploration."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ControlConfig
from .nn import Network, RMSProp, build_network, control_spec, linear_lr
from .sim import Arm, EpisodeState, SceneConfig

log = logging.getLogger(__name__)

CURVE_FIELDS = ["step", "success_rate", "d_med_cm", "d_q3_cm", "avg_reward", "epsilon"]


class ReplayMemory:
    """Fixed-capacity ring of transitions; overwrites the oldest entry first."""

    def __init__(self, capacity: int, obs_shape: Sequence[int], obs_dtype=np.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, *obs_shape), dtype=obs_dtype)
        self.next_obs = np.zeros((capacity, *obs_shape), dtype=obs_dtype)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, obs, action: int, reward: float, next_obs, terminal: bool) -> None:
        i = self.pos
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.terminal[i] = terminal
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay memory")
        return rng.integers(0, self.size, batch)

    def sample(self, rng: np.random.Generator, batch: int):
        idx = self.sample_indices(rng, batch)
        return self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.terminal[idx]

    def arrays(self) -> dict[str, np.ndarray]:
        n = self.size
        return {
            "obs": self.obs[:n], "next_obs": self.next_obs[:n], "actions": self.actions[:n],
            "rewards": self.rewards[:n], "terminal": self.terminal[:n],
            "pos": np.array(self.pos), "size": np.array(self.size),
        }

    def load_arrays(self, d) -> None:
        n = int(d["size"])
        self.obs[:n] = d["obs"]
        self.next_obs[:n] = d["next_obs"]
        self.actions[:n] = d["actions"]
        self.rewards[:n] = d["rewards"]
        self.terminal[:n] = d["terminal"]
        self.pos, self.size = int(d["pos"]), n


@dataclass(frozen=True)
class ExplorationSchedule:
    eps_start: float = 1.0
    eps_end: float = 0.1
    decay_steps: int = 1_000_000


def epsilon(step: int, sched: ExplorationSchedule) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if sched.decay_steps <= 0:
        return sched.eps_end
    e = sched.eps_start - (sched.eps_start - sched.eps_end) * step / sched.decay_steps
    return max(sched.eps_end, e)


def kgps_action(arm: Arm, q, q_star) -> int:
    """Joint-space guide: the action whose successor is L2-closest to ``q_star``.

    Ties resolve to the lowest action id.
    """
    succ = arm.all_successors(q)
    dist = np.linalg.norm(succ - np.asarray(q_star, dtype=np.float64), axis=1)
    return int(np.argmin(dist))


def new_control_net(dof: int, rng: np.random.Generator, dtype=np.float32) -> Network:
    return build_network(control_spec(dof), rng, dtype=dtype)


def bellman_targets(q_next: np.ndarray, rewards, terminal, gamma: float) -> np.ndarray:
    best = q_next.max(axis=1)
    return np.where(terminal, rewards, rewards + gamma * best).astype(q_next.dtype)


def td_loss(q_values: np.ndarray, actions, targets) -> tuple[float, np.ndarray]:
    """Half mean squared TD error on the taken actions and dL/dQ (zero elsewhere)."""
    m = len(actions)
    if m == 0:
        raise ValueError("empty batch")
    rows = np.arange(m)
    diff = q_values[rows, actions] - targets
    grad = np.zeros_like(q_values)
    grad[rows, actions] = diff / m
    return float(0.5 * np.sum(diff.astype(np.float64) ** 2) / m), grad


def q_update(net: Network, batch, gamma: float, target_net: Network | None = None, opt: RMSProp | None = None,
             lr: float | None = None) -> float:
    """One Bellman regression step on ``batch = (obs, a, r, next_obs, terminal)``.

    Targets come from ``target_net`` (the live net when None). Gradients
    reach only Q(obs, a). Parameters change only if ``opt`` is given.
    """
    obs, actions, rewards, next_obs, terminal = batch
    if len(actions) == 0:
        raise ValueError("q_update needs a non-empty batch")
    tnet = target_net if target_net is not None else net
    y = bellman_targets(tnet.predict(next_obs), rewards, terminal, gamma)
    loss, grad = td_loss(net.forward(obs), actions, y)
    net.backward(grad, input_grad=False)
    if opt is not None:
        opt.step(net.grads(), lr=lr)
    return loss


# -- evaluation -----------------------------------------------------------------

Policy = Callable[[list[EpisodeState]], np.ndarray]


def eval_scenes(arm: Arm, episodes: int, seed: int) -> list[EpisodeState]:
    """Start states for evaluation; episode i draws from its own stream (seed, i)."""
    return [arm.sample_scene(np.random.default_rng([seed, i])) for i in range(episodes)]


def rollout(arm: Arm, policy: Policy, starts: Sequence[EpisodeState]) -> dict:
    """Run all episodes in lock-step, batching policy queries over live ones."""
    states = list(starts)
    returns = np.zeros(len(states))
    live = [i for i, s in enumerate(states) if not s.done]
    while live:
        acts = policy([states[i] for i in live])
        for i, a in zip(live, acts):
            states[i], r, _ = arm.step(states[i], int(a))
            returns[i] += r
        live = [i for i in live if not states[i].done]
    return summarize(
        np.array([s.distance for s in states]),
        np.array([s.success for s in states]),
        returns,
    )


def summarize(distances: np.ndarray, success: np.ndarray, returns: np.ndarray) -> dict:
    return {
        "episodes": len(distances),
        "success_rate": float(np.mean(success)),
        "d_med": float(np.percentile(distances, 50)),
        "d_q3": float(np.percentile(distances, 75)),
        "avg_reward": float(np.mean(returns)),
        "distances": distances,
    }


def greedy_policy(arm: Arm, net: Network) -> Policy:
    def act(states):
        thetas = np.stack([arm.normalize_theta(s.scene) for s in states]).astype(np.float32)
        return np.argmax(net.predict(thetas), axis=1)
    return act


def kinematic_policy(arm: Arm) -> Policy:
    def act(states):
        return np.array([kgps_action(arm, s.scene.q, s.q_star) for s in states])
    return act


def eval_control(net: Network, arm: Arm, episodes: int = 200, seed: int = 0) -> dict:
    """Greedy rollouts from ``episodes`` fresh scenes (distances in metres)."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    return rollout(arm, greedy_policy(arm, net), eval_scenes(arm, episodes, seed))


# -- training -------------------------------------------------------------------

def state_to_json(st: EpisodeState | None):
    if st is None:
        return None
    return {
        "target": st.scene.target.tolist(), "q": st.scene.q.tolist(), "q_star": st.q_star.tolist(),
        "n": st.n, "near": st.near, "step": st.step, "done": st.done, "success": st.success,
        "distance": st.distance,
    }


def state_from_json(d) -> EpisodeState | None:
    if d is None:
        return None
    return EpisodeState(
        SceneConfig(np.array(d["target"]), np.array(d["q"])), np.array(d["q_star"]),
        n=d["n"], near=d["near"], step=d["step"], done=d["done"], success=d["success"], distance=d["distance"],
    )


class ControlTrainer:
    """DQN on normalised scene configurations with K-GPS or ε-greedy exploration."""

    def __init__(self, arm: Arm, cfg: ControlConfig, seed: int = 0, net: Network | None = None):
        cfg.validate()
        self.arm, self.cfg, self.seed = arm, cfg, seed
        self.rng = np.random.default_rng(seed)
        self.net = net if net is not None else new_control_net(arm.dof, self.rng)
        self.target = self.net.copy()
        self.opt = RMSProp(self.net.params(), lr=cfg.lr_start, rho=cfg.rho, eps=cfg.eps)
        self.memory = ReplayMemory(cfg.replay_capacity, (arm.theta_dim,))
        self.sched = ExplorationSchedule(cfg.eps_start, cfg.eps_end, int(cfg.decay_fraction * cfg.steps))
        self.state: EpisodeState | None = None
        self.step = 0
        self.updates = 0
        self.curve: list[dict] = []
        self.eval_seed = seed + 7919

    def act(self, state: EpisodeState, theta: np.ndarray, eps: float) -> int:
        if self.rng.random() < eps:
            if self.cfg.method == "kgps":
                return kgps_action(self.arm, state.scene.q, state.q_star)
            return int(self.rng.integers(self.arm.n_actions))
        return int(np.argmax(self.net.predict(theta[None])[0]))

    def evaluate(self, episodes: int | None = None) -> dict:
        res = eval_control(self.net, self.arm, episodes or self.cfg.eval_episodes, self.eval_seed)
        row = {
            "step": self.step,
            "success_rate": res["success_rate"],
            "d_med_cm": 100 * res["d_med"],
            "d_q3_cm": 100 * res["d_q3"],
            "avg_reward": res["avg_reward"],
            "epsilon": epsilon(self.step, self.sched),
        }
        self.curve.append(row)
        return res

    def train(self, steps: int | None = None) -> list[dict]:
        cfg, arm = self.cfg, self.arm
        end = cfg.steps if steps is None else self.step + steps
        if cfg.eval_every and self.step == 0 and not self.curve:
            self.evaluate()
        while self.step < end:
            if self.state is None or self.state.done:
                self.state = arm.sample_scene(self.rng)
            st = self.state
            theta = arm.normalize_theta(st.scene).astype(np.float32)
            a = self.act(st, theta, epsilon(self.step, self.sched))
            new, r, done = arm.step(st, a)
            terminal = new.n >= arm.cfg.hold_count
            self.memory.push(theta, a, r, arm.normalize_theta(new.scene), terminal)
            self.state = new
            self.step += 1
            if len(self.memory) >= max(cfg.learn_start, cfg.batch_size):
                batch = self.memory.sample(self.rng, cfg.batch_size)
                lr = linear_lr(self.step, cfg.steps, cfg.lr_start, cfg.lr_end)
                tnet = None if cfg.literal_bellman else self.target
                q_update(self.net, batch, cfg.gamma, tnet, self.opt, lr)
                self.updates += 1
                if self.updates % cfg.target_sync == 0:
                    self.sync_target()
            if cfg.eval_every and self.step % cfg.eval_every == 0:
                res = self.evaluate()
                log.info("control %s dof=%d step %d success %.3f d_med %.1fcm", cfg.method, arm.dof, self.step,
                         res["success_rate"], 100 * res["d_med"])
        return self.curve

    def sync_target(self) -> None:
        for t, p in zip(self.target.params(), self.net.params()):
            t[...] = p

    # -- persistence --------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        extra = {
            "kind": "control",
            "dof": self.arm.dof,
            "method": self.cfg.method,
            "updates": self.updates,
            "rng": self.rng.bit_generator.state,
            "episode": state_to_json(self.state),
            "curve": self.curve,
        }
        return Checkpoint.from_network(self.net, step=self.step, seed=self.seed, opt=self.opt, extra=extra)

    def save(self, path, with_replay: bool = True) -> None:
        save_checkpoint(path, self.checkpoint())
        if with_replay:
            arrays = self.memory.arrays()
            for k, p in enumerate(self.target.params()):
                arrays[f"target_{k}"] = p
            with open(str(path) + ".state.npz", "wb") as fh:
                np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, arm: Arm, cfg: ControlConfig) -> "ControlTrainer":
        ck = load_checkpoint(path)
        tr = cls(arm, cfg, ck.seed, net=ck.network())
        if ck.opt_state is not None:
            tr.opt.load_state(ck.opt_state)
        ex = ck.extra
        tr.step, tr.updates = ck.step, ex.get("updates", 0)
        tr.rng.bit_generator.state = ex["rng"]
        tr.state = state_from_json(ex.get("episode"))
        tr.curve = list(ex.get("curve", []))
        side = Path(str(path) + ".state.npz")
        if side.exists():
            with np.load(side) as d:
                tr.memory.load_arrays(d)
                tr.target.load_params([d[f"target_{k}"] for k in range(len(tr.target.params()))])
        return tr


def train_control(arm: Arm, cfg: ControlConfig, seed: int = 0) -> tuple[Network, list[dict]]:
    tr = ControlTrainer(arm, cfg, seed)
    curve = tr.train()
    return tr.net, curve


def write_curve(path, curve: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for row in curve:
            w.writerow({k: row[k] for k in CURVE_FIELDS})
