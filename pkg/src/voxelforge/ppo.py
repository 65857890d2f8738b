"""Proximal policy optimization over voxel design episodes.

Rollouts are collected in lockstep: every episode in the batch advances
one design step per network forward, so the policy is evaluated on one
(n_episodes, ...) batch per step regardless of worker count. Rewards
are sparse and terminal; returns discount them backwards through each
episode. The update is the clipped-surrogate objective with a mean
squared value loss, no GAE, no value clipping, and adaptive moment
estimation. Per-episode RNG streams are keyed by (seed, epoch, index),
so results never depend on scheduling.
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nets
from .env import (
    EpisodeState,
    TaskSpec,
    apply_action,
    initial_state,
    save_vxe,
    state_tensor,
    terminal_reward,
)
from .grid import VoxelGrid, compute_metrics, extract_body

METRICS_COLUMNS = (
    "epoch", "episodes", "mean_reward", "std_reward", "max_reward",
    "mean_volume", "mean_surface_ratio", "mean_passive_ratio",
    "mean_lcc_ratio", "mean_substructures", "mean_symmetry",
    "mean_gzip_score", "policy_loss", "value_loss", "entropy",
    "mean_sigma", "diverged", "empty_bodies",
)


@dataclass(frozen=True)
class PpoConfig:
    """Training hyperparameters; defaults follow the volume task."""

    learning_rate: float = 1e-4
    batch_size: int = 25600  # timesteps per epoch, rounded up to whole episodes
    minibatch_size: int = 128
    sgd_iters: int = 50
    epochs: int = 500
    gamma: float = 0.99
    clip_epsilon: float = 0.3
    value_coef: float = 1.0
    entropy_coef: float = 0.0
    hidden_width: int = 128
    checkpoint_interval: int = 10
    use_gae: bool = False
    value_clip: float | None = None

    def __post_init__(self) -> None:
        for name in ("learning_rate", "batch_size", "minibatch_size",
                     "sgd_iters", "epochs", "gamma", "clip_epsilon",
                     "hidden_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.use_gae:
            raise ValueError("generalized advantage estimation is disabled by design")
        if self.value_clip is not None:
            raise ValueError("critic clipping is disabled by design")

    def episodes_per_batch(self, episode_length: int) -> int:
        return math.ceil(self.batch_size / episode_length)


def volume_defaults(**overrides) -> PpoConfig:
    return PpoConfig(**{
        "batch_size": 25600, "sgd_iters": 50, "epochs": 500,
        "hidden_width": 128, **overrides,
    })


def locomotion_defaults(**overrides) -> PpoConfig:
    return PpoConfig(**{
        "batch_size": 12800, "sgd_iters": 10, "epochs": 2500,
        "hidden_width": 256, **overrides,
    })


# ---------------------------------------------------------------------------
# returns and advantages
# ---------------------------------------------------------------------------

def compute_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Discounted returns of one episode by backward recursion."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1:
        raise ValueError("rewards must be a 1-D episode")
    if rewards.size > 1 and np.any(rewards[:-1] != 0.0):
        raise ValueError("rewards must be zero before the final step")
    returns = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        returns[t] = acc
    return returns


def compute_advantages(
    returns: np.ndarray, values: np.ndarray, standardize: bool = True
) -> np.ndarray:
    """A = R - V, standardized across the batch."""
    adv = np.asarray(returns, dtype=np.float64) - np.asarray(values, dtype=np.float64)
    if standardize:
        adv = (adv - adv.mean()) / max(float(adv.std()), 1e-8)
    return adv


# ---------------------------------------------------------------------------
# the clipped-surrogate update
# ---------------------------------------------------------------------------

def ppo_loss_and_grad(
    params: nets.PolicyParams,
    states: np.ndarray,
    actions: np.ndarray,
    log_probs_old: np.ndarray,
    returns: np.ndarray,
    advantages: np.ndarray,
    config: PpoConfig,
) -> tuple[float, dict[str, float], dict[str, np.ndarray]]:
    """Loss, its components, and exact parameter gradients for a minibatch."""
    out, cache = nets.forward_cache(params, states)
    batch = states.shape[0]
    mu = np.asarray(out.mu, dtype=np.float64)
    log_sigma = np.asarray(out.log_sigma, dtype=np.float64)
    sigma = np.exp(log_sigma)
    value = np.asarray(out.value, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    ret = np.asarray(returns, dtype=np.float64)

    log_probs_new = nets.log_prob(out, a)
    ratio = np.exp(log_probs_new - np.asarray(log_probs_old, dtype=np.float64))
    clipped = np.clip(ratio, 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon)
    surr_plain = ratio * adv
    surr_clip = clipped * adv
    policy_loss = -float(np.minimum(surr_plain, surr_clip).mean())
    value_loss = float(((value - ret) ** 2).mean())
    ent = float(nets.entropy(out).mean())
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * ent
    if not math.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss: policy={policy_loss} value={value_loss} "
            f"entropy={ent} ratio_max={np.abs(ratio).max()}"
        )

    # gradient flows through the ratio only where the plain term is the min
    active = surr_plain <= surr_clip
    g_lp = -(adv * ratio * active) / batch
    z = (a - mu) / sigma
    g_mu = g_lp[:, None] * z / sigma
    g_log_sigma = g_lp[:, None] * (z * z - 1.0)
    g_log_sigma = g_log_sigma - config.entropy_coef / batch
    g_value = 2.0 * config.value_coef * (value - ret) / batch

    tape = nets.backward(params, cache, g_mu, g_log_sigma, g_value)
    components = {"policy_loss": policy_loss, "value_loss": value_loss,
                  "entropy": ent}
    return loss, components, tape


class Adam:
    """Adaptive moment estimation over a PolicyParams tensor dict."""

    def __init__(self, params: nets.PolicyParams, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = nets.zero_tape(params)
        self.v = nets.zero_tape(params)

    def step(self, tape: dict[str, np.ndarray]) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for name, tensor in self.params.tensors.items():
            g = tape[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensor -= (
                self.learning_rate * (m / correct1)
                / (np.sqrt(v / correct2) + self.eps)
            ).astype(tensor.dtype)


# ---------------------------------------------------------------------------
# rollout collection
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    """One epoch of complete episodes, flattened episode-major."""

    states: np.ndarray  # (N, rho, rho, rho, k) float32
    actions: np.ndarray  # (N, A) float32
    log_probs: np.ndarray  # (N,) float64, at collection time
    values: np.ndarray  # (N,) float64, at collection time
    returns: np.ndarray  # (N,) float64
    advantages: np.ndarray  # (N,) float64, standardized
    episode_rewards: np.ndarray  # (n_episodes,)
    episode_actions: np.ndarray  # (n_episodes, T, A) float32
    grids: list[VoxelGrid]
    diverged: np.ndarray  # (n_episodes,) bool
    mean_sigma: float


def _score_terminal(args: tuple[VoxelGrid, TaskSpec]) -> tuple[float, bool]:
    grid, task = args
    return terminal_reward(grid, task)


def score_grids(
    grids: list[VoxelGrid], task: TaskSpec, pool=None
) -> tuple[np.ndarray, np.ndarray]:
    """Terminal rewards and divergence flags, in grid order.

    A worker pool only helps the locomotion task, where each score is a
    physics episode; volume scoring is cheaper than the pickling.
    """
    jobs = [(g, task) for g in grids]
    if pool is not None and task.kind == "locomotion":
        scored = pool.map(_score_terminal, jobs)
    else:
        scored = [_score_terminal(j) for j in jobs]
    rewards = np.array([r for r, _ in scored], dtype=np.float64)
    diverged = np.array([d for _, d in scored], dtype=bool)
    return rewards, diverged


def collect_batch(
    params: nets.PolicyParams,
    task: TaskSpec,
    config: PpoConfig,
    seed: int,
    epoch: int,
    pool=None,
) -> RolloutBatch:
    """Run every episode of one epoch in lockstep under the current policy."""
    n_ep = config.episodes_per_batch(task.episode_length)
    t_total = task.episode_length
    a_dim = task.action_dim
    rho = task.resolution
    k = task.num_materials

    rngs = [np.random.default_rng([seed, epoch, 1000 + i]) for i in range(n_ep)]
    env_states: list[EpisodeState] = [initial_state(task) for _ in range(n_ep)]
    states = np.empty((n_ep, t_total, rho, rho, rho, k), dtype=np.float32)
    actions = np.empty((n_ep, t_total, a_dim), dtype=np.float32)
    log_probs = np.empty((n_ep, t_total), dtype=np.float64)
    values = np.empty((n_ep, t_total), dtype=np.float64)
    sigma_sum = 0.0

    for t in range(t_total):
        obs = np.stack([state_tensor(s) for s in env_states])
        out = nets.forward(params, obs)
        values[:, t] = np.asarray(out.value, dtype=np.float64)
        sigma_sum += float(np.exp(out.log_sigma).mean())
        states[:, t] = obs
        for i in range(n_ep):
            single = nets.PolicyOutput(
                mu=out.mu[i], log_sigma=out.log_sigma[i], value=float(out.value[i])
            )
            action = nets.sample(single, rngs[i])
            actions[i, t] = action
            log_probs[i, t] = nets.log_prob(single, action)
            env_states[i] = apply_action(env_states[i], action, task)

    grids = [s.grid for s in env_states]
    episode_rewards, diverged = score_grids(grids, task, pool=pool)

    returns = np.empty((n_ep, t_total), dtype=np.float64)
    for i in range(n_ep):
        rewards = np.zeros(t_total)
        rewards[-1] = episode_rewards[i]
        returns[i] = compute_returns(rewards, config.gamma)

    n = n_ep * t_total
    flat_returns = returns.reshape(n)
    flat_values = values.reshape(n)
    return RolloutBatch(
        states=states.reshape((n, rho, rho, rho, k)),
        actions=actions.reshape((n, a_dim)),
        log_probs=log_probs.reshape(n),
        values=flat_values,
        returns=flat_returns,
        advantages=compute_advantages(flat_returns, flat_values),
        episode_rewards=episode_rewards,
        episode_actions=actions,
        grids=grids,
        diverged=diverged,
        mean_sigma=sigma_sum / t_total,
    )


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: nets.PolicyParams
    history: list[dict[str, float]]
    run_dir: Path | None


def _epoch_metrics(
    epoch: int, batch: RolloutBatch, loss_sums: dict[str, float], n_updates: int
) -> dict[str, float]:
    bodies = [extract_body(g) for g in batch.grids]
    kept = [(g, b) for g, b in zip(batch.grids, bodies) if b is not None]
    metric_means = {name: 0.0 for name in (
        "volume", "surface_ratio", "passive_ratio", "lcc_ratio",
        "substructures", "symmetry", "gzip_score")}
    if kept:
        rows = [compute_metrics(g, b).as_dict() for g, b in kept]
        for name in metric_means:
            metric_means[name] = float(np.mean([r[name] for r in rows]))
    rewards = batch.episode_rewards
    return {
        "epoch": epoch,
        "episodes": rewards.size,
        "mean_reward": float(rewards.mean()),
        "std_reward": float(rewards.std()),
        "max_reward": float(rewards.max()),
        **{f"mean_{k}": v for k, v in metric_means.items()},
        "policy_loss": loss_sums["policy_loss"] / max(n_updates, 1),
        "value_loss": loss_sums["value_loss"] / max(n_updates, 1),
        "entropy": loss_sums["entropy"] / max(n_updates, 1),
        "mean_sigma": batch.mean_sigma,
        "diverged": int(batch.diverged.sum()),
        "empty_bodies": sum(1 for b in bodies if b is None),
    }


def _format_cell(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{value:.9g}"


def write_metrics_csv(path, history: list[dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in history:
            writer.writerow([_format_cell(row[c]) for c in METRICS_COLUMNS])


def _save_episode_records(
    directory: Path, epoch: int, task: TaskSpec, batch: RolloutBatch
) -> None:
    epoch_dir = directory / f"epoch_{epoch:04d}"
    epoch_dir.mkdir(parents=True, exist_ok=True)
    for i in range(batch.episode_rewards.size):
        save_vxe(
            epoch_dir / f"ep_{i:04d}.vxe",
            task,
            batch.episode_actions[i],
            float(batch.episode_rewards[i]),
            diverged=bool(batch.diverged[i]),
        )


def train(
    task: TaskSpec,
    config: PpoConfig,
    seed: int,
    run_dir: str | Path | None = None,
    pool=None,
    verbose: bool = False,
) -> TrainResult:
    """Full training run; writes metrics, checkpoints, and episode records.

    All artifacts are reproducible byte-for-byte from (task, config, seed).
    """
    init_rng = np.random.default_rng([seed, 0])
    params = nets.initialize(
        init_rng, task.resolution, task.num_materials,
        config.hidden_width, task.action_dim,
    )
    optimizer = Adam(params, config.learning_rate)

    out_dir = Path(run_dir) if run_dir is not None else None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        nets.save_vxc(out_dir / "checkpoints" / "epoch_0000.vxc", params)

    history: list[dict[str, float]] = []
    for epoch in range(config.epochs):
        batch = collect_batch(params, task, config, seed, epoch, pool=pool)
        n = batch.returns.size
        shuffle_rng = np.random.default_rng([seed, epoch, 1])
        loss_sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
        n_updates = 0
        for _ in range(config.sgd_iters):
            perm = shuffle_rng.permutation(n)
            for start in range(0, n, config.minibatch_size):
                idx = perm[start:start + config.minibatch_size]
                _, components, tape = ppo_loss_and_grad(
                    params, batch.states[idx], batch.actions[idx],
                    batch.log_probs[idx], batch.returns[idx],
                    batch.advantages[idx], config,
                )
                optimizer.step(tape)
                for key in loss_sums:
                    loss_sums[key] += components[key]
                n_updates += 1

        for tensor in params.tensors.values():
            if not np.isfinite(tensor).all():
                if out_dir is not None:
                    write_metrics_csv(out_dir / "metrics.csv", history)
                raise RuntimeError(
                    f"non-finite parameters after epoch {epoch}; "
                    "last good checkpoint kept on disk"
                )

        row = _epoch_metrics(epoch, batch, loss_sums, n_updates)
        history.append(row)
        if verbose:
            print(
                f"epoch {epoch:4d} reward {row['mean_reward']:.3f} "
                f"volume {row['mean_volume']:.1f} sigma {row['mean_sigma']:.3f}",
                file=sys.stderr,
            )

        last = epoch == config.epochs - 1
        at_interval = (
            config.checkpoint_interval > 0
            and (epoch + 1) % config.checkpoint_interval == 0
        )
        if out_dir is not None and (at_interval or last):
            nets.save_vxc(
                out_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.vxc", params
            )
            _save_episode_records(out_dir / "episodes", epoch, task, batch)

    if out_dir is not None:
        nets.save_vxc(out_dir / "checkpoints" / "final.vxc", params)
        write_metrics_csv(out_dir / "metrics.csv", history)
    return TrainResult(params=params, history=history, run_dir=out_dir)
