"""Experiment plumbing and analyses over trained policies.

Covers the text config format, run manifests, policy evaluation,
trained-vs-untrained significance tests, critic prediction error in and
out of domain, the reward-vs-design-step robustness sweep, action
efficiency, and multi-trial aggregation into plot-ready CSV. Everything
here is deterministic given (config, seed): no timestamps, no ambient
RNG, and worker pools only parallelize physics scoring with results
reduced in episode order.
"""

from __future__ import annotations

import csv
import math
import multiprocessing
import os
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import nets, physics
from .env import (
    TaskSpec,
    apply_action,
    initial_state,
    load_vxe,
    state_tensor,
)
from .grid import Body, VoxelGrid, extract_body
from .physics import SimConfig
from .ppo import PpoConfig, score_grids

WORKERS_ENV = "VOXELFORGE_WORKERS"
EVAL_STREAM = 58283  # RNG lane for evaluation, disjoint from training epochs
Z_99 = 2.576  # two-sided 99% normal quantile

SUMMARY_COLUMNS = (
    "epoch", "mean_reward", "ci99", "mean_volume", "mean_surface_ratio",
    "mean_passive_ratio", "mean_lcc_ratio", "mean_substructures",
    "mean_symmetry", "mean_gzip_score",
)


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------
# Line-oriented text: one "section.key = value" per line, blank lines and
# full-line "#" comments ignored. Sections: task, sim, ppo, run. Values
# parse by the target field's type; booleans accept true/false, None
# accepts "none". run.seeds is a comma-separated integer list.

_SECTION_FIELDS = {
    "task": {f.name: f.type for f in fields(TaskSpec) if f.name != "sim"},
    "sim": {f.name: f.type for f in fields(SimConfig)},
    "ppo": {f.name: f.type for f in fields(PpoConfig)},
    "run": {"seeds": "str", "workers": "int", "out": "str", "episodes": "int"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a task, a trainer, seeds, and run plumbing."""

    task: TaskSpec
    ppo: PpoConfig
    seeds: tuple[int, ...] = (0,)
    workers: int = 1
    episodes: int = 16  # default evaluation episode count
    out: str | None = None

    def __post_init__(self) -> None:
        if len(self.seeds) == 0:
            raise ValueError("at least one seed is required")
        if self.workers < 1 or self.episodes < 1:
            raise ValueError("workers and episodes must be positive")


def _coerce(text: str, type_str: str, key: str):
    if "None" in type_str and text.lower() == "none":
        return None
    if "bool" in type_str:
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    try:
        if "int" in type_str:
            return int(text)
        if "float" in type_str:
            return float(text)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {text!r}") from None
    return text


def parse_config(text: str) -> ExperimentConfig:
    sections: dict[str, dict[str, str]] = {name: {} for name in _SECTION_FIELDS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.count(".") != 1:
            raise ValueError(f"line {lineno}: key must be 'section.key'")
        section, name = key.split(".")
        known = _SECTION_FIELDS.get(section)
        if known is None:
            raise ValueError(f"line {lineno}: unknown section {section!r}")
        if name not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        sections[section][name] = value

    for required in ("kind", "resolution", "num_materials"):
        if required not in sections["task"]:
            raise ValueError(f"config must set task.{required}")

    def build(section: str) -> dict:
        types = _SECTION_FIELDS[section]
        return {
            name: _coerce(value, types[name], f"{section}.{name}")
            for name, value in sections[section].items()
        }

    task_kwargs = build("task")
    sim = None
    if sections["sim"] or task_kwargs["kind"] == "locomotion":
        sim = SimConfig(**build("sim"))
    task = TaskSpec(sim=sim, **task_kwargs)
    ppo = PpoConfig(**build("ppo"))

    run = sections["run"]
    try:
        seeds = tuple(int(s) for s in run.get("seeds", "0").split(","))
    except ValueError:
        raise ValueError(f"run.seeds: cannot parse {run['seeds']!r}") from None
    return ExperimentConfig(
        task=task,
        ppo=ppo,
        seeds=seeds,
        workers=int(run.get("workers", "1")),
        episodes=int(run.get("episodes", "16")),
        out=run.get("out"),
    )


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def config_to_text(config: ExperimentConfig) -> str:
    """Normalized round-trippable dump; stable across runs."""
    lines = []
    for name in _SECTION_FIELDS["task"]:
        lines.append(f"task.{name} = {_format_value(getattr(config.task, name))}")
    if config.task.sim is not None:
        for name in _SECTION_FIELDS["sim"]:
            lines.append(
                f"sim.{name} = {_format_value(getattr(config.task.sim, name))}"
            )
    for name in _SECTION_FIELDS["ppo"]:
        lines.append(f"ppo.{name} = {_format_value(getattr(config.ppo, name))}")
    lines.append("run.seeds = " + ",".join(str(s) for s in config.seeds))
    lines.append(f"run.workers = {config.workers}")
    lines.append(f"run.episodes = {config.episodes}")
    if config.out is not None:
        lines.append(f"run.out = {config.out}")
    return "\n".join(lines) + "\n"


def write_manifest(out_dir, config: ExperimentConfig) -> None:
    """Record the code version and the full resolved config; no timestamps,
    so identical runs produce identical manifests."""
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = f"voxelforge {__version__}\n\n" + config_to_text(config)
    (out_dir / "manifest.txt").write_text(text)


# ---------------------------------------------------------------------------
# workers
# ---------------------------------------------------------------------------

def resolve_workers(requested: int | None = None, configured: int = 1) -> int:
    """Worker count: the environment variable wins, then the CLI flag,
    then the config file."""
    env = os.environ.get(WORKERS_ENV)
    if env is not None:
        count = int(env)
        if count < 1:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer")
        return count
    if requested is not None:
        return requested
    return configured


@contextmanager
def worker_pool(workers: int):
    """Yield a multiprocessing pool, or None for the serial path."""
    if workers <= 1:
        yield None
        return
    with multiprocessing.Pool(workers) as pool:
        yield pool


# ---------------------------------------------------------------------------
# policy evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    """Terminal outcomes of n policy episodes under the evaluation streams."""

    rewards: np.ndarray  # (n,) float64
    diverged: np.ndarray  # (n,) bool
    actions: np.ndarray  # (n, T, A) float32
    grids: list[VoxelGrid]


def check_params_match(params: nets.PolicyParams, task: TaskSpec) -> None:
    if (params.resolution, params.num_materials) != (
        task.resolution, task.num_materials
    ):
        raise ValueError(
            f"checkpoint is for rho={params.resolution} k={params.num_materials}, "
            f"task needs rho={task.resolution} k={task.num_materials}"
        )


def _rollout(
    params: nets.PolicyParams, task: TaskSpec, rngs: list[np.random.Generator]
) -> tuple[np.ndarray, list]:
    """Advance all episodes in lockstep; returns actions and final states."""
    n = len(rngs)
    states = [initial_state(task) for _ in range(n)]
    actions = np.empty((n, task.episode_length, task.action_dim), dtype=np.float32)
    for t in range(task.episode_length):
        obs = np.stack([state_tensor(s) for s in states])
        out = nets.forward(params, obs)
        for i in range(n):
            single = nets.PolicyOutput(
                mu=out.mu[i], log_sigma=out.log_sigma[i], value=float(out.value[i])
            )
            action = nets.sample(single, rngs[i])
            actions[i, t] = action
            states[i] = apply_action(states[i], action, task)
    return actions, states


def evaluate_policy(
    params: nets.PolicyParams,
    task: TaskSpec,
    n_episodes: int,
    seed: int,
    pool=None,
) -> EvalResult:
    """Sample n terminal rewards under dedicated evaluation RNG streams."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be positive")
    check_params_match(params, task)
    rngs = [
        np.random.default_rng([seed, EVAL_STREAM, i]) for i in range(n_episodes)
    ]
    actions, states = _rollout(params, task, rngs)
    grids = [s.grid for s in states]
    rewards, diverged = score_grids(grids, task, pool=pool)
    return EvalResult(rewards=rewards, diverged=diverged, actions=actions,
                      grids=grids)


def ci99_half_width(values: np.ndarray) -> float:
    """Normal 99% CI half-width, Z * sd / sqrt(n); zero for n < 2."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return Z_99 * float(values.std(ddof=1)) / math.sqrt(values.size)


def welch_t_test(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Two-sample t statistic and p-value without equal-variance pooling."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least two samples per side")
    if a.var(ddof=1) == 0.0 and b.var(ddof=1) == 0.0:
        # degenerate: the test statistic is 0/0; decide by the means
        if a.mean() == b.mean():
            return 0.0, 1.0
        return math.copysign(math.inf, a.mean() - b.mean()), 0.0
    result = stats.ttest_ind(a, b, equal_var=False)
    return float(result.statistic), float(result.pvalue)


@dataclass(frozen=True)
class ComparisonReport:
    """Two policies evaluated on the same episode streams."""

    mean_a: float
    mean_b: float
    ci_a: float
    ci_b: float
    t_stat: float
    p_value: float
    alpha: float
    n_episodes: int

    @property
    def significant(self) -> bool:
        return self.p_value < self.alpha


def compare_policies(
    params_a: nets.PolicyParams,
    params_b: nets.PolicyParams,
    task: TaskSpec,
    n_episodes: int,
    seed: int,
    pool=None,
    alpha: float = 0.01,
) -> ComparisonReport:
    """Welch t-test between two policies' terminal rewards.

    Both sides use the same per-episode RNG streams, so swapping the
    arguments exactly negates the mean difference, and identical
    checkpoints give p = 1.
    """
    if n_episodes < 2:
        raise ValueError("comparison needs at least two episodes per side")
    eval_a = evaluate_policy(params_a, task, n_episodes, seed, pool=pool)
    eval_b = evaluate_policy(params_b, task, n_episodes, seed, pool=pool)
    t_stat, p_value = welch_t_test(eval_a.rewards, eval_b.rewards)
    return ComparisonReport(
        mean_a=float(eval_a.rewards.mean()),
        mean_b=float(eval_b.rewards.mean()),
        ci_a=ci99_half_width(eval_a.rewards),
        ci_b=ci99_half_width(eval_b.rewards),
        t_stat=t_stat,
        p_value=p_value,
        alpha=alpha,
        n_episodes=n_episodes,
    )


def format_comparison(report: ComparisonReport) -> str:
    verdict = (
        f"significant at alpha={report.alpha:g}"
        if report.significant
        else "no significant difference"
    )
    return (
        f"A: {report.mean_a:.6g} +- {report.ci_a:.3g}  "
        f"B: {report.mean_b:.6g} +- {report.ci_b:.3g}  "
        f"t={report.t_stat:.4g} p={report.p_value:.4g} ({verdict}, "
        f"n={report.n_episodes})"
    )


# ---------------------------------------------------------------------------
# action efficiency
# ---------------------------------------------------------------------------

def action_efficiency(task: TaskSpec, actions: np.ndarray) -> float:
    """Final body volume over the count of all cells ever covered.

    Erased or overwritten cells stay in the denominator, so wasted or
    retracted deposits lower the score. Zero actions define 0.
    """
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[1] != task.action_dim:
        raise ValueError(f"expected (t, {task.action_dim}) actions")
    if actions.shape[0] > task.episode_length:
        raise ValueError("more actions than the episode length")
    state = initial_state(task)
    for action in actions:
        state = apply_action(state, action, task)
    covered = int(np.count_nonzero(state.deposited))
    if covered == 0:
        return 0.0
    body = extract_body(state.grid)
    return (body.volume if body is not None else 0) / covered


# ---------------------------------------------------------------------------
# critic evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeRecord:
    """One saved episode, tagged with its trial and training epoch."""

    trial: str
    epoch: int
    index: int
    task: TaskSpec
    actions: np.ndarray
    reward: float
    diverged: bool


def load_episode_records(run_dir) -> list[EpisodeRecord]:
    """Collect every saved episode under a run directory.

    Accepts either a multi-trial layout (<run>/<trial>/episodes/...) or a
    single trial (<run>/episodes/...); order is lexicographic and stable.
    """
    run_dir = Path(run_dir)
    trial_dirs = sorted(
        d for d in run_dir.iterdir() if d.is_dir() and (d / "episodes").is_dir()
    )
    if not trial_dirs and (run_dir / "episodes").is_dir():
        trial_dirs = [run_dir]
    records = []
    for trial_dir in trial_dirs:
        for epoch_dir in sorted((trial_dir / "episodes").glob("epoch_*")):
            epoch = int(epoch_dir.name.split("_")[1])
            for path in sorted(epoch_dir.glob("ep_*.vxe")):
                task, actions, reward, diverged = load_vxe(path)
                records.append(EpisodeRecord(
                    trial=trial_dir.name,
                    epoch=epoch,
                    index=int(path.stem.split("_")[1]),
                    task=task,
                    actions=actions,
                    reward=reward,
                    diverged=diverged,
                ))
    return records


def _terminal_tensor(record: EpisodeRecord) -> np.ndarray:
    state = initial_state(record.task)
    for action in record.actions:
        state = apply_action(state, action, record.task)
    return state_tensor(state)


def critic_predictions(
    params: nets.PolicyParams, records: list[EpisodeRecord], chunk: int = 256
) -> np.ndarray:
    """V(s_T) for each record's terminal design state."""
    for record in records:
        check_params_match(params, record.task)
    values = np.empty(len(records), dtype=np.float64)
    for start in range(0, len(records), chunk):
        part = records[start:start + chunk]
        obs = np.stack([_terminal_tensor(r) for r in part])
        out = nets.forward(params, obs)
        values[start:start + len(part)] = np.asarray(out.value, dtype=np.float64)
    return values


@dataclass(frozen=True)
class CriticReport:
    """Squared prediction error of a trial's critic, in and out of domain."""

    trial: str
    n_in: int
    n_out: int
    in_mse_trained: float
    in_mse_untrained: float
    out_mse_trained: float
    out_mse_untrained: float
    p_value: float  # Welch test on in-domain squared errors


def critic_report(
    trained: nets.PolicyParams,
    untrained: nets.PolicyParams,
    records: list[EpisodeRecord],
    trial: str,
) -> CriticReport:
    """Compare trained vs untrained critics on one trial's records.

    In-domain records come from the named trial; everything else is
    out-of-domain, so the two sets are disjoint by construction.
    """
    in_records = [r for r in records if r.trial == trial]
    out_records = [r for r in records if r.trial != trial]
    if len(in_records) < 2:
        raise ValueError(f"trial {trial!r} has fewer than two records")

    def squared_errors(params, subset):
        truth = np.array([r.reward for r in subset], dtype=np.float64)
        return (critic_predictions(params, subset) - truth) ** 2

    sq_in_tr = squared_errors(trained, in_records)
    sq_in_un = squared_errors(untrained, in_records)
    _, p_value = welch_t_test(sq_in_tr, sq_in_un)
    out_tr = out_un = math.nan
    if out_records:
        out_tr = float(squared_errors(trained, out_records).mean())
        out_un = float(squared_errors(untrained, out_records).mean())
    return CriticReport(
        trial=trial,
        n_in=len(in_records),
        n_out=len(out_records),
        in_mse_trained=float(sq_in_tr.mean()),
        in_mse_untrained=float(sq_in_un.mean()),
        out_mse_trained=out_tr,
        out_mse_untrained=out_un,
        p_value=p_value,
    )


def critic_rows(
    trained: nets.PolicyParams,
    untrained: nets.PolicyParams,
    records: list[EpisodeRecord],
    trial: str,
) -> list[dict]:
    """Per-record predictions for the critic CSV, aggregable by epoch."""
    pred_tr = critic_predictions(trained, records)
    pred_un = critic_predictions(untrained, records)
    return [
        {
            "critic_trial": trial,
            "record_trial": r.trial,
            "domain": "in" if r.trial == trial else "out",
            "epoch": r.epoch,
            "index": r.index,
            "true_reward": r.reward,
            "trained_prediction": float(pred_tr[i]),
            "untrained_prediction": float(pred_un[i]),
        }
        for i, r in enumerate(records)
    ]


# ---------------------------------------------------------------------------
# robustness sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RobustnessResult:
    """Reward from simulating each design-step prefix of n episodes."""

    rewards: np.ndarray  # (n, T); column t-1 is the reward after t actions
    diverged: np.ndarray  # (n, T) bool

    @property
    def mean_rewards(self) -> np.ndarray:
        return self.rewards.mean(axis=0)

    @property
    def convergence_step(self) -> int | None:
        """First t whose mean reward reaches 95% of the final mean."""
        means = self.mean_rewards
        final = means[-1]
        if final <= 0.0:
            return None
        reached = np.nonzero(means >= 0.95 * final)[0]
        return int(reached[0]) + 1 if reached.size else None


def _score_body(args: tuple[Body, SimConfig | None]) -> tuple[float, bool]:
    body, sim = args
    try:
        result = physics.evaluate_body(body, sim)
    except physics.DivergenceError:
        return 0.0, True
    return float(result.reward), False


def robustness_sweep(
    params: nets.PolicyParams,
    task: TaskSpec,
    n_episodes: int,
    seed: int,
    pool=None,
) -> RobustnessResult:
    """Simulate the body after every action prefix of sampled episodes.

    Uses the same evaluation streams as evaluate_policy, so the t = T
    column reproduces the standard terminal evaluation bit for bit.
    Identical prefix bodies are simulated once; late actions that leave
    the body unchanged are free.
    """
    if task.kind != "locomotion":
        raise ValueError("the robustness sweep requires a locomotion task")
    if n_episodes < 1:
        raise ValueError("n_episodes must be positive")
    check_params_match(params, task)
    rngs = [
        np.random.default_rng([seed, EVAL_STREAM, i]) for i in range(n_episodes)
    ]

    t_total = task.episode_length
    states = [initial_state(task) for _ in range(n_episodes)]
    keys = np.empty((n_episodes, t_total), dtype=object)
    bodies: dict[bytes, Body] = {}
    for t in range(t_total):
        obs = np.stack([state_tensor(s) for s in states])
        out = nets.forward(params, obs)
        for i in range(n_episodes):
            single = nets.PolicyOutput(
                mu=out.mu[i], log_sigma=out.log_sigma[i], value=float(out.value[i])
            )
            states[i] = apply_action(states[i], nets.sample(single, rngs[i]), task)
            body = extract_body(states[i].grid)
            if body is None:
                keys[i, t] = None
                continue
            key = body.indices.tobytes() + body.materials.tobytes()
            keys[i, t] = key
            bodies.setdefault(key, body)

    order = sorted(bodies)
    jobs = [(bodies[key], task.sim) for key in order]
    if pool is not None:
        scored = pool.map(_score_body, jobs)
    else:
        scored = [_score_body(j) for j in jobs]
    by_key = dict(zip(order, scored))

    rewards = np.zeros((n_episodes, t_total), dtype=np.float64)
    diverged = np.zeros((n_episodes, t_total), dtype=bool)
    for i in range(n_episodes):
        for t in range(t_total):
            key = keys[i, t]
            if key is not None:
                rewards[i, t], diverged[i, t] = by_key[key]
    return RobustnessResult(rewards=rewards, diverged=diverged)


def write_robustness_csv(path, result: RobustnessResult) -> None:
    """Columns: design step t, mean/std reward over episodes, and how
    many of the prefix bodies diverged in simulation."""
    means = result.mean_rewards
    stds = result.rewards.std(axis=0)
    counts = result.diverged.sum(axis=0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "mean_reward", "std_reward", "diverged"])
        for t in range(result.rewards.shape[1]):
            writer.writerow(
                [t + 1, f"{means[t]:.9g}", f"{stds[t]:.9g}", int(counts[t])]
            )


# ---------------------------------------------------------------------------
# multi-trial aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialSummary:
    """Per-epoch mean reward with a 99% CI, plus body-metric means."""

    epochs: np.ndarray  # (E,) int
    mean_reward: np.ndarray  # (E,)
    ci99: np.ndarray  # (E,) half-widths
    metric_means: dict[str, np.ndarray]  # mean_<metric> -> (E,)
    n_trials: int


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {key: float(value) for key, value in raw.items()}
            row["epoch"] = int(raw["epoch"])
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no metric rows")
    return rows


def summarize_trials(histories: list[list[dict]]) -> TrialSummary:
    if not histories:
        raise ValueError("at least one trial is required")
    lengths = {len(h) for h in histories}
    if len(lengths) != 1:
        raise ValueError(f"trials have different epoch counts: {sorted(lengths)}")
    rewards = np.array(
        [[row["mean_reward"] for row in h] for h in histories], dtype=np.float64
    )
    n_epochs = rewards.shape[1]
    ci99 = np.array([ci99_half_width(rewards[:, e]) for e in range(n_epochs)])
    metric_names = [c for c in SUMMARY_COLUMNS if c.startswith("mean_")
                    and c != "mean_reward"]
    metric_means = {
        name: np.array(
            [[row[name] for row in h] for h in histories], dtype=np.float64
        ).mean(axis=0)
        for name in metric_names
    }
    return TrialSummary(
        epochs=np.array([row["epoch"] for row in histories[0]], dtype=np.int64),
        mean_reward=rewards.mean(axis=0),
        ci99=ci99,
        metric_means=metric_means,
        n_trials=len(histories),
    )


def write_summary_csv(path, summary: TrialSummary) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for e in range(summary.epochs.size):
            row = [str(int(summary.epochs[e])),
                   f"{summary.mean_reward[e]:.9g}", f"{summary.ci99[e]:.9g}"]
            row += [f"{summary.metric_means[name][e]:.9g}"
                    for name in SUMMARY_COLUMNS[3:]]
            writer.writerow(row)
