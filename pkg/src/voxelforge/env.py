"""Design MDP for voxel robots.

An episode is a fixed number of design steps. Each step decodes an
unbounded real action vector into a 2x2x2 material bundle, stamps it
onto the grid, and pays zero reward. At the final step the largest
connected body is extracted and scored: by voxel count for the volume
task, or by simulated locomotion for the locomotion task. Policies act
on the raw pre-clip action; all squashing lives in the decoder here.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from .grid import Bundle, VoxelGrid, deposit_bundle, extract_body

if TYPE_CHECKING:
    from .physics import SimConfig

BUNDLE_OFFSET = 1  # min corner sits one cell below the rounded center

TASK_KINDS = ("volume", "locomotion")
TASK_MATERIAL_COUNTS = {"volume": 2, "locomotion": 4}


def clip_map(a: np.ndarray | float) -> np.ndarray | float:
    """Map unbounded action components into [0, 1], saturating at |a| = 2."""
    return 0.5 + np.clip(a, -2.0, 2.0) / 4.0


def decode_action(action: np.ndarray, resolution: int, num_materials: int) -> Bundle:
    """Decode a raw (3 + k)-vector into a bundle placement.

    The first three components locate the bundle center in [0, rho]; the
    min corner is the half-up rounded center minus one, so bundles may
    hang one voxel over any grid face but always cover at least one
    in-grid cell. The material is the argmax of the k mapped material
    components, ties resolved to the lowest material id.
    """
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (3 + num_materials,):
        raise ValueError(f"expected action shape ({3 + num_materials},), got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("action components must be finite")
    center = clip_map(a[:3]) * resolution
    min_corner = tuple(int(np.floor(c + 0.5)) - BUNDLE_OFFSET for c in center)
    material = int(np.argmax(clip_map(a[3:])))
    return Bundle(min_corner, material)


@dataclass(frozen=True)
class TaskSpec:
    """Static description of a design task."""

    kind: str
    resolution: int
    num_materials: int
    episode_length: int = 100
    sim: "SimConfig | None" = None

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.num_materials != TASK_MATERIAL_COUNTS[self.kind]:
            raise ValueError(
                f"{self.kind} task requires k={TASK_MATERIAL_COUNTS[self.kind]}, "
                f"got {self.num_materials}"
            )
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2")
        if self.episode_length < 1:
            raise ValueError("episode_length must be positive")

    @property
    def action_dim(self) -> int:
        return 3 + self.num_materials


@dataclass(frozen=True)
class EpisodeState:
    """One in-flight design episode; immutable, advanced by env_step."""

    grid: VoxelGrid
    step_index: int
    episode_length: int
    deposited: np.ndarray  # bool (rho, rho, rho), cells ever covered by a bundle
    diverged: bool = False

    @property
    def done(self) -> bool:
        return self.step_index >= self.episode_length


def initial_state(task: TaskSpec) -> EpisodeState:
    deposited = np.zeros((task.resolution,) * 3, dtype=bool)
    deposited.flags.writeable = False
    return EpisodeState(
        grid=VoxelGrid.empty(task.resolution, task.num_materials),
        step_index=0,
        episode_length=task.episode_length,
        deposited=deposited,
    )


def terminal_reward(grid: VoxelGrid, task: TaskSpec) -> tuple[float, bool]:
    """Score a finished design. Returns (reward, diverged)."""
    body = extract_body(grid)
    if body is None:
        return 0.0, False
    if task.kind == "volume":
        return float(body.volume), False
    from . import physics  # deferred: volume-task users never pay the jit cost

    try:
        result = physics.evaluate_body(body, task.sim)
    except physics.DivergenceError:
        return 0.0, True
    return float(result.reward), False


def apply_action(
    state: EpisodeState, action: np.ndarray, task: TaskSpec
) -> EpisodeState:
    """Decode and stamp one bundle; no reward evaluation."""
    if state.step_index >= state.episode_length:
        raise ValueError("episode is already complete")
    bundle = decode_action(action, task.resolution, task.num_materials)
    grid = deposit_bundle(state.grid, bundle)
    covered = bundle.covered_cells(task.resolution)
    deposited = state.deposited.copy()
    deposited[covered[:, 0], covered[:, 1], covered[:, 2]] = True
    deposited.flags.writeable = False
    return EpisodeState(
        grid=grid,
        step_index=state.step_index + 1,
        episode_length=state.episode_length,
        deposited=deposited,
        diverged=state.diverged,
    )


def env_step(
    state: EpisodeState, action: np.ndarray, task: TaskSpec
) -> tuple[EpisodeState, float, bool]:
    """Advance one design step; reward is zero except at the final step."""
    next_state = apply_action(state, action, task)
    if not next_state.done:
        return next_state, 0.0, False
    reward, diverged = terminal_reward(next_state.grid, task)
    if diverged:
        next_state = replace(next_state, diverged=True)
    return next_state, reward, True


def replay_episode(
    task: TaskSpec, actions: np.ndarray
) -> tuple[EpisodeState, float]:
    """Drive a full episode from a (T, 3 + k) action array."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (task.episode_length, task.action_dim):
        raise ValueError(
            f"expected actions shape {(task.episode_length, task.action_dim)}, "
            f"got {actions.shape}"
        )
    state = initial_state(task)
    reward = 0.0
    for t in range(task.episode_length):
        state, reward, _ = env_step(state, actions[t], task)
    return state, reward


def state_tensor(state: EpisodeState) -> np.ndarray:
    """One-hot (rho, rho, rho, k) float32 view of the grid; channel 0 is null."""
    cells = state.grid.cells
    k = state.grid.num_materials
    out = np.zeros(cells.shape + (k,), dtype=np.float32)
    for m in range(k):
        out[..., m] = cells == m
    return out


# ---------------------------------------------------------------------------
# episode records
# ---------------------------------------------------------------------------
# Text format "VXE1": a header line
#     VXE1 <kind> <rho> <k> <T>
# then T lines of 3 + k raw action components printed with 9 significant
# digits (exact for float32 actions), then a terminal line
#     reward <value> [diverged]
# with the reward at full float64 precision so replays can be compared
# bit-exactly.

VXE_MAGIC = "VXE1"


def save_vxe(
    path,
    task: TaskSpec,
    actions: np.ndarray,
    reward: float,
    diverged: bool = False,
) -> None:
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (task.episode_length, task.action_dim):
        raise ValueError(f"expected {task.episode_length} actions of dim {task.action_dim}")
    lines = [
        f"{VXE_MAGIC} {task.kind} {task.resolution} "
        f"{task.num_materials} {task.episode_length}"
    ]
    for row in actions:
        lines.append(" ".join(f"{v:.9g}" for v in row))
    tail = f"reward {reward:.17g}"
    if diverged:
        tail += " diverged"
    lines.append(tail)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vxe(path) -> tuple[TaskSpec, np.ndarray, float, bool]:
    """Read an episode record; the returned task has no simulation config."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith(VXE_MAGIC + " "):
        raise ValueError(f"{path}: not a {VXE_MAGIC} file")
    fields = lines[0].split()
    if len(fields) != 5:
        raise ValueError(f"{path}: malformed header {lines[0]!r}")
    kind = fields[1]
    rho, k, t_total = (int(v) for v in fields[2:])
    task = TaskSpec(kind=kind, resolution=rho, num_materials=k, episode_length=t_total)
    if len(lines) != 2 + t_total:
        raise ValueError(f"{path}: expected {t_total} action lines plus reward")
    actions = np.array(
        [[float(v) for v in ln.split()] for ln in lines[1:-1]], dtype=np.float64
    )
    if actions.shape != (t_total, task.action_dim):
        raise ValueError(f"{path}: action lines have wrong dimension")
    tail = lines[-1].split()
    if tail[0] != "reward" or len(tail) not in (2, 3):
        raise ValueError(f"{path}: malformed reward line {lines[-1]!r}")
    reward = float(tail[1])
    diverged = len(tail) == 3 and tail[2] == "diverged"
    return task, actions, reward, diverged
