"""voxelforge: learning to design freeform voxel robots with policy gradients.

Subpackages
-----------
grid     -- voxel design grid, bundle deposition, body extraction, morphometrics
physics  -- beam-lattice soft-body simulation with actuation and ground friction
env      -- the voxel-deposition design MDP (action decoding, episodes, records)
nets     -- CNN + MLP actor-critic with exact reverse-mode gradients
ppo      -- proximal policy optimization trainer over design episodes
harness  -- experiment configuration, evaluation sweeps, statistics, CLI backend
"""

from .env import (
    EpisodeState,
    TaskSpec,
    clip_map,
    decode_action,
    env_step,
    initial_state,
    load_vxe,
    replay_episode,
    save_vxe,
    state_tensor,
)
from .grid import (
    Body,
    BodyMetrics,
    Bundle,
    VoxelGrid,
    compute_metrics,
    deposit_bundle,
    extract_body,
    load_vxg,
    save_vxg,
)
from .harness import (
    ExperimentConfig,
    action_efficiency,
    compare_policies,
    critic_report,
    evaluate_policy,
    load_config,
    load_episode_records,
    robustness_sweep,
    summarize_trials,
    welch_t_test,
)
from .nets import PolicyParams, load_vxc, save_vxc
from .physics import (
    DivergenceError,
    Material,
    MaterialTable,
    SimConfig,
    build_model,
    evaluate_body,
    load_vxt,
    run_episode,
    save_vxt,
)
from .ppo import PpoConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "Body",
    "BodyMetrics",
    "Bundle",
    "DivergenceError",
    "EpisodeState",
    "ExperimentConfig",
    "Material",
    "MaterialTable",
    "PolicyParams",
    "PpoConfig",
    "SimConfig",
    "TaskSpec",
    "TrainResult",
    "VoxelGrid",
    "action_efficiency",
    "build_model",
    "clip_map",
    "compare_policies",
    "compute_metrics",
    "critic_report",
    "decode_action",
    "deposit_bundle",
    "env_step",
    "evaluate_body",
    "evaluate_policy",
    "extract_body",
    "initial_state",
    "load_config",
    "load_episode_records",
    "load_vxc",
    "load_vxe",
    "load_vxg",
    "load_vxt",
    "replay_episode",
    "robustness_sweep",
    "run_episode",
    "save_vxc",
    "save_vxe",
    "save_vxg",
    "save_vxt",
    "state_tensor",
    "summarize_trials",
    "train",
    "welch_t_test",
]
