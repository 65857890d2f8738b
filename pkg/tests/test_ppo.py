"""Returns, advantages, the clipped-surrogate update, and the trainer."""

import math

import numpy as np
import pytest

from voxelforge.env import TaskSpec, replay_episode
from voxelforge.nets import PARAM_NAMES, initialize, load_vxc, zero_tape
from voxelforge.ppo import (
    METRICS_COLUMNS,
    Adam,
    PpoConfig,
    collect_batch,
    compute_advantages,
    compute_returns,
    locomotion_defaults,
    ppo_loss_and_grad,
    train,
    volume_defaults,
)


def tiny_task(episode_length=4):
    return TaskSpec(kind="volume", resolution=4, num_materials=2,
                    episode_length=episode_length)


def tiny_config(**overrides):
    return PpoConfig(**{
        "batch_size": 8, "minibatch_size": 8, "sgd_iters": 2, "epochs": 2,
        "hidden_width": 8, "learning_rate": 1e-3, "checkpoint_interval": 1,
        **overrides,
    })


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

class TestConfig:
    def test_episodes_per_batch_rounds_up(self):
        config = PpoConfig(batch_size=1024)
        assert config.episodes_per_batch(50) == 21
        assert config.episodes_per_batch(64) == 16
        assert PpoConfig(batch_size=640).episodes_per_batch(50) == 13

    def test_task_defaults(self):
        volume = volume_defaults()
        assert (volume.batch_size, volume.sgd_iters) == (25600, 50)
        assert (volume.epochs, volume.hidden_width) == (500, 128)
        locomotion = locomotion_defaults(epochs=5)
        assert (locomotion.batch_size, locomotion.sgd_iters) == (12800, 10)
        assert (locomotion.epochs, locomotion.hidden_width) == (5, 256)
        for config in (volume, locomotion):
            assert config.learning_rate == 1e-4
            assert config.gamma == 0.99
            assert config.clip_epsilon == 0.3
            assert config.value_coef == 1.0
            assert config.entropy_coef == 0.0
            assert config.minibatch_size == 128

    def test_disabled_variants_rejected(self):
        with pytest.raises(ValueError):
            PpoConfig(use_gae=True)
        with pytest.raises(ValueError):
            PpoConfig(value_clip=0.2)
        with pytest.raises(ValueError):
            PpoConfig(gamma=0.0)


# ---------------------------------------------------------------------------
# returns
# ---------------------------------------------------------------------------

def recursion_oracle(rewards, gamma):
    """Independently coded backward recursion."""
    out = []
    acc = 0.0
    for r in rewards[::-1]:
        acc = r + gamma * acc
        out.append(acc)
    return np.array(out[::-1], dtype=np.float64)


class TestReturns:
    def test_three_step_example(self):
        returns = compute_returns(np.array([0.0, 0.0, 1.0]), 0.99)
        assert returns == pytest.approx([0.99 * 0.99, 0.99, 1.0])

    def test_zero_terminal_reward(self):
        assert np.all(compute_returns(np.zeros(7), 0.99) == 0.0)

    def test_matches_oracle_bit_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            t_total = int(rng.integers(1, 21))
            rewards = np.zeros(t_total)
            rewards[-1] = rng.normal()
            gamma = float(rng.uniform(0.5, 1.0))
            assert np.array_equal(
                compute_returns(rewards, gamma), recursion_oracle(rewards, gamma)
            )

    def test_closed_form_geometric_decay(self):
        for t_total in range(1, 6):
            rewards = np.zeros(t_total)
            rewards[-1] = 3.25
            returns = compute_returns(rewards, 0.9)
            expected = [3.25 * 0.9 ** (t_total - 1 - t) for t in range(t_total)]
            assert returns == pytest.approx(expected, rel=1e-12)

    def test_rejects_intermediate_rewards(self):
        with pytest.raises(ValueError):
            compute_returns(np.array([0.0, 1.0, 2.0]), 0.99)

    def test_rejects_non_vector(self):
        with pytest.raises(ValueError):
            compute_returns(np.zeros((3, 2)), 0.99)


class TestAdvantages:
    def test_perfect_critic_gives_zeros(self):
        returns = np.array([1.0, 2.0, 3.0])
        assert np.all(compute_advantages(returns, returns, standardize=False) == 0.0)

    def test_two_point_standardization(self):
        adv = compute_advantages(np.array([1.0, 0.0]), np.zeros(2))
        assert adv == pytest.approx([1.0, -1.0])

    def test_standardization_recomputed(self):
        rng = np.random.default_rng(1)
        returns = rng.normal(size=200)
        values = rng.normal(size=200)
        raw = returns - values
        adv = compute_advantages(returns, values)
        assert adv == pytest.approx((raw - raw.mean()) / raw.std())
        assert adv.mean() == pytest.approx(0.0, abs=1e-12)
        assert adv.std() == pytest.approx(1.0, rel=1e-12)


# ---------------------------------------------------------------------------
# the loss and its gradients
# ---------------------------------------------------------------------------

def loss_inputs(params, batch=6, seed=2):
    """States, sampled actions, and matching old log probabilities."""
    from voxelforge import nets

    rng = np.random.default_rng(seed)
    ids = rng.integers(0, params.num_materials,
                       size=(batch,) + (params.resolution,) * 3)
    states = np.eye(params.num_materials, dtype=np.float64)[ids].astype(
        params.dtype
    )
    out = nets.forward(params, states)
    actions = np.asarray(out.mu) + np.asarray(out.sigma) * rng.standard_normal(
        out.mu.shape
    ).astype(params.dtype)
    log_probs_old = np.asarray(nets.log_prob(out, actions), dtype=np.float64)
    return states, actions, log_probs_old


class TestLoss:
    def test_unchanged_policy_recovers_plain_surrogate(self):
        params = initialize(np.random.default_rng(3), 4, 2, 8, 5)
        states, actions, log_probs_old = loss_inputs(params)
        rng = np.random.default_rng(4)
        adv = rng.normal(size=6)
        returns = rng.normal(size=6)
        loss, parts, _ = ppo_loss_and_grad(
            params, states, actions, log_probs_old, returns, adv, PpoConfig()
        )
        # ratio is exactly 1, so the surrogate is -mean(adv)
        assert parts["policy_loss"] == pytest.approx(-adv.mean(), abs=1e-12)
        assert loss == pytest.approx(
            parts["policy_loss"] + parts["value_loss"], abs=1e-9
        )

    def test_clip_caps_positive_advantage(self):
        params = initialize(np.random.default_rng(5), 4, 2, 8, 5)
        states, actions, log_probs_old = loss_inputs(params)
        # old policy half as likely: ratio = 2, clipped to 1 + epsilon
        shifted = log_probs_old - math.log(2.0)
        _, parts, _ = ppo_loss_and_grad(
            params, states, actions, shifted, np.zeros(6), np.ones(6), PpoConfig()
        )
        assert parts["policy_loss"] == pytest.approx(-1.3, rel=1e-9)

    def test_negative_advantage_not_clipped_low(self):
        params = initialize(np.random.default_rng(6), 4, 2, 8, 5)
        states, actions, log_probs_old = loss_inputs(params)
        shifted = log_probs_old - math.log(2.0)
        _, parts, _ = ppo_loss_and_grad(
            params, states, actions, shifted, np.zeros(6), -np.ones(6), PpoConfig()
        )
        # min(2 * -1, 1.3 * -1) keeps the unclipped term
        assert parts["policy_loss"] == pytest.approx(2.0, rel=1e-9)

    def test_value_loss_scales_with_coefficient(self):
        params = initialize(np.random.default_rng(7), 4, 2, 8, 5)
        states, actions, log_probs_old = loss_inputs(params)
        returns = np.full(6, 2.0)
        base, parts, _ = ppo_loss_and_grad(
            params, states, actions, log_probs_old, returns, np.zeros(6),
            PpoConfig(value_coef=1.0),
        )
        doubled, parts2, _ = ppo_loss_and_grad(
            params, states, actions, log_probs_old, returns, np.zeros(6),
            PpoConfig(value_coef=2.0),
        )
        assert parts2["value_loss"] == pytest.approx(parts["value_loss"])
        assert doubled - base == pytest.approx(parts["value_loss"], rel=1e-9)

    def test_entropy_bonus_lowers_loss(self):
        params = initialize(np.random.default_rng(8), 4, 2, 8, 5)
        states, actions, log_probs_old = loss_inputs(params)
        plain, parts, _ = ppo_loss_and_grad(
            params, states, actions, log_probs_old, np.zeros(6), np.zeros(6),
            PpoConfig(entropy_coef=0.0),
        )
        bonus, _, _ = ppo_loss_and_grad(
            params, states, actions, log_probs_old, np.zeros(6), np.zeros(6),
            PpoConfig(entropy_coef=0.5),
        )
        assert bonus == pytest.approx(plain - 0.5 * parts["entropy"], rel=1e-9)

    def test_non_finite_loss_raises(self):
        params = initialize(np.random.default_rng(9), 4, 2, 8, 5)
        states, actions, log_probs_old = loss_inputs(params)
        with pytest.raises(RuntimeError, match="non-finite"):
            ppo_loss_and_grad(
                params, states, actions, log_probs_old,
                np.full(6, np.inf), np.zeros(6), PpoConfig(),
            )

    def test_gradient_matches_finite_differences(self):
        """Central differences through the complete loss, every parameter."""
        params = initialize(np.random.default_rng(10), 4, 2, 8, 5,
                            dtype=np.float64)
        states, actions, log_probs_old = loss_inputs(params, batch=6, seed=11)
        # stagger the old log probs so some ratios clip and some do not,
        # keeping every ratio away from the clip boundaries
        offsets = np.array([-0.4, 0.0, 0.4, -0.4, 0.0, 0.4])
        log_probs_old = log_probs_old + offsets
        rng = np.random.default_rng(12)
        adv = rng.normal(size=6)
        returns = rng.normal(size=6)
        config = PpoConfig(value_coef=0.7, entropy_coef=0.01)

        def loss_only():
            loss, _, _ = ppo_loss_and_grad(
                params, states, actions, log_probs_old, returns, adv, config
            )
            return loss

        _, _, tape = ppo_loss_and_grad(
            params, states, actions, log_probs_old, returns, adv, config
        )
        h = 1e-5
        worst = 0.0
        for name in PARAM_NAMES:
            tensor = params.tensors[name]
            for idx in np.ndindex(*tensor.shape):
                orig = tensor[idx]
                tensor[idx] = orig + h
                up = loss_only()
                tensor[idx] = orig - h
                down = loss_only()
                tensor[idx] = orig
                fd = (up - down) / (2 * h)
                denom = max(abs(fd), abs(tape[name][idx]), 1e-6)
                worst = max(worst, abs(fd - tape[name][idx]) / denom)
        assert worst < 1e-4


# ---------------------------------------------------------------------------
# the optimizer
# ---------------------------------------------------------------------------

class TestAdam:
    def test_zero_gradient_is_a_no_op(self):
        params = initialize(np.random.default_rng(13), 4, 2, 8, 5)
        before = params.copy()
        Adam(params, 1e-3).step(zero_tape(params))
        for name in PARAM_NAMES:
            assert np.array_equal(params.tensors[name], before.tensors[name])

    def test_first_step_size_is_learning_rate(self):
        params = initialize(np.random.default_rng(14), 4, 2, 8, 5)
        before = params.copy()
        tape = {name: np.ones_like(t) for name, t in params.tensors.items()}
        Adam(params, 1e-3).step(tape)
        for name in PARAM_NAMES:
            delta = params.tensors[name] - before.tensors[name]
            # float32 weight quantization dominates the error budget
            assert np.allclose(delta, -1e-3, rtol=1e-3, atol=1e-7)

    def test_descends_a_quadratic(self):
        params = initialize(np.random.default_rng(15), 4, 2, 8, 5)
        target = params.copy()
        params.tensors["pi_w1"] += 0.5
        optimizer = Adam(params, 1e-2)
        for _ in range(200):
            tape = zero_tape(params)
            tape["pi_w1"] = params.tensors["pi_w1"] - target.tensors["pi_w1"]
            optimizer.step(tape)
        gap = np.abs(params.tensors["pi_w1"] - target.tensors["pi_w1"]).max()
        assert gap < 0.1


# ---------------------------------------------------------------------------
# rollout collection
# ---------------------------------------------------------------------------

class TestCollect:
    def test_shapes_and_one_hot_states(self):
        task = tiny_task()
        config = tiny_config()
        params = initialize(np.random.default_rng(16), 4, 2, 8, task.action_dim)
        batch = collect_batch(params, task, config, seed=1, epoch=0)
        n = 2 * 4  # episodes_per_batch(4) = 2
        assert batch.states.shape == (n, 4, 4, 4, 2)
        assert batch.actions.shape == (n, task.action_dim)
        assert batch.log_probs.shape == (n,)
        assert batch.episode_actions.shape == (2, 4, task.action_dim)
        assert np.all(batch.states.sum(axis=-1) == 1.0)
        assert np.all(np.isfinite(batch.log_probs))

    def test_rewards_match_environment_replay(self):
        task = tiny_task()
        params = initialize(np.random.default_rng(17), 4, 2, 8, task.action_dim)
        batch = collect_batch(params, task, tiny_config(), seed=2, epoch=5)
        for i in range(batch.episode_rewards.size):
            state, reward = replay_episode(task, batch.episode_actions[i])
            assert reward == batch.episode_rewards[i]
            assert np.array_equal(state.grid.cells, batch.grids[i].cells)

    def test_returns_discount_terminal_reward(self):
        task = tiny_task()
        config = tiny_config()
        params = initialize(np.random.default_rng(18), 4, 2, 8, task.action_dim)
        batch = collect_batch(params, task, config, seed=3, epoch=0)
        per_episode = batch.returns.reshape(2, 4)
        for i in range(2):
            expected = batch.episode_rewards[i] * config.gamma ** np.arange(
                3, -1, -1
            )
            assert per_episode[i] == pytest.approx(expected, rel=1e-12)

    def test_advantages_are_standardized(self):
        task = tiny_task()
        params = initialize(np.random.default_rng(19), 4, 2, 8, task.action_dim)
        batch = collect_batch(params, task, tiny_config(), seed=4, epoch=0)
        assert batch.advantages.mean() == pytest.approx(0.0, abs=1e-10)
        assert batch.advantages.std() == pytest.approx(1.0, rel=1e-9)

    def test_collection_is_deterministic(self):
        task = tiny_task()
        params = initialize(np.random.default_rng(20), 4, 2, 8, task.action_dim)
        a = collect_batch(params, task, tiny_config(), seed=5, epoch=7)
        b = collect_batch(params, task, tiny_config(), seed=5, epoch=7)
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.episode_rewards, b.episode_rewards)
        c = collect_batch(params, task, tiny_config(), seed=5, epoch=8)
        assert not np.array_equal(a.actions, c.actions)

    def test_untrained_sigma_near_one(self):
        task = tiny_task()
        params = initialize(np.random.default_rng(21), 4, 2, 8, task.action_dim)
        batch = collect_batch(params, task, tiny_config(), seed=6, epoch=0)
        assert batch.mean_sigma == pytest.approx(1.0, abs=0.1)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

class TestTrain:
    def test_training_is_deterministic(self):
        task = tiny_task()
        config = tiny_config()
        a = train(task, config, seed=7)
        b = train(task, config, seed=7)
        assert a.history == b.history
        for name in PARAM_NAMES:
            assert np.array_equal(a.params.tensors[name], b.params.tensors[name])
        c = train(task, config, seed=8)
        assert not np.array_equal(
            a.params.tensors["pi_w1"], c.params.tensors["pi_w1"]
        )

    def test_history_rows_are_complete(self):
        result = train(tiny_task(), tiny_config(), seed=9)
        assert len(result.history) == 2
        for epoch, row in enumerate(result.history):
            assert row["epoch"] == epoch
            assert set(row) == set(METRICS_COLUMNS)
            assert all(np.isfinite(v) for v in row.values())

    def test_artifacts_on_disk(self, tmp_path):
        run_dir = tmp_path / "run"
        result = train(tiny_task(), tiny_config(), seed=10, run_dir=run_dir)
        checkpoints = sorted(p.name for p in (run_dir / "checkpoints").iterdir())
        assert checkpoints == [
            "epoch_0000.vxc", "epoch_0001.vxc", "epoch_0002.vxc", "final.vxc"
        ]
        final = load_vxc(run_dir / "checkpoints" / "final.vxc")
        for name in PARAM_NAMES:
            assert np.array_equal(final.tensors[name], result.params.tensors[name])
        lines = (run_dir / "metrics.csv").read_text().splitlines()
        assert lines[0] == ",".join(METRICS_COLUMNS)
        assert len(lines) == 3
        episodes = sorted((run_dir / "episodes").rglob("*.vxe"))
        assert len(episodes) == 4  # 2 checkpointed epochs x 2 episodes

    def test_untrained_checkpoint_differs_from_final(self, tmp_path):
        run_dir = tmp_path / "run"
        train(tiny_task(), tiny_config(), seed=11, run_dir=run_dir)
        first = load_vxc(run_dir / "checkpoints" / "epoch_0000.vxc")
        final = load_vxc(run_dir / "checkpoints" / "final.vxc")
        assert not np.array_equal(first.tensors["pi_w3"], final.tensors["pi_w3"])

    def test_reruns_are_byte_identical(self, tmp_path):
        task = tiny_task()
        config = tiny_config()
        train(task, config, seed=12, run_dir=tmp_path / "a")
        train(task, config, seed=12, run_dir=tmp_path / "b")
        for rel in ("metrics.csv", "checkpoints/final.vxc",
                    "checkpoints/epoch_0000.vxc",
                    "episodes/epoch_0001/ep_0000.vxe"):
            assert (tmp_path / "a" / rel).read_bytes() == (
                tmp_path / "b" / rel
            ).read_bytes()
