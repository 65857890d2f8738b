"""End-to-end acceptance checks for the voxelforge pipeline.

Ten numbered checks cover the headline claims: scaled learning runs on
both tasks, the physics and geometry oracles, the action mapping,
gradient and return correctness, critic quality, byte-level
determinism, and the robustness sweep. The two training fixtures are
session scoped and dominate the cost: roughly 25 minutes for the
volume task and 90 minutes for locomotion on one CPU core. Run

    pytest tests/test_acceptance.py -v -s

to see one summary line per check as it completes.
"""

import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from test_grid import flood_fill_components, oracle_largest_component, random_grid
from test_physics import body_from_cells, total_momentum, two_voxel_muscle
from test_ppo import loss_inputs

from voxelforge import harness, nets, physics, ppo
from voxelforge.cli import main as cli_main
from voxelforge.env import TaskSpec, clip_map
from voxelforge.grid import VoxelGrid, extract_body
from voxelforge.nets import PARAM_NAMES
from voxelforge.ppo import PpoConfig, compute_returns, ppo_loss_and_grad

ROOT = Path(__file__).resolve().parent.parent
L = 0.01  # voxel edge length in metres


# ---------------------------------------------------------------------------
# training fixtures
# ---------------------------------------------------------------------------

@dataclass
class TrainedRuns:
    config: harness.ExperimentConfig
    out: Path
    elapsed: float


def _train_all(config: harness.ExperimentConfig, out: Path) -> float:
    """Train every configured seed; returns training wall time in seconds."""
    start = time.time()
    workers = harness.resolve_workers(None, config.workers)
    with harness.worker_pool(workers) as pool:
        for seed in config.seeds:
            ppo.train(config.task, config.ppo, seed,
                      run_dir=out / f"seed_{seed}", pool=pool)
    return time.time() - start


@pytest.fixture(scope="session")
def volume_run(tmp_path_factory):
    config = harness.load_config(ROOT / "configs" / "volume.cfg")
    out = tmp_path_factory.mktemp("acceptance_volume")
    return TrainedRuns(config, out, _train_all(config, out))


@pytest.fixture(scope="session")
def locomotion_run(tmp_path_factory):
    config = harness.load_config(ROOT / "configs" / "locomotion.cfg")
    out = tmp_path_factory.mktemp("acceptance_locomotion")
    return TrainedRuns(config, out, _train_all(config, out))


def _pooled_rewards(run: TrainedRuns, checkpoint: str) -> np.ndarray:
    """Evaluation rewards pooled across seeds, one stream set per seed."""
    rewards = []
    for seed in run.config.seeds:
        params = nets.load_vxc(
            run.out / f"seed_{seed}" / "checkpoints" / checkpoint
        )
        rewards.append(harness.evaluate_policy(
            params, run.config.task, run.config.episodes, seed
        ).rewards)
    return np.concatenate(rewards)


# ---------------------------------------------------------------------------
# 1 and 2: the policy learns both tasks at desk scale
# ---------------------------------------------------------------------------

def test_01_volume_learning(volume_run):
    trained = _pooled_rewards(volume_run, "final.vxc")
    untrained = _pooled_rewards(volume_run, "epoch_0000.vxc")
    _, p_value = harness.welch_t_test(trained, untrained)
    factor = trained.mean() / untrained.mean()
    print(
        f"volume learning: untrained {untrained.mean():.1f} trained "
        f"{trained.mean():.1f} factor {factor:.2f} p {p_value:.2e} "
        f"wall {volume_run.elapsed / 60:.0f} min"
    )
    assert volume_run.elapsed <= 2 * 3600
    assert trained.mean() > untrained.mean()
    assert factor >= 2.0
    assert p_value < 0.01


def test_02_locomotion_learning(locomotion_run):
    trained = _pooled_rewards(locomotion_run, "final.vxc")
    untrained = _pooled_rewards(locomotion_run, "epoch_0000.vxc")
    _, p_value = harness.welch_t_test(trained, untrained)

    # the design-trend series must be computable from the metrics CSV
    # for every epoch of every seed; directions are reported, since at
    # this scale the task can favor different morphologies than at full
    # scale
    epochs = locomotion_run.config.ppo.epochs
    trends = {}
    for name in ("mean_volume", "mean_passive_ratio", "mean_lcc_ratio"):
        first, last = [], []
        for seed in locomotion_run.config.seeds:
            rows = harness.read_metrics_csv(
                locomotion_run.out / f"seed_{seed}" / "metrics.csv"
            )
            series = np.array([row[name] for row in rows])
            assert series.size == epochs
            assert np.isfinite(series).all()
            first.append(series[:10].mean())
            last.append(series[-10:].mean())
        trends[name] = (float(np.mean(first)), float(np.mean(last)))

    vol = trends["mean_volume"]
    passive = trends["mean_passive_ratio"]
    lcc = trends["mean_lcc_ratio"]
    print(
        f"locomotion learning: untrained {untrained.mean():.2f} trained "
        f"{trained.mean():.2f} p {p_value:.2e} "
        f"volume {vol[0]:.0f}->{vol[1]:.0f} "
        f"passive {passive[0]:.3f}->{passive[1]:.3f} "
        f"lcc {lcc[0]:.3f}->{lcc[1]:.3f} "
        f"wall {locomotion_run.elapsed / 60:.0f} min"
    )
    assert locomotion_run.elapsed <= 6 * 3600
    assert trained.mean() > untrained.mean()
    assert p_value < 0.05


# ---------------------------------------------------------------------------
# 3: simulator oracles with closed-form expectations
# ---------------------------------------------------------------------------

def test_03_physics_oracles():
    # a single voxel in free fall tracks the kinematic drop
    model = physics.build_model(body_from_cells([((0, 0, 0), 1)]))
    cfg = physics.SimConfig(ground=False)
    state = physics.initial_state(model)
    z0 = state.positions[0, 2]
    state = physics.step(model, state, cfg, n_steps=round(0.1 / cfg.dt))
    drop = z0 - state.positions[0, 2]
    expect = 0.5 * 9.81 * 0.1**2
    fall_err = abs(drop - expect) / expect
    assert fall_err < 0.01

    # a passive 3x3x3 cube settles on the ground with little sink-in
    cube = body_from_cells([((x, y, z), 1) for x in range(3)
                            for y in range(3) for z in range(3)])
    model = physics.build_model(cube)
    cfg = physics.SimConfig()
    state = physics.step(model, physics.initial_state(model), cfg,
                         n_steps=round(2.0 / cfg.dt))
    speed = float(np.linalg.norm(state.velocities, axis=1).max())
    assert speed < 1e-3
    pen = (L / 2) - state.positions[:, 2]
    pen = pen[pen > 0]
    assert pen.size > 0
    assert pen.mean() < 0.05 * L

    # the two-voxel muscle pair oscillates at the 4 Hz drive frequency
    model = physics.build_model(two_voxel_muscle(), gravity=0.0)
    cfg = physics.SimConfig(burn_in=0.0, eval_time=2.0, ground=False)
    res = physics.run_episode(model, cfg, record_every=1)
    lengths = np.linalg.norm(res.frames[:, 1] - res.frames[:, 0], axis=1)
    spectrum = np.abs(np.fft.rfft(lengths - lengths.mean()))
    freqs = np.fft.rfftfreq(len(lengths), res.frame_dt)
    peak = float(freqs[spectrum.argmax()])
    assert abs(peak - 4.0) < 0.2

    # internal actuation alone cannot create linear momentum
    body = body_from_cells([((0, 0, 0), 2), ((1, 0, 0), 3),
                            ((1, 1, 0), 2), ((1, 1, 1), 1)])
    model = physics.build_model(body, gravity=0.0)
    cfg = physics.SimConfig(ground=False)
    state = physics.initial_state(model)
    assert np.all(total_momentum(model, state) == 0.0)
    state = physics.step(model, state, cfg, n_steps=round(1.0 / cfg.dt))
    drift = float(np.abs(total_momentum(model, state)).max())
    assert drift < 1e-6

    print(
        f"physics oracles: fall err {fall_err:.4f}, settle speed {speed:.2e}, "
        f"penetration {pen.mean() / L:.4f} L, peak {peak:.2f} Hz, "
        f"momentum drift {drift:.2e} per second"
    )


# ---------------------------------------------------------------------------
# 4: body extraction against a brute-force flood fill
# ---------------------------------------------------------------------------

def _assert_matches_oracle(grid: VoxelGrid) -> None:
    expected = oracle_largest_component(grid.cells)
    body = extract_body(grid)
    if expected is None:
        assert body is None
        return
    cells = np.array(expected)
    assert np.array_equal(body.indices, cells)
    assert np.array_equal(body.materials, grid.cells[tuple(cells.T)])


def test_04_body_extraction_matches_flood_fill():
    rng = np.random.default_rng(20260825)
    ties = 0
    for _ in range(100):
        grid = random_grid(rng, 10, 4, fill=0.2)
        sizes = sorted((len(c) for c in flood_fill_components(grid.cells)),
                       reverse=True)
        if len(sizes) > 1 and sizes[0] == sizes[1]:
            ties += 1
        _assert_matches_oracle(grid)

    # constructed ties resolve to the component holding the
    # lexicographically smallest cell
    cells = np.zeros((10, 10, 10), dtype=np.uint8)
    cells[7, 7, 7] = 1
    cells[2, 2, 2] = 3
    grid = VoxelGrid(cells, 4)
    _assert_matches_oracle(grid)
    assert extract_body(grid).indices.tolist() == [[2, 2, 2]]

    cells = np.zeros((10, 10, 10), dtype=np.uint8)
    cells[0, 0, 3:5] = 2
    cells[0, 0, 0:2] = 1
    grid = VoxelGrid(cells, 4)
    _assert_matches_oracle(grid)
    body = extract_body(grid)
    assert body.indices.tolist() == [[0, 0, 0], [0, 0, 1]]
    assert body.materials.tolist() == [1, 1]

    print(f"body extraction: 100 random grids agree with flood fill, "
          f"{ties} natural ties, constructed ties break lexicographically")


# ---------------------------------------------------------------------------
# 5: the action-to-placement squashing map
# ---------------------------------------------------------------------------

def test_05_action_mapping():
    for raw, mapped in ((0.0, 0.5), (2.0, 1.0), (-2.0, 0.0),
                        (9.0, 1.0), (-31.0, 0.0)):
        assert clip_map(raw) == mapped

    rng = np.random.default_rng(424242)
    samples = rng.standard_normal((100_000, 3))
    mapped = clip_map(samples)
    interior = np.mean((mapped > 0.0) & (mapped < 1.0), axis=0)
    assert np.all(np.abs(interior - 0.9545) < 0.005)
    print(
        "action mapping: anchors exact, per-dimension interior fractions "
        f"{interior[0]:.4f} {interior[1]:.4f} {interior[2]:.4f} "
        "(expected 0.9545 +- 0.005)"
    )


# ---------------------------------------------------------------------------
# 6: analytic gradients of the complete loss
# ---------------------------------------------------------------------------

def test_06_gradient_matches_finite_differences():
    params = nets.initialize(np.random.default_rng(77), 4, 2, 8, 5,
                             dtype=np.float64)
    states, actions, log_probs_old = loss_inputs(params, batch=6, seed=78)
    # stagger the old log probs so some ratios clip and some do not
    log_probs_old = log_probs_old + np.array([-0.4, 0.0, 0.4, -0.4, 0.0, 0.4])
    rng = np.random.default_rng(79)
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
    n_checked = 0
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
            n_checked += 1
    print(f"gradients: {n_checked} parameters checked, "
          f"worst relative error {worst:.2e}")
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# 7: discounted returns
# ---------------------------------------------------------------------------

def test_07_returns_match_recursion():
    def oracle(rewards, gamma):
        acc = 0.0
        out = []
        for r in rewards[::-1]:
            acc = r + gamma * acc
            out.append(acc)
        return np.array(out[::-1], dtype=np.float64)

    rng = np.random.default_rng(1000)
    for _ in range(1000):
        length = int(rng.integers(1, 101))
        gamma = float(rng.uniform(0.9, 1.0))
        rewards = np.zeros(length)
        rewards[-1] = float(rng.normal() * 10.0)
        assert np.array_equal(compute_returns(rewards, gamma),
                              oracle(rewards, gamma))

    # sparse closed form R_t = gamma^(T-t) r_T, derived in exact rational
    # arithmetic; dyadic operands make the float recursion reproduce it
    # bit for bit
    for gamma in (Fraction(1, 2), Fraction(3, 4), Fraction(7, 8)):
        for length in range(1, 6):
            r = Fraction(5, 4)
            closed = [gamma ** (length - 1 - t) * r for t in range(length)]
            recursed = [Fraction(0)] * length
            acc = Fraction(0)
            for t in range(length - 1, -1, -1):
                acc = (r if t == length - 1 else Fraction(0)) + gamma * acc
                recursed[t] = acc
            assert recursed == closed
            rewards = np.zeros(length)
            rewards[-1] = float(r)
            assert np.array_equal(
                compute_returns(rewards, float(gamma)),
                np.array([float(c) for c in closed]),
            )

    # non-dyadic spot check at the production discount
    rewards = np.zeros(5)
    rewards[-1] = 3.7
    got = compute_returns(rewards, 0.99)
    for t in range(5):
        assert got[t] == pytest.approx(0.99 ** (4 - t) * 3.7, rel=1e-12)

    print("returns: 1000 random episodes bit-exact, "
          "closed form exact for episode lengths up to 5")


# ---------------------------------------------------------------------------
# 8: the critic learns to predict terminal rewards
# ---------------------------------------------------------------------------

def test_08_critic_learning(volume_run):
    records = harness.load_episode_records(volume_run.out)
    assert records
    lines = []
    for seed in volume_run.config.seeds:
        trial = f"seed_{seed}"
        ckpt = volume_run.out / trial / "checkpoints"
        trained = nets.load_vxc(ckpt / "final.vxc")
        untrained = nets.load_vxc(ckpt / "epoch_0000.vxc")
        report = harness.critic_report(trained, untrained, records, trial)
        lines.append(
            f"{trial} in {report.in_mse_trained:.1f}/{report.in_mse_untrained:.1f} "
            f"p {report.p_value:.1e} "
            f"out {report.out_mse_trained:.1f}/{report.out_mse_untrained:.1f}"
        )
        assert report.in_mse_trained < report.in_mse_untrained
        assert report.p_value < 0.01
    print("critic mse trained/untrained: " + "; ".join(lines))


# ---------------------------------------------------------------------------
# 9: byte-level reproducibility
# ---------------------------------------------------------------------------

def test_09_determinism(volume_run, tmp_path):
    task = TaskSpec(kind="volume", resolution=10, num_materials=2,
                    episode_length=10)
    config = PpoConfig(learning_rate=1e-3, batch_size=40, minibatch_size=20,
                       sgd_iters=2, epochs=3, hidden_width=16,
                       checkpoint_interval=2)
    trees = []
    for name in ("first", "second"):
        run_dir = tmp_path / name
        ppo.train(task, config, 5, run_dir=run_dir)
        files = sorted(p.relative_to(run_dir)
                       for p in run_dir.rglob("*") if p.is_file())
        trees.append((run_dir, files))
    (dir_a, files_a), (dir_b, files_b) = trees
    assert files_a == files_b
    for rel in files_a:
        assert (dir_a / rel).read_bytes() == (dir_b / rel).read_bytes(), rel

    # evaluate twice through the CLI against a trained checkpoint
    seed = volume_run.config.seeds[0]
    checkpoint = volume_run.out / f"seed_{seed}" / "checkpoints" / "final.vxc"
    outputs = []
    for name in ("eval_first", "eval_second"):
        out_dir = tmp_path / name
        code = cli_main([
            "evaluate", "--config", str(ROOT / "configs" / "volume.cfg"),
            "--checkpoint", str(checkpoint), "--episodes", "8",
            "--seed", "0", "--out", str(out_dir),
        ])
        assert code == 0
        outputs.append((out_dir / "evaluations.csv").read_bytes())
    assert outputs[0] == outputs[1]
    print(f"determinism: {len(files_a)} training artifacts byte-identical, "
          "evaluate rerun byte-identical")


# ---------------------------------------------------------------------------
# 10: policies keep working when the design is cut short
# ---------------------------------------------------------------------------

def test_10_robustness_sweep(locomotion_run, tmp_path):
    config = locomotion_run.config
    seed = config.seeds[0]
    params = nets.load_vxc(
        locomotion_run.out / f"seed_{seed}" / "checkpoints" / "final.vxc"
    )
    result = harness.robustness_sweep(params, config.task, 6, seed)
    full = harness.evaluate_policy(params, config.task, 6, seed)
    assert np.array_equal(result.rewards[:, -1], full.rewards)

    csv_path = tmp_path / "robustness.csv"
    harness.write_robustness_csv(csv_path, result)
    rows = csv_path.read_text().strip().splitlines()
    assert rows[0] == "t,mean_reward,std_reward,diverged"
    assert len(rows) == 1 + config.task.episode_length

    print(
        "robustness: final column bit-exact over 6 episodes, mean reward "
        f"reaches 95% of final at t={result.convergence_step} "
        f"of T={config.task.episode_length}"
    )
