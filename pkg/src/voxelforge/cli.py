"""Command-line interface.

Subcommands: train, evaluate, replay, robustness, critic-eval, metrics,
export-plots. Every run writes its outputs under --out together with a
manifest recording the resolved configuration, and identical invocations
produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, nets, physics, ppo
from .env import apply_action, initial_state, load_vxe, replay_episode
from .grid import BodyMetrics, compute_metrics, extract_body, load_vxg


def _add_out(parser, default=None, required=False):
    parser.add_argument("--out", default=default, required=required,
                        help="output directory")


def cmd_train(args) -> int:
    config = harness.load_config(args.config)
    out = Path(args.out or config.out or "runs")
    seeds = [args.seed] if args.seed is not None else list(config.seeds)
    workers = harness.resolve_workers(args.workers, config.workers)
    harness.write_manifest(out, config)
    with harness.worker_pool(workers) as pool:
        for seed in seeds:
            result = ppo.train(
                config.task, config.ppo, seed,
                run_dir=out / f"seed_{seed}", pool=pool, verbose=args.verbose,
            )
            last = result.history[-1]
            print(
                f"seed {seed}: mean reward {last['mean_reward']:.6g} "
                f"after {len(result.history)} epochs -> {out / f'seed_{seed}'}"
            )
    return 0


def cmd_evaluate(args) -> int:
    config = harness.load_config(args.config)
    params = nets.load_vxc(args.checkpoint)
    n_episodes = args.episodes or config.episodes
    workers = harness.resolve_workers(args.workers, config.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_manifest(out, config)
    with harness.worker_pool(workers) as pool:
        result = harness.evaluate_policy(
            params, config.task, n_episodes, args.seed, pool=pool
        )
        report = None
        if args.baseline:
            baseline = nets.load_vxc(args.baseline)
            report = harness.compare_policies(
                baseline, params, config.task, n_episodes, args.seed, pool=pool
            )
    with open(out / "evaluations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "reward", "diverged", "action_efficiency"])
        for i in range(n_episodes):
            efficiency = harness.action_efficiency(config.task, result.actions[i])
            writer.writerow([
                i, f"{result.rewards[i]:.9g}", int(result.diverged[i]),
                f"{efficiency:.9g}",
            ])
    mean = result.rewards.mean()
    ci = harness.ci99_half_width(result.rewards)
    print(f"mean reward {mean:.6g} +- {ci:.3g} over {n_episodes} episodes")
    if report is not None:
        text = "baseline vs checkpoint: " + harness.format_comparison(report)
        (out / "comparison.txt").write_text(text + "\n")
        print(text)
    return 0


def cmd_replay(args) -> int:
    task, actions, stored_reward, stored_diverged = load_vxe(args.episode)
    if task.kind == "locomotion":
        sim = (harness.load_config(args.config).task.sim
               if args.config else physics.SimConfig())
        if sim is None:
            raise ValueError("config does not define a simulation section")
        task = replace(task, sim=sim)
    state, reward = replay_episode(task, actions)
    match = reward == stored_reward and state.diverged == stored_diverged
    print(f"stored reward {stored_reward:.17g}, replayed {reward:.17g} "
          f"({'match' if match else 'MISMATCH'})")
    if args.trace:
        if task.kind != "locomotion":
            raise ValueError("only locomotion episodes have a trajectory")
        body = extract_body(state.grid)
        if body is None:
            raise ValueError("episode produced an empty body; nothing to trace")
        model = physics.build_model(body)
        episode = physics.run_episode(model, task.sim,
                                      record_every=args.record_every)
        physics.save_vxt(args.trace, episode.frames, episode.frame_dt)
        print(f"wrote {episode.frames.shape[0]} frames to {args.trace}")
    if not match:
        raise RuntimeError(
            "replayed reward differs from the record; was the episode "
            "trained under a different simulation config?"
        )
    return 0


def cmd_robustness(args) -> int:
    config = harness.load_config(args.config)
    params = nets.load_vxc(args.checkpoint)
    n_episodes = args.episodes or config.episodes
    workers = harness.resolve_workers(args.workers, config.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_manifest(out, config)
    with harness.worker_pool(workers) as pool:
        result = harness.robustness_sweep(
            params, config.task, n_episodes, args.seed, pool=pool
        )
    harness.write_robustness_csv(out / "robustness.csv", result)
    step = result.convergence_step
    final = result.mean_rewards[-1]
    where = f"step {step}" if step is not None else "not reached"
    print(f"final mean reward {final:.6g}; 95% convergence: {where}")
    return 0


def cmd_critic_eval(args) -> int:
    run = Path(args.run)
    records = harness.load_episode_records(run)
    if not records:
        raise ValueError(f"{run}: no episode records found")
    trials = sorted({r.trial for r in records})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    reports = []
    for trial in trials:
        trial_dir = run / trial if (run / trial).is_dir() else run
        trained = nets.load_vxc(trial_dir / "checkpoints" / "final.vxc")
        untrained = nets.load_vxc(trial_dir / "checkpoints" / "epoch_0000.vxc")
        rows.extend(harness.critic_rows(trained, untrained, records, trial))
        reports.append(harness.critic_report(trained, untrained, records, trial))
    with open(out / "critic_eval.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({
                k: f"{v:.9g}" if isinstance(v, float) else v
                for k, v in row.items()
            })
    with open(out / "critic_summary.csv", "w", newline="") as fh:
        names = ["trial", "n_in", "n_out", "in_mse_trained", "in_mse_untrained",
                 "out_mse_trained", "out_mse_untrained", "p_value"]
        writer = csv.writer(fh)
        writer.writerow(names)
        for report in reports:
            writer.writerow([
                getattr(report, n) if isinstance(getattr(report, n), (int, str))
                else f"{getattr(report, n):.9g}"
                for n in names
            ])
    for report in reports:
        print(
            f"{report.trial}: in-domain MSE trained {report.in_mse_trained:.6g} "
            f"vs untrained {report.in_mse_untrained:.6g} (p={report.p_value:.4g}); "
            f"out-of-domain {report.out_mse_trained:.6g} vs "
            f"{report.out_mse_untrained:.6g}"
        )
    return 0


def cmd_metrics(args) -> int:
    if args.grid:
        grid = load_vxg(args.grid)
        extra: dict[str, float] = {}
    else:
        task, actions, reward, _ = load_vxe(args.episode)
        state = initial_state(task)
        for action in actions:
            state = apply_action(state, action, task)
        grid = state.grid
        extra = {
            "action_efficiency": harness.action_efficiency(task, actions),
            "stored_reward": reward,
        }
    metrics = compute_metrics(grid, extract_body(grid))
    names = list(BodyMetrics.FIELDS) + list(extra)
    values = {**metrics.as_dict(), **extra}
    print(",".join(names))
    print(",".join(
        str(values[n]) if isinstance(values[n], int) else f"{values[n]:.9g}"
        for n in names
    ))
    return 0


def cmd_export_plots(args) -> int:
    paths = []
    for entry in args.trials.split(","):
        path = Path(entry)
        paths.append(path / "metrics.csv" if path.is_dir() else path)
    histories = [harness.read_metrics_csv(p) for p in paths]
    summary = harness.summarize_trials(histories)
    harness.write_summary_csv(args.out, summary)
    print(f"wrote {summary.epochs.size} epoch rows "
          f"({summary.n_trials} trials) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelforge",
        description="Train and analyze voxel robot design policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run PPO training for one or all seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="train only this seed (default: all seeds in config)")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    _add_out(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="sample terminal rewards of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", default=None,
                   help="second checkpoint for a significance comparison")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    _add_out(p, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replay", help="re-run a saved episode deterministically")
    p.add_argument("--episode", required=True)
    p.add_argument("--trace", default=None, help="trajectory output path")
    p.add_argument("--config", default=None,
                   help="config supplying the simulation section")
    p.add_argument("--record-every", type=int, default=100,
                   help="simulation steps per trace frame")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("robustness",
                       help="reward after each design-step prefix")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    _add_out(p, required=True)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("critic-eval",
                       help="critic prediction error in and out of domain")
    p.add_argument("--run", required=True,
                   help="training output directory with per-seed trials")
    _add_out(p, required=True)
    p.set_defaults(func=cmd_critic_eval)

    p = sub.add_parser("metrics", help="body metrics of a design or episode")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--grid", help="a .vxg design file")
    group.add_argument("--episode", help="a .vxe episode record")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("export-plots",
                       help="aggregate trial metrics into plot-ready CSV")
    p.add_argument("--trials", required=True,
                   help="comma-separated trial directories or metrics.csv paths")
    _add_out(p, required=True)
    p.set_defaults(func=cmd_export_plots)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
