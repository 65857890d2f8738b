"""Dig into a finished training run directory.

Points at the output of train_small.py or `voxelforge train` and
answers three questions: how did the reward curve move, how much of
what the policy deposited survived into the final body, and did the
critic end up able to predict episode outcomes. Multi-seed run roots
and single seed_N directories both work.
"""

import argparse
from pathlib import Path

import numpy as np

from voxelforge import harness, nets


def trial_dirs(root):
    subdirs = sorted(d for d in root.iterdir()
                     if d.is_dir() and (d / "metrics.csv").is_file())
    return subdirs if subdirs else [root]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("run", help="run directory with metrics.csv inside")
    parser.add_argument("--summary", help="write a cross-trial summary CSV")
    args = parser.parse_args()

    root = Path(args.run)
    trials = trial_dirs(root)
    histories = [harness.read_metrics_csv(d / "metrics.csv") for d in trials]
    for trial, history in zip(trials, histories):
        first, last = history[0], history[-1]
        print(f"{trial.name}: reward {first['mean_reward']:.2f} -> "
              f"{last['mean_reward']:.2f}, volume {first['mean_volume']:.1f} "
              f"-> {last['mean_volume']:.1f} over {len(history)} epochs")

    # saved design episodes tell us how efficient the final policies are
    records = harness.load_episode_records(root)
    if records:
        last_epoch = max(r.epoch for r in records)
        finals = [r for r in records if r.epoch == last_epoch]
        eff = [harness.action_efficiency(r.task, r.actions) for r in finals]
        print(f"\n{len(finals)} episodes at epoch {last_epoch}: "
              f"action efficiency {np.mean(eff):.3f} "
              f"(min {min(eff):.3f}, max {max(eff):.3f})")

    # did the critic learn anything a fresh network does not know?
    for trial in trials:
        final = trial / "checkpoints" / "final.vxc"
        first = trial / "checkpoints" / "epoch_0000.vxc"
        if not (records and final.is_file() and first.is_file()):
            continue
        report = harness.critic_report(
            nets.load_vxc(final), nets.load_vxc(first), records, trial.name
        )
        print(f"{trial.name}: critic mse {report.in_mse_trained:.2f} trained "
              f"vs {report.in_mse_untrained:.2f} untrained "
              f"(p {report.p_value:.2g}, {report.n_in} episodes)")

    if args.summary:
        summary = harness.summarize_trials(histories)
        harness.write_summary_csv(args.summary, summary)
        print(f"\nper-epoch summary written to {args.summary}")


if __name__ == "__main__":
    main()
