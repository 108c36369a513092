"""A small end-to-end run of the train / deploy / takeover / retrain loop.

Scaled down so it finishes in a couple of minutes: collect initial demos,
train nested-subset policies, harvest rescuer takeovers with the weakest,
retrain on the union, evaluate everything on paired seeds and print the
results table, length statistics and distance-report locations.

At this miniature scale the grams are noisy; the acceptance suite
(tests/test_acceptance.py, criterion 3) runs the properly sized protocol
where the takeover-trained policy reliably matches or beats the
equal-size initial-only baseline.
"""

import json
import tempfile
import time

from scooplab import ExperimentPlan, TrainConfig, run_full_protocol
from scooplab.env import EnvConfig
from scooplab.scripted import RescuerConfig


def main():
    plan = ExperimentPlan(
        initial_count=12,
        subset_sizes=(6, 12),
        takeover_rounds=1,
        takeovers_per_round=6,
        eval_trials=3,
        seed=0,
        env=EnvConfig(trial_ticks=300),
        train=TrainConfig(epochs=120, batch=64),
        rescuer=RescuerConfig(stuck_window=30),
        ood_initial_subsets=80,
        ood_max_frames=1500,
        trace_trial=0,
    )
    with tempfile.TemporaryDirectory() as td:
        t0 = time.time()
        result = run_full_protocol(plan, td)
        print(f"protocol finished in {time.time()-t0:.0f}s\n")

        print(f"{'policy':<10} {'demos':>5} {'mean g':>8} {'std g':>7}")
        for row in result.eval.rows.values():
            print(f"{row.label:<10} {row.n_demos:>5} {row.mean:>8.2f} {row.std:>7.2f}")
        for key, pct in result.improvements.items():
            print(f"improvement {key}: {pct:+.0f}%")
        for key, pct in result.reductions.items():
            print(f"demonstration time {key}: {pct:.0f}% shorter")
        rr = result.takeover_rounds["a"]
        print(f"takeover round a: {len(rr.demo_ids)} demos from "
              f"{rr.rollouts_used} rollouts (exhausted={rr.exhausted})")

        summary = json.loads(result.summary_path.read_text())
        print(f"\nartifacts under {result.out_dir}:")
        for name in ("evaluation.csv", "trials.csv", "length_stats.csv",
                     "violins.csv", "traces.csv", "summary.json"):
            print(f"  results/{name}")
        print(f"  policies: {list(summary['policies'])}")


if __name__ == "__main__":
    main()
