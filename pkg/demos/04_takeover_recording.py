"""The takeover protocol: ring buffer, seamless handoff, idle filtering.

Drives a weak policy with the scripted rescuer attached, then dissects the
recorded takeover demonstrations: the pre-intervention prefix, the operator
segment, and how idle periods never appear in initial recordings.
"""

import tempfile
from pathlib import Path

import numpy as np

from scooplab import EnvConfig, GranularEnv, TrainConfig, train
from scooplab.datasets import DemoStore
from scooplab.harness import collect_initial, rollout
from scooplab.scripted import Rescuer, RescuerConfig
from scooplab.takeover import record_initial


def main():
    env = GranularEnv(EnvConfig(trial_ticks=300))
    with tempfile.TemporaryDirectory() as td:
        seed_store = DemoStore(Path(td) / "seed", dataset_id="seed")
        collect_initial(env, 3, base_seed=0, store=seed_store)
        weak, _ = train(seed_store.view(), TrainConfig(epochs=2, seed=0))

        take_store = DemoStore(Path(td) / "takeovers", dataset_id="takeovers")
        rescuer = Rescuer(env.config, RescuerConfig(stuck_window=25))
        result = rollout(env, weak, seed=42, rescuer=rescuer, store=take_store,
                         demo_metadata={"policy_id": "weak"})
        print(f"rollout: {result.ticks} ticks, rescuer fired "
              f"{result.trigger_count}x, {len(result.demonstrations)} demos, "
              f"{result.grams:.1f} g scored")

        for demo in result.demonstrations:
            srcs = [s.source.value for s in demo.steps]
            print(f"\n{demo.id}: {len(demo.steps)} steps "
                  f"({demo.n_prefix} prefix + {demo.n_operator} operator)")
            print(f"  tick range {demo.steps[0].tick}..{demo.steps[-1].tick}, "
                  f"sources: {' '.join(s[:2] for s in srcs[:14])}...")
            # the prefix is the policy's own lead-up into trouble
            if demo.n_prefix:
                pre = demo.steps[0]
                print(f"  first prefix action (the failing policy's command): "
                      f"({pre.action.vx:+.2f}, {pre.action.vy:+.2f}, "
                      f"{pre.action.tilt_rate:+.2f})")

        # idle filtering for operator-recorded initial demos
        rng = np.random.default_rng(0)
        _, obs = env.reset(0)
        from scooplab import EnvAction
        session = [(obs, EnvAction(0.1, 0.0, 0.0), 10 <= t < 30 or 50 <= t < 60)
                   for t in range(80)]
        demo = record_initial(session, "idle-demo", {"tick_hz": 10})
        print(f"\n80-tick teleop session with two held stretches -> "
              f"{len(demo.steps)} recorded steps (idle ticks dropped, "
              f"re-indexed {demo.steps[0].tick}..{demo.steps[-1].tick})")


if __name__ == "__main__":
    main()
