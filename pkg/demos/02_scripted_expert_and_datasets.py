"""Scripted expert demonstrations and the dataset machinery.

Collects a handful of single-cycle demonstrations with varied bowl
placements, shows the on-disk format, and reproduces the kind of
length-statistics comparisons the experiment reports use.
"""

import tempfile
from pathlib import Path

from scooplab import EnvConfig, GranularEnv, length_stats, reduction_percent
from scooplab.datasets import DemoStore
from scooplab.harness import collect_initial


def main():
    env = GranularEnv(EnvConfig())
    with tempfile.TemporaryDirectory() as td:
        store = DemoStore(Path(td) / "initial", dataset_id="initial")
        ids = collect_initial(env, 6, base_seed=0, store=store)
        print(f"collected {len(ids)} expert demos: {ids}")

        stats = length_stats(store.view())
        print(f"durations (s): {[round(d, 1) for d in stats.durations]}")
        print(f"mean {stats.mean:.2f}s  total {stats.total:.1f}s")

        demo = store.load(ids[0])
        print(f"\ndemo {demo.id}: {len(demo.steps)} steps, kind={demo.kind}, "
              f"metadata={demo.metadata}")
        text = (Path(td) / "initial" / f"{ids[0]}.jsonl").read_text()
        header, first_step = text.split("\n")[:2]
        print("file header:", header[:100], "...")
        print("first step: ", first_step[:100], "...")

        # the "first N" subsets the experiment ladder trains on
        view = store.view()
        first3 = view.subset_first_n(3, label="first3")
        print(f"\nfirst-3 subset: {first3.ids()}")
        short = length_stats(first3)
        print(f"reduction of first-3 vs all: "
              f"{reduction_percent(short, stats):.1f}% shorter in total time")


if __name__ == "__main__":
    main()
