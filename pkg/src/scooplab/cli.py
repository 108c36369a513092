"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .datasets import DemoStore, length_stats, union
from .env import EnvConfig, GranularEnv
from .errors import ConfigError, ScooplabError, StageError
from .gateway import GatewayConfig, TelemetryMonitor, serve_forever
from .harness import (ExperimentPlan, collect_initial, encode_demos, encode_log,
                      evaluate, improvement_percent, run_full_protocol,
                      run_rtot_round, ObservationLog)
from .ood import Monitor, cross_distance_matrix, write_distance_csv
from .policy import TrainConfig, load_policy, save_policy, train
from .scripted import ExpertConfig, RescuerConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _env_from_args(args) -> GranularEnv:
    cfg = EnvConfig.from_file(args.env_config) if args.env_config else EnvConfig()
    return GranularEnv(cfg)


def _add_env_arg(p):
    p.add_argument("--env-config", help="JSON file with EnvConfig keys")


def cmd_collect_initial(args) -> int:
    env = _env_from_args(args)
    store = DemoStore(args.store)
    ids = collect_initial(env, args.n, args.seed, store,
                          expert_config=ExpertConfig(),
                          id_prefix=args.id_prefix)
    stats = length_stats(store.view())
    print(f"collected {len(ids)} demos into {args.store} "
          f"(mean {stats.mean:.2f}s, total {stats.total:.1f}s)")
    return EXIT_OK


def cmd_train(args) -> int:
    views = []
    for root in args.dataset:
        view = DemoStore(root).view()
        if args.first_n is not None:
            view = view.subset_first_n(args.first_n)
        views.append(view)
    view = views[0] if len(views) == 1 else union(*views)
    hyper = TrainConfig(epochs=args.epochs, batch=args.batch,
                        learning_rate=args.learning_rate, seed=args.seed)
    params, curve = train(view, hyper, dataset_id=view.label)
    path = save_policy(params, args.out)
    loss = f"final loss {curve[-1]:.4f}" if curve else "untrained (0 epochs)"
    print(f"trained on {len(view)} demos ({params.meta['n_pairs']} pairs), "
          f"{loss} -> {path}")
    return EXIT_OK


def cmd_rtot_round(args) -> int:
    env = _env_from_args(args)
    params = load_policy(args.policy)
    store = DemoStore(args.out_store)
    result = run_rtot_round(
        env, params, args.n, args.seed, store,
        rescuer_config=RescuerConfig(),
        budget_rollouts=args.budget,
        round_label=args.label,
        policy_id=Path(args.policy).stem,
    )
    if result.exhausted:
        print(f"budget exhausted after {result.rollouts_used} rollouts: "
              f"collected {len(result.demo_ids)}/{args.n} takeover demos "
              "(the policy may already be adequate)")
    else:
        print(f"collected {len(result.demo_ids)} takeover demos in "
              f"{result.rollouts_used} rollouts -> {args.out_store}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    env = _env_from_args(args)
    policies = {Path(p).stem: load_policy(p) for p in args.policies}
    result = evaluate(env, policies, args.trials, args.seed)
    print(f"{'policy':<20} {'mean_g':>8} {'std_g':>8}")
    for row in result.rows.values():
        print(f"{row.label:<20} {row.mean:>8.2f} {row.std:>8.2f}")
    for pair in args.pair or []:
        a, b = pair.split(":")
        if a not in result.rows or b not in result.rows:
            raise ConfigError(f"--pair {pair}: unknown policy label")
        if result.rows[b].mean == 0:
            print(f"improvement {a} over {b}: n/a (reference mean is zero)")
        else:
            pct = improvement_percent(result.rows[a].mean, result.rows[b].mean)
            print(f"improvement {a} over {b}: {pct:.0f}%")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("policy,mean_g,std_g\n")
            for row in result.rows.values():
                fh.write(f"{row.label},{row.mean:.6f},{row.std:.6f}\n")
    return EXIT_OK


def cmd_protocol(args) -> int:
    plan = ExperimentPlan.from_file(args.plan)
    result = run_full_protocol(plan, args.out)
    print(f"protocol complete; artifacts under {result.out_dir}")
    for row in result.eval.rows.values():
        print(f"  {row.label:<12} n={row.n_demos:<4} "
              f"mean={row.mean:.2f}g std={row.std:.2f}g")
    for key, pct in result.improvements.items():
        print(f"  improvement {key}: {pct:.0f}%")
    return EXIT_OK


def cmd_ood_report(args) -> int:
    if len(args.models) != len(args.datasets):
        raise ConfigError("need one --models entry per --datasets entry")
    models = {}
    datasets = {}
    for policy_path, store_root in zip(args.models, args.datasets):
        label = Path(policy_path).stem
        models[label] = load_policy(policy_path)
        datasets[label] = DemoStore(store_root).view()
    experiment_demos = []
    for root in args.experiments:
        experiment_demos.extend(DemoStore(root).view())

    entries = cross_distance_matrix(
        models, datasets, experiment_demos, encode_demos,
        n_initial_subsets=args.subsets, max_frames=args.max_frames,
        percentile=args.percentile,
        n_components=args.components if args.components > 0 else None,
        seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, entry in entries.items():
        entry.monitor.save(out / f"monitor_{label}.npz")
        rows.extend((label, i, v) for i, v in enumerate(entry.distances))
    write_distance_csv(out / "violins.csv", rows)

    # per-tick trace of the first experiment demo under every monitor
    if experiment_demos:
        first = experiment_demos[0]
        log = ObservationLog.from_observations(
            [s.observation for s in first.steps])
        trace_rows = []
        for label, entry in entries.items():
            values = entry.monitor.distance(encode_log(models[label], log))
            trace_rows.extend((label, t, v) for t, v in enumerate(values))
        write_distance_csv(out / "traces.csv", trace_rows)
    print(f"distance report written to {out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    config = GatewayConfig.from_file(args.config) if args.config else GatewayConfig()
    telemetry = None
    if args.monitor:
        if not args.monitor_policy:
            raise ConfigError("--monitor requires --monitor-policy")
        telemetry = TelemetryMonitor(
            monitor=Monitor.load(args.monitor),
            params=load_policy(args.monitor_policy))
    serve_forever(config, telemetry)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scooplab",
        description="Desk-scale operator-takeover imitation learning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect-initial", help="record scripted expert demos")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--store", default="stores/initial")
    p.add_argument("--id-prefix", default="I")
    _add_env_arg(p)
    p.set_defaults(fn=cmd_collect_initial)

    p = sub.add_parser("train", help="train a diffusion policy on a dataset")
    p.add_argument("--dataset", action="append", required=True,
                   help="demo store directory (repeat to union)")
    p.add_argument("--out", required=True)
    p.add_argument("--first-n", type=int)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch", type=int, default=TrainConfig.batch)
    p.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("rtot-round", help="collect takeover demos with the rescuer")
    p.add_argument("--policy", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-store", default="stores/takeover")
    p.add_argument("--budget", type=int)
    p.add_argument("--label", default="a")
    _add_env_arg(p)
    p.set_defaults(fn=cmd_rtot_round)

    p = sub.add_parser("evaluate", help="paired-seed trials for trained policies")
    p.add_argument("--policies", nargs="+", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=9000)
    p.add_argument("--pair", action="append",
                   help="A:B reports improvement of policy A over B")
    p.add_argument("--csv")
    _add_env_arg(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("protocol", help="run the full takeover protocol")
    p.add_argument("--plan", required=True, help="JSON ExperimentPlan")
    p.add_argument("--out", default="protocol-out")
    p.set_defaults(fn=cmd_protocol)

    p = sub.add_parser("ood-report", help="cross model x dataset distance report")
    p.add_argument("--models", nargs="+", required=True, help="policy files")
    p.add_argument("--datasets", nargs="+", required=True, help="demo stores")
    p.add_argument("--experiments", nargs="+", required=True,
                   help="demo stores holding experiment observations")
    p.add_argument("--out", default="ood-out")
    p.add_argument("--subsets", type=int, default=200)
    p.add_argument("--max-frames", type=int, default=4000)
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--components", type=int, default=10,
                   help="principal components for the robust fit (0 = raw space)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_ood_report)

    p = sub.add_parser("serve", help="run the live gateway")
    p.add_argument("--config", help="JSON GatewayConfig")
    p.add_argument("--monitor", help="saved monitor .npz for live d_m telemetry")
    p.add_argument("--monitor-policy", help="policy whose encoder the monitor uses")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ScooplabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
