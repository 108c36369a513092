"""Experiment pipeline: demo collection, rollouts, evaluation, full protocol.

The full protocol mirrors the iterative loop the rest of the package exists
for: collect initial demonstrations with varied bowl placements, train
policies on nested subsets, deploy the weakest one with the rescuer attached
to harvest takeover demonstrations, retrain on the combined data, repeat,
then evaluate everything on paired seeds and emit result/length/distance
tables as CSV.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .datasets import (DatasetView, DemoStore, LengthStats, length_stats,
                       reduction_percent, union)
from .env import EnvConfig, EnvObservation, GranularEnv
from .errors import ConfigError, StageError
from .ood import (DistanceTrace, Monitor, cross_distance_matrix,
                  write_distance_csv)
from .policy import (PolicyParams, PolicySpec, RecedingController, TrainConfig,
                     encode_windows, save_policy, train)
from .scripted import ExpertConfig, ExpertController, Rescuer, RescuerConfig
from .takeover import (DEFAULT_K_PRE, Demonstration, TakeoverController,
                       TakeoverEnded, record_initial)

__all__ = [
    "ObservationLog",
    "RolloutResult",
    "RtotRoundResult",
    "EvalRow",
    "EvalResult",
    "ExperimentPlan",
    "ProtocolResult",
    "collect_initial",
    "rollout",
    "run_trial",
    "run_rtot_round",
    "evaluate",
    "improvement_percent",
    "encode_demos",
    "encode_log",
    "trace_for_log",
    "run_full_protocol",
]


# -- observation logging ------------------------------------------------------

@dataclass(frozen=True)
class ObservationLog:
    """Compact per-tick record of what the policy saw during one rollout."""

    images: np.ndarray  # (T, H, W) uint8
    poses: np.ndarray   # (T, 4) float32

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_observations(cls, observations: Sequence[EnvObservation]) -> "ObservationLog":
        images = np.stack([
            np.round(np.asarray(o.image, dtype=np.float32) * 255.0).astype(np.uint8)
            for o in observations])
        poses = np.stack([np.asarray(o.pose, dtype=np.float32) for o in observations])
        return cls(images=images, poses=poses)

    def window_arrays(self):
        """(T, 2, H, W) float images and (T, 2, 4) poses, oldest first."""
        t = len(self.images)
        prev = np.maximum(np.arange(t) - 1, 0)
        pair = np.stack([prev, np.arange(t)], axis=1)
        images = self.images[pair].astype(np.float32) / 255.0
        poses = self.poses[pair]
        return images, poses


def encode_log(params: PolicyParams, log: ObservationLog,
               batch: int = 512) -> np.ndarray:
    images, poses = log.window_arrays()
    out = []
    for lo in range(0, len(images), batch):
        out.append(encode_windows(params, images[lo:lo + batch], poses[lo:lo + batch]))
    return np.concatenate(out, axis=0)


def encode_demos(params: PolicyParams, demos) -> np.ndarray:
    """Embeddings of every step window of every demonstration."""
    chunks = []
    for demo in demos:
        log = ObservationLog.from_observations([s.observation for s in demo.steps])
        chunks.append(encode_log(params, log))
    return np.concatenate(chunks, axis=0)


def trace_for_log(monitor: Monitor, params: PolicyParams, log: ObservationLog,
                  trial_id: str = "", reference: str = "") -> DistanceTrace:
    values = monitor.distance(encode_log(params, log))
    return DistanceTrace(
        trial_id=trial_id, ticks=np.arange(len(values)), values=values,
        reference=reference)


# -- demo collection ----------------------------------------------------------

def collect_initial(
    env: GranularEnv,
    n: int,
    base_seed: int,
    store: DemoStore,
    expert_config: Optional[ExpertConfig] = None,
    id_prefix: str = "I",
) -> list[str]:
    """Records n single-cycle expert demonstrations with varied bowls."""
    expert = ExpertController(env.config, expert_config)
    ids = []
    for i in range(n):
        seed = base_seed + i
        state, obs = env.reset(seed)
        expert.reset()
        session = []
        for _ in range(env.config.trial_ticks):
            action, done = expert.act(state)
            session.append((obs, action, True))
            state, obs = env.step(state, action)
            if done:
                break
        demo = record_initial(
            session,
            demo_id=f"{id_prefix}{i:04d}",
            metadata={
                "seed": seed,
                "trial_id": f"{id_prefix.lower()}init-{i}",
                "tick_hz": env.config.tick_hz,
                "wall_ticks": len(session),
                "image_size": list(env.config.image_size),
            },
        )
        store.save(demo)
        ids.append(demo.id)
    return ids


# -- rollouts -------------------------------------------------------------------

@dataclass
class RolloutResult:
    seed: int
    grams: float
    ticks: int
    final_state: object
    demonstrations: tuple
    log: Optional[ObservationLog]
    trigger_count: int = 0


def rollout(
    env: GranularEnv,
    params: PolicyParams,
    seed: int,
    *,
    rescuer: Optional[Rescuer] = None,
    store: Optional[DemoStore] = None,
    k_pre: int = DEFAULT_K_PRE,
    demo_id_fn=None,
    demo_metadata: Optional[dict] = None,
    record_observations: bool = False,
    max_ticks: Optional[int] = None,
    stop_after_demos: Optional[int] = None,
) -> RolloutResult:
    """Receding-horizon policy rollout, optionally supervised by a rescuer.

    One executed action per tick. The takeover controller owns the ring
    buffer; finished takeover demonstrations are saved as they complete.
    """
    state, obs = env.reset(seed)
    controller = RecedingController(params, seed=seed)
    takeover = TakeoverController(
        k_pre, demo_id_fn=demo_id_fn,
        demo_metadata={
            "seed": seed,
            "tick_hz": env.config.tick_hz,
            "image_size": list(env.config.image_size),
            **(demo_metadata or {}),
        })
    demos = []
    observations = [] if record_observations else None
    ticks = max_ticks if max_ticks is not None else env.config.trial_ticks
    prev_held = False
    executed_ticks = 0

    def keep(demo: Demonstration):
        demos.append(demo)
        if store is not None:
            store.save(demo)

    stopped_early = False
    for t in range(ticks):
        held = rescuer.holding if rescuer is not None else False
        if prev_held and not held:
            controller.reset()  # fresh plan on the first post-takeover tick
        if record_observations:
            observations.append(obs)
        if held:
            controller.observe_only(obs)
            policy_action = None
            operator_action = rescuer.act(state)
        else:
            policy_action = controller.act(obs)
            operator_action = None
        result = takeover.on_tick(
            t, obs, policy_action, operator_action, trigger_held=held)
        state, obs = env.step(state, result.executed)
        executed_ticks = t + 1
        speed = math.hypot(result.executed.vx, result.executed.vy) * env.config.max_speed
        if rescuer is not None:
            rescuer.observe(state, speed)
        prev_held = held
        for ev in result.events:
            if isinstance(ev, TakeoverEnded) and ev.demonstration is not None:
                keep(ev.demonstration)
                if stop_after_demos is not None and len(demos) >= stop_after_demos:
                    stopped_early = True
        if stopped_early:
            break
    if not stopped_early:
        end = takeover.finish(ticks)
        if end is not None and end.demonstration is not None:
            keep(end.demonstration)

    return RolloutResult(
        seed=seed,
        grams=env.score(state),
        ticks=executed_ticks,
        final_state=state,
        demonstrations=tuple(demos),
        log=ObservationLog.from_observations(observations) if record_observations else None,
        trigger_count=rescuer.trigger_count if rescuer is not None else 0,
    )


def run_trial(env: GranularEnv, params: PolicyParams, seed: int,
              record_observations: bool = False) -> RolloutResult:
    """One unsupervised evaluation trial; returns grams in the target bowl."""
    return rollout(env, params, seed, record_observations=record_observations)


@dataclass
class RtotRoundResult:
    demo_ids: list
    rollouts_used: int
    exhausted: bool
    rollout_seeds: list


def run_rtot_round(
    env: GranularEnv,
    params: PolicyParams,
    n_takeovers: int,
    base_seed: int,
    store: DemoStore,
    *,
    rescuer_config: Optional[RescuerConfig] = None,
    expert_config: Optional[ExpertConfig] = None,
    budget_rollouts: Optional[int] = None,
    k_pre: int = DEFAULT_K_PRE,
    round_label: str = "a",
    policy_id: str = "",
    demos_per_rollout: int = 2,
) -> RtotRoundResult:
    """Deploys the policy with the rescuer until n takeover demos exist.

    Each rollout reseeds the environment, so capping the demos taken per
    rollout spreads the round over many bowl placements the way the
    collection protocol varies them. Returns with `exhausted=True` instead
    of raising when the rollout budget runs out before enough interventions
    happened; an adequate policy simply gives the rescuer nothing to do.
    """
    rescuer_config = rescuer_config or RescuerConfig()
    rescuer_config.validate(params.spec.act_horizon)
    budget = budget_rollouts if budget_rollouts is not None else max(20, 3 * n_takeovers)
    counter = {"n": 0}

    def next_id():
        counter["n"] += 1
        return f"T{round_label}{counter['n']:04d}"

    demo_ids: list[str] = []
    seeds = []
    rollouts_used = 0
    while len(demo_ids) < n_takeovers and rollouts_used < budget:
        seed = base_seed + rollouts_used
        rescuer = Rescuer(env.config, rescuer_config, expert_config)
        result = rollout(
            env, params, seed,
            rescuer=rescuer,
            store=store,
            k_pre=k_pre,
            demo_id_fn=next_id,
            demo_metadata={"policy_id": policy_id,
                           "trial_id": f"rtot-{round_label}-{rollouts_used}"},
            stop_after_demos=min(demos_per_rollout, n_takeovers - len(demo_ids)),
        )
        demo_ids.extend(d.id for d in result.demonstrations)
        seeds.append(seed)
        rollouts_used += 1
    return RtotRoundResult(
        demo_ids=demo_ids,
        rollouts_used=rollouts_used,
        exhausted=len(demo_ids) < n_takeovers,
        rollout_seeds=seeds,
    )


# -- evaluation -----------------------------------------------------------------

@dataclass
class EvalRow:
    label: str
    n_demos: Optional[int]
    grams: list
    mean: float
    std: float


@dataclass
class EvalResult:
    rows: dict            # label -> EvalRow
    seeds: list
    logs: dict            # (label, trial_index) -> ObservationLog, when recorded

    def table(self) -> list[tuple]:
        return [(r.label, r.n_demos, r.mean, r.std) for r in self.rows.values()]


def evaluate(
    env: GranularEnv,
    policies: Mapping[str, PolicyParams],
    n_trials: int,
    base_seed: int,
    record_observations: bool = False,
    n_demos: Optional[Mapping[str, int]] = None,
) -> EvalResult:
    """Paired-seed trials for every policy; mean and std of grams scooped."""
    if not policies:
        raise ConfigError("evaluate needs at least one policy")
    seeds = [base_seed + i for i in range(n_trials)]
    rows = {}
    logs = {}
    for label, params in policies.items():
        grams = []
        for i, seed in enumerate(seeds):
            result = run_trial(env, params, seed,
                               record_observations=record_observations)
            grams.append(result.grams)
            if record_observations:
                logs[(label, i)] = result.log
        rows[label] = EvalRow(
            label=label,
            n_demos=(n_demos or {}).get(label),
            grams=grams,
            mean=float(np.mean(grams)),
            std=float(np.std(grams)),
        )
    return EvalResult(rows=rows, seeds=seeds, logs=logs)


def improvement_percent(a: float, b: float) -> float:
    """How much better a is than b, in percent of b."""
    if b == 0:
        raise ZeroDivisionError("reference mean is zero")
    return 100.0 * (a / b - 1.0)


# -- the full protocol ------------------------------------------------------------

@dataclass
class ExperimentPlan:
    """Counts, seeds and configuration for one end-to-end run."""

    initial_count: int = 60
    subset_sizes: tuple = (20, 40, 60)
    takeover_rounds: int = 2
    takeovers_per_round: int = 20
    eval_trials: int = 10
    seed: int = 0
    k_pre: int = DEFAULT_K_PRE
    rollout_budget: Optional[int] = None
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicySpec = field(default_factory=PolicySpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    rescuer: RescuerConfig = field(default_factory=RescuerConfig)
    ood_initial_subsets: int = 200
    ood_max_frames: Optional[int] = 4000
    ood_percentile: float = 95.0
    ood_components: Optional[int] = 10
    trace_trial: int = 3

    def __post_init__(self):
        self.subset_sizes = tuple(int(n) for n in self.subset_sizes)
        if not self.subset_sizes:
            raise ConfigError("subset_sizes must not be empty")
        if any(n > self.initial_count for n in self.subset_sizes):
            raise ConfigError("every subset size must be <= initial_count")
        if sorted(self.subset_sizes) != list(self.subset_sizes):
            raise ConfigError("subset_sizes must be non-decreasing")
        if self.takeover_rounds < 0 or self.takeovers_per_round <= 0:
            raise ConfigError("takeover counts must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        data = dict(data)
        nested = {
            "env": EnvConfig.from_dict,
            "policy": lambda d: PolicySpec(**d),
            "train": lambda d: TrainConfig(**d),
            "expert": lambda d: ExpertConfig(**d),
            "rescuer": lambda d: RescuerConfig(**d),
        }
        kwargs = {}
        for key, value in data.items():
            if key in nested:
                kwargs[key] = nested[key](value)
            elif key in cls.__dataclass_fields__:
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown plan key {key!r}")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentPlan":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read plan {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["env"] = self.env.to_dict()
        data["subset_sizes"] = list(self.subset_sizes)
        data["policy"]["image_size"] = list(self.policy.image_size)
        return data


@dataclass
class ProtocolResult:
    out_dir: Path
    dataset_labels: list
    policy_paths: dict       # label -> Path
    policies: dict           # label -> PolicyParams
    eval: EvalResult
    improvements: dict
    length: dict             # label -> LengthStats
    reductions: dict
    takeover_rounds: dict    # round letter -> RtotRoundResult
    summary_path: Path


def _stage(name, fn):
    try:
        return fn()
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _write_eval_csv(path: Path, result: EvalResult) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "n_demos", "mean_g", "std_g"])
        for row in result.rows.values():
            w.writerow([row.label, row.n_demos, f"{row.mean:.6f}", f"{row.std:.6f}"])


def _write_trials_csv(path: Path, result: EvalResult) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "trial", "seed", "grams"])
        for row in result.rows.values():
            for i, (seed, grams) in enumerate(zip(result.seeds, row.grams)):
                w.writerow([row.label, i, seed, f"{grams:.6f}"])


def _write_length_csv(path: Path, stats: Mapping[str, LengthStats]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "demo_index", "duration_s", "mean_s", "total_s"])
        for label, ls in stats.items():
            for i, dur in enumerate(ls.durations):
                w.writerow([label, i, f"{dur:.6f}", f"{ls.mean:.6f}", f"{ls.total:.6f}"])


def run_full_protocol(plan: ExperimentPlan, out_dir) -> ProtocolResult:
    """Executes the whole ladder and writes every artifact under out_dir."""
    out = Path(out_dir)
    (out / "datasets").mkdir(parents=True, exist_ok=True)
    (out / "policies").mkdir(parents=True, exist_ok=True)
    (out / "results").mkdir(parents=True, exist_ok=True)
    (out / "monitors").mkdir(parents=True, exist_ok=True)
    env = GranularEnv(plan.env)
    t_start = time.time()
    (out / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2) + "\n")

    # 1) initial demonstrations
    def collect():
        store = DemoStore(out / "datasets" / "initial", dataset_id="initial")
        if len(store) < plan.initial_count:
            collect_initial(env, plan.initial_count - len(store),
                            plan.seed + len(store), store,
                            expert_config=plan.expert)
        return store
    initial_store = _stage("collect-initial", collect)

    views: dict[str, DatasetView] = {}
    for n in plan.subset_sizes:
        views[f"init{n}"] = initial_store.view().subset_first_n(n, label=f"init{n}")

    # 2) train the initial-subset policies
    policies: dict[str, PolicyParams] = {}
    policy_paths: dict[str, Path] = {}

    def train_and_save(label: str, view: DatasetView, train_seed: int):
        def fit():
            hyper = TrainConfig(
                epochs=plan.train.epochs, batch=plan.train.batch,
                learning_rate=plan.train.learning_rate, seed=train_seed)
            params, _curve = train(view, hyper, plan.policy, dataset_id=view.label)
            params.meta["label"] = label
            return params, save_policy(params, out / "policies" / label)
        policies[label], policy_paths[label] = _stage(f"train-{label}", fit)

    for i, n in enumerate(plan.subset_sizes):
        train_and_save(f"init{n}", views[f"init{n}"], plan.seed + 100 + i)

    # 3) takeover rounds on the growing combined dataset
    smallest = plan.subset_sizes[0]
    current_label = f"init{smallest}"
    combined_views = [views[f"init{smallest}"]]
    rounds: dict[str, RtotRoundResult] = {}
    for r in range(plan.takeover_rounds):
        letter = chr(ord("a") + r)

        def run_round(letter=letter, current_label=current_label, r=r):
            t_store = DemoStore(out / "datasets" / f"takeover_{letter}",
                                dataset_id=f"takeover_{letter}")
            rr = run_rtot_round(
                env, policies[current_label], plan.takeovers_per_round,
                plan.seed + 1000 * (r + 1), t_store,
                rescuer_config=plan.rescuer, expert_config=plan.expert,
                budget_rollouts=plan.rollout_budget, k_pre=plan.k_pre,
                round_label=letter, policy_id=current_label)
            return t_store, rr

        t_store, rr = _stage(f"takeover-round-{letter}", run_round)
        rounds[letter] = rr
        combined_views.append(t_store.view())
        combo_label = f"combo_{letter}"
        views[combo_label] = union(*combined_views, label=combo_label)
        train_and_save(combo_label, views[combo_label], plan.seed + 200 + r)
        current_label = combo_label

    # 4) paired-seed evaluation of every policy
    eval_result = _stage("evaluate", lambda: evaluate(
        env, policies, plan.eval_trials, plan.seed + 9000,
        record_observations=True,
        n_demos={label: len(views[label]) for label in policies}))

    improvements = {}
    for r in range(plan.takeover_rounds):
        if r + 1 < len(plan.subset_sizes):
            combo = f"combo_{chr(ord('a') + r)}"
            ref = f"init{plan.subset_sizes[r + 1]}"
            if combo in eval_result.rows and eval_result.rows[ref].mean > 0:
                improvements[f"{combo}_vs_{ref}"] = improvement_percent(
                    eval_result.rows[combo].mean, eval_result.rows[ref].mean)

    _write_eval_csv(out / "results" / "evaluation.csv", eval_result)
    _write_trials_csv(out / "results" / "trials.csv", eval_result)

    # 5) demonstration-length statistics
    def lengths():
        stats = {label: length_stats(view) for label, view in views.items()}
        _write_length_csv(out / "results" / "length_stats.csv", stats)
        return stats
    length_result = _stage("length-stats", lengths)

    reductions = {}
    for r in range(plan.takeover_rounds):
        if r + 1 < len(plan.subset_sizes):
            combo = f"combo_{chr(ord('a') + r)}"
            ref = f"init{plan.subset_sizes[r + 1]}"
            reductions[f"{combo}_vs_{ref}"] = reduction_percent(
                length_result[combo], length_result[ref])

    # 6) cross model x dataset distance analysis over the recorded trials
    def ood_report():
        logs = eval_result.logs
        all_logs = [logs[key] for key in sorted(logs.keys())]

        def encode(params, data):
            if isinstance(data, list):  # experiments: list of rollout logs
                return np.concatenate([encode_log(params, lg) for lg in data], axis=0)
            return encode_demos(params, data)

        entries = cross_distance_matrix(
            policies, {label: views[label] for label in policies}, all_logs, encode,
            n_initial_subsets=plan.ood_initial_subsets,
            max_frames=plan.ood_max_frames,
            percentile=plan.ood_percentile,
            n_components=plan.ood_components,
            seed=plan.seed,
        )
        violin_rows = []
        for label, entry in entries.items():
            entry.monitor.save(out / "monitors" / f"{label}.npz")
            violin_rows.extend(
                (label, i, v) for i, v in enumerate(entry.distances))
        violins = out / "results" / "violins.csv"
        write_distance_csv(violins, violin_rows)

        # per-tick traces of one shared recorded trial under every monitor
        trial = min(plan.trace_trial, plan.eval_trials - 1)
        base_label = next(iter(policies))
        shared_log = logs[(base_label, trial)]
        trace_rows = []
        for label, entry in entries.items():
            trace = trace_for_log(entry.monitor, policies[label], shared_log,
                                  trial_id=f"trial-{trial}", reference=label)
            trace_rows.extend(
                (label, int(t), v) for t, v in zip(trace.ticks, trace.values))
        traces = out / "results" / "traces.csv"
        write_distance_csv(traces, trace_rows)
        return {"violins": violins, "traces": traces}

    ood_paths = _stage("ood-report", ood_report)

    summary = {
        "elapsed_s": time.time() - t_start,
        "datasets": {label: len(view) for label, view in views.items()},
        "policies": {label: str(path) for label, path in policy_paths.items()},
        "evaluation": {
            row.label: {"n_demos": row.n_demos, "mean_g": row.mean,
                        "std_g": row.std, "grams": row.grams}
            for row in eval_result.rows.values()},
        "improvements_pct": improvements,
        "length_reductions_pct": reductions,
        "takeover_rounds": {
            letter: {"demos": len(rr.demo_ids), "rollouts": rr.rollouts_used,
                     "exhausted": rr.exhausted}
            for letter, rr in rounds.items()},
        "ood_outputs": {k: str(v) for k, v in ood_paths.items()},
    }
    summary_path = out / "results" / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")

    return ProtocolResult(
        out_dir=out,
        dataset_labels=sorted(views),
        policy_paths=policy_paths,
        policies=policies,
        eval=eval_result,
        improvements=improvements,
        length=length_result,
        reductions=reductions,
        takeover_rounds=rounds,
        summary_path=summary_path,
    )
