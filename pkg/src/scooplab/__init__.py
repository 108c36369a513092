"""Desk-scale operator-takeover imitation learning lab.

Subpackages by concern:

- `env`: deterministic 2-D granular-transfer simulation
- `policy`: small visuomotor diffusion policy (encoder, DDPM, controller)
- `takeover`: control handoff state machine, ring buffer, demo recording
- `datasets`: demonstration persistence, views, length statistics
- `ood`: FastMCD robust covariance, Mahalanobis distances, flagging
- `scripted`: headless expert and rescuer
- `harness`: rollouts, evaluation, the full train/deploy/takeover loop
- `gateway`: live WebSocket control and telemetry service
"""

from .env import EnvAction, EnvConfig, EnvObservation, EnvState, GranularEnv
from .takeover import (ControlMode, DemoStep, Demonstration, RingBuffer,
                       StepSource, TakeoverController, finalize_takeover,
                       record_initial)
from .datasets import (DatasetView, DemoStore, LengthStats, length_stats,
                       reduction_percent, union)
from .ood import (DistanceTrace, EmbeddingSet, Monitor, RobustGaussian,
                  cross_distance_matrix, fit_mcd, fit_monitor, flag_ood,
                  mahalanobis)
from .policy import (NoiseSchedule, PolicyParams, PolicySpec, RecedingController,
                     TrainConfig, encode_observation, load_policy,
                     sample_action_chunk, save_policy, train)
from .scripted import ExpertConfig, ExpertController, Rescuer, RescuerConfig
from .harness import (ExperimentPlan, collect_initial, evaluate,
                      improvement_percent, rollout, run_full_protocol,
                      run_rtot_round, run_trial)

__version__ = "0.1.0"
