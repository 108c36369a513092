"""Scripted expert and rescuer: reproducible stand-ins for the human.

The expert runs the canonical transfer cycle (approach source, dip and
scoop, raise, carry slowly, dump over the target, return home). The rescuer
watches a live rollout for manifest trouble (no progress for a while away
from home, carrying close to the spill speed, hugging the workspace edge),
seizes the trigger, drives one recovery cycle and releases.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

from .env import EnvAction, EnvConfig, EnvState
from .errors import ConfigError

__all__ = [
    "ExpertConfig",
    "ExpertController",
    "RescuerConfig",
    "Rescuer",
]


@dataclass(frozen=True)
class ExpertConfig:
    waypoint_tol: float = 0.25
    gain: float = 3.0               # proportional gain, 1/s
    carry_speed_frac: float = 0.85  # of v_spill while loaded
    dump_radius_frac: float = 0.4   # of target radius before tipping
    dwell_patience: int = 4         # ticks without pickup before giving up

    def __post_init__(self):
        if not 0 < self.carry_speed_frac < 1.0:
            raise ConfigError("carry_speed_frac must keep the expert below v_spill")


def _drive_toward(cfg: EnvConfig, state: EnvState, waypoint, gain: float,
                  speed_cap: float) -> tuple[float, float]:
    """Proportional velocity command toward a waypoint, norm-capped."""
    x, y, _ = state.spoon_pose
    ex, ey = waypoint[0] - x, waypoint[1] - y
    vx_w, vy_w = gain * ex, gain * ey
    norm = math.hypot(vx_w, vy_w)
    cap = min(speed_cap, cfg.max_speed)
    if norm > cap:
        vx_w *= cap / norm
        vy_w *= cap / norm
    return vx_w / cfg.max_speed, vy_w / cfg.max_speed


def _tilt_toward(current: float, target: float) -> float:
    delta = target - current
    return max(-1.0, min(1.0, delta))


class _Phase(enum.Enum):
    TO_SOURCE = "to_source"
    DIP = "dip"
    RAISE = "raise"
    CARRY = "carry"
    DUMP = "dump"
    LEVEL = "level"
    RETURN = "return"


class ExpertController:
    """Deterministic waypoint cycle; `act` also reports cycle completion."""

    def __init__(self, env_config: EnvConfig, config: Optional[ExpertConfig] = None):
        self.env_config = env_config
        self.config = config or ExpertConfig()
        self.phase = _Phase.TO_SOURCE
        self._dwell = 0
        self._last_carried = 0

    def reset(self) -> None:
        self.phase = _Phase.TO_SOURCE
        self._dwell = 0
        self._last_carried = 0

    def act(self, state: EnvState) -> tuple[EnvAction, bool]:
        cfg = self.env_config
        ex = self.config
        x, y, tilt = state.spoon_pose
        source_center = cfg.source_bowl.center()
        carry_cap = ex.carry_speed_frac * cfg.v_spill
        done = False
        vx = vy = 0.0
        tilt_rate = _tilt_toward(tilt, 0.0)

        if self.phase is _Phase.TO_SOURCE:
            if state.in_source == 0:
                self.phase = _Phase.RETURN
            else:
                vx, vy = _drive_toward(cfg, state, source_center, ex.gain, cfg.max_speed)
                near = math.hypot(x - source_center[0], y - source_center[1]) <= ex.waypoint_tol
                if near and cfg.source_bowl.contains(x, y):
                    self.phase = _Phase.DIP
                    self._dwell = 0
                    self._last_carried = state.carried
                    vx = vy = 0.0

        if self.phase is _Phase.DIP:
            vx = vy = 0.0
            tilt_rate = _tilt_toward(tilt, -1.0)
            if state.carried > self._last_carried:
                self._dwell = 0
                self._last_carried = state.carried
            elif tilt <= cfg.tilt_scoop:
                self._dwell += 1
            full = state.carried >= cfg.spoon_capacity
            exhausted = state.in_source == 0 or self._dwell > ex.dwell_patience
            if full or exhausted:
                self.phase = _Phase.RAISE

        if self.phase is _Phase.RAISE:
            vx = vy = 0.0
            tilt_rate = _tilt_toward(tilt, 0.0)
            if abs(tilt) < 1e-9:
                self.phase = _Phase.CARRY if state.carried > 0 else _Phase.RETURN

        if self.phase is _Phase.CARRY:
            tx, ty = state.target_center
            vx, vy = _drive_toward(cfg, state, (tx, ty), ex.gain, carry_cap)
            if math.hypot(x - tx, y - ty) <= ex.dump_radius_frac * cfg.target_bowl_radius:
                self.phase = _Phase.DUMP
                vx = vy = 0.0

        if self.phase is _Phase.DUMP:
            vx = vy = 0.0
            tilt_rate = _tilt_toward(tilt, 1.0)
            if state.carried == 0:
                self.phase = _Phase.LEVEL

        if self.phase is _Phase.LEVEL:
            vx = vy = 0.0
            tilt_rate = _tilt_toward(tilt, 0.0)
            if abs(tilt) < 1e-9:
                self.phase = _Phase.RETURN

        if self.phase is _Phase.RETURN:
            vx, vy = _drive_toward(cfg, state, cfg.home, ex.gain, cfg.max_speed)
            tilt_rate = _tilt_toward(tilt, 0.0)
            if (math.hypot(x - cfg.home[0], y - cfg.home[1]) <= ex.waypoint_tol
                    and abs(tilt) < 1e-9):
                done = True
                self.phase = _Phase.TO_SOURCE

        return EnvAction(vx, vy, tilt_rate).clamped(), done


@dataclass(frozen=True)
class RescuerConfig:
    stuck_window: int = 60          # W: ticks without score change away from home
    spill_speed_frac: float = 0.9   # of v_spill while loaded
    workspace_margin: float = 0.25  # closeness to the world edge that counts as lost
    home_tol: float = 0.6

    def validate(self, act_horizon: int) -> None:
        if self.stuck_window < act_horizon:
            raise ConfigError(
                f"stuck_window {self.stuck_window} < policy action horizon {act_horizon}")


class Rescuer:
    """Undesirability monitor plus the recovery teleoperation it performs.

    `observe` is fed the post-step state each tick and decides whether the
    trigger is held on the *next* tick. While holding, `act` guides the
    system back onto the nominal cycle and releases at the first desirable
    waypoint: loaded it deposits into the target bowl and hands back there;
    empty it rides to the source and scoops; with nothing left to move it
    re-homes. Handing back mid-cycle keeps the recorded corrections about
    task progress rather than retreat.
    """

    def __init__(self, env_config: EnvConfig, config: Optional[RescuerConfig] = None,
                 expert_config: Optional[ExpertConfig] = None):
        self.env_config = env_config
        self.config = config or RescuerConfig()
        self._expert_cfg = expert_config or ExpertConfig()
        self.holding = False
        self.last_reason: Optional[str] = None
        self._ticks_since_progress = 0
        self._last_in_target = 0
        self._rescue: Optional[ExpertController] = None
        self._plan: Optional[str] = None
        self.trigger_count = 0

    def reset(self) -> None:
        self.holding = False
        self.last_reason = None
        self._ticks_since_progress = 0
        self._last_in_target = 0
        self._rescue = None
        self._plan = None

    # -- monitoring ---------------------------------------------------------

    def _at_home(self, state: EnvState) -> bool:
        hx, hy = self.env_config.home
        x, y, _ = state.spoon_pose
        return math.hypot(x - hx, y - hy) <= self.config.home_tol

    def _undesirable(self, state: EnvState, speed: float) -> Optional[str]:
        cfg = self.env_config
        rc = self.config
        if state.carried > 0 and speed > rc.spill_speed_frac * cfg.v_spill:
            return "spill-risk"
        x, y, _ = state.spoon_pose
        w, h = cfg.world_size
        m = rc.workspace_margin
        if x < m or x > w - m or y < m or y > h - m:
            return "out-of-workspace"
        if self._ticks_since_progress >= rc.stuck_window and not self._at_home(state):
            return "stuck"
        return None

    def observe(self, state: EnvState, speed: float) -> None:
        """Updates progress tracking and the trigger decision for next tick."""
        if state.in_target != self._last_in_target:
            self._last_in_target = state.in_target
            self._ticks_since_progress = 0
        else:
            self._ticks_since_progress += 1
        if self.holding:
            return
        reason = self._undesirable(state, speed)
        if reason is not None:
            self.holding = True
            self.last_reason = reason
            self.trigger_count += 1
            self._rescue = ExpertController(self.env_config, self._expert_cfg)
            if state.carried > 0:
                self._plan = "deposit"
                self._rescue.phase = _Phase.RAISE
            elif state.in_source > 0:
                self._plan = "reload"
                self._rescue.phase = _Phase.TO_SOURCE
            else:
                self._plan = "rehome"
                self._rescue.phase = _Phase.RETURN

    # -- teleoperation ------------------------------------------------------

    def act(self, state: EnvState) -> EnvAction:
        action, cycle_done = self._rescue.act(state)
        released = (
            (self._plan == "deposit" and self._rescue.phase is _Phase.RETURN)
            or (self._plan == "reload" and self._rescue.phase is _Phase.CARRY)
            or cycle_done
        )
        if released:
            self.holding = False
            self._rescue = None
            self._plan = None
            self._ticks_since_progress = 0
        return action
