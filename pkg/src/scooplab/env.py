"""Deterministic 2-D granular-transfer environment.

A spoon moves over a tabletop world, scoops grains from a fixed source bowl
and carries them to a target bowl whose position varies per episode. Moving
too fast while loaded spills grains onto the table, where they are lost.
All transitions are pure functions of (state, action); same seed, same
trajectory, bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError

__all__ = [
    "Rect",
    "EnvConfig",
    "EnvState",
    "EnvAction",
    "EnvObservation",
    "GranularEnv",
]


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in world units."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ConfigError(f"degenerate rectangle {self}")

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def sample(self, rng: np.random.Generator) -> tuple[float, float]:
        return (
            float(rng.uniform(self.x0, self.x1)),
            float(rng.uniform(self.y0, self.y1)),
        )


def _as_rect(value) -> Rect:
    if isinstance(value, Rect):
        return value
    return Rect(*[float(v) for v in value])


@dataclass(frozen=True)
class EnvConfig:
    """World geometry, grain bookkeeping and motion limits.

    `v_spill` is in world units per second; commanded velocities are in
    [-1, 1] and scale by `max_speed`. `tilt_rate` integrates directly per
    tick, so a full tilt swing takes two ticks at full rate.
    """

    world_size: tuple[float, float] = (11.0, 7.0)
    source_bowl: Rect = field(default_factory=lambda: Rect(1.0, 1.0, 3.4, 3.4))
    target_region: Rect = field(default_factory=lambda: Rect(6.5, 1.2, 9.8, 4.2))
    target_bowl_radius: float = 1.0
    grain_count: int = 200
    grain_mass_g: float = 0.5
    spoon_capacity: int = 10
    pickup_rate: int = 2
    v_spill: float = 2.4
    tilt_scoop: float = -0.5
    tilt_dump: float = 0.5
    max_speed: float = 4.0
    tick_hz: int = 10
    trial_ticks: int = 450
    image_size: tuple[int, int] = (48, 48)

    def __post_init__(self):
        object.__setattr__(self, "world_size", tuple(float(v) for v in self.world_size))
        object.__setattr__(self, "source_bowl", _as_rect(self.source_bowl))
        object.__setattr__(self, "target_region", _as_rect(self.target_region))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        w, h = self.world_size
        world = Rect(0.0, 0.0, w, h)
        for name in ("source_bowl", "target_region"):
            r: Rect = getattr(self, name)
            if not (world.contains(r.x0, r.y0) and world.contains(r.x1, r.y1)):
                raise ConfigError(f"{name} {r} outside world {self.world_size}")
        if not 0 < self.pickup_rate <= self.spoon_capacity:
            raise ConfigError("need 0 < pickup_rate <= spoon_capacity")
        if not self.tilt_scoop < 0.0 < self.tilt_dump:
            raise ConfigError("need tilt_scoop < 0 < tilt_dump")
        if self.grain_count <= 0 or self.grain_mass_g <= 0:
            raise ConfigError("grain_count and grain_mass_g must be positive")
        if self.max_speed <= 0 or self.v_spill <= 0 or self.tick_hz <= 0:
            raise ConfigError("max_speed, v_spill and tick_hz must be positive")
        if self.trial_ticks <= 0:
            raise ConfigError("trial_ticks must be positive")
        if self.image_size[0] < 8 or self.image_size[1] < 8:
            raise ConfigError("image_size too small to render the scene")

    @property
    def home(self) -> tuple[float, float]:
        # Fixed spoon rest pose: top middle, clear of both bowls.
        return (0.5 * self.world_size[0], 0.82 * self.world_size[1])

    @property
    def trial_seconds(self) -> float:
        return self.trial_ticks / self.tick_hz

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown EnvConfig keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "EnvConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read env config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"env config {path} must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "world_size": list(self.world_size),
            "source_bowl": [self.source_bowl.x0, self.source_bowl.y0,
                            self.source_bowl.x1, self.source_bowl.y1],
            "target_region": [self.target_region.x0, self.target_region.y0,
                              self.target_region.x1, self.target_region.y1],
            "target_bowl_radius": self.target_bowl_radius,
            "grain_count": self.grain_count,
            "grain_mass_g": self.grain_mass_g,
            "spoon_capacity": self.spoon_capacity,
            "pickup_rate": self.pickup_rate,
            "v_spill": self.v_spill,
            "tilt_scoop": self.tilt_scoop,
            "tilt_dump": self.tilt_dump,
            "max_speed": self.max_speed,
            "tick_hz": self.tick_hz,
            "trial_ticks": self.trial_ticks,
            "image_size": list(self.image_size),
        }


@dataclass(frozen=True)
class EnvState:
    """Full simulation state; grain counts always sum to grain_count."""

    tick: int
    spoon_pose: tuple[float, float, float]  # (x, y, tilt), tilt in [-1, 1]
    carried: int
    in_source: int
    in_target: int
    on_table: int
    target_center: tuple[float, float]


@dataclass(frozen=True)
class EnvAction:
    """Commanded spoon motion; every component is clamped to [-1, 1]."""

    vx: float = 0.0
    vy: float = 0.0
    tilt_rate: float = 0.0

    def clamped(self) -> "EnvAction":
        return EnvAction(
            vx=min(1.0, max(-1.0, self.vx)),
            vy=min(1.0, max(-1.0, self.vy)),
            tilt_rate=min(1.0, max(-1.0, self.tilt_rate)),
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.tilt_rate], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "EnvAction":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class EnvObservation:
    """What the policy sees: grayscale render plus normalized proprioception."""

    image: np.ndarray  # (H, W) float32 in [0, 1], values on the k/255 grid
    pose: np.ndarray   # (4,) float32: x, y in [-1, 1], tilt, carried fraction


class GranularEnv:
    """Pure value-semantics state machine for the granular-transfer task."""

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int) -> tuple[EnvState, EnvObservation]:
        """All grains in the source bowl, spoon at home, target placed by seed."""
        cfg = self.config
        rng = np.random.default_rng(seed)
        target_center = cfg.target_region.sample(rng)
        state = EnvState(
            tick=0,
            spoon_pose=(cfg.home[0], cfg.home[1], 0.0),
            carried=0,
            in_source=cfg.grain_count,
            in_target=0,
            on_table=0,
            target_center=target_center,
        )
        return state, self.observe(state)

    def advance(self, state: EnvState, action: EnvAction) -> EnvState:
        """One tick of motion integration followed by the grain rules.

        Rule order is fixed (scoop, dump, spill) so transitions are
        deterministic; scoop and spill are mutually exclusive through the
        speed test, and dump empties the spoon before the spill test runs.
        """
        cfg = self.config
        act = action.clamped()
        w, h = cfg.world_size

        x, y, tilt = state.spoon_pose
        dt = 1.0 / cfg.tick_hz
        x = min(w, max(0.0, x + act.vx * cfg.max_speed * dt))
        y = min(h, max(0.0, y + act.vy * cfg.max_speed * dt))
        tilt = min(1.0, max(-1.0, tilt + act.tilt_rate))
        speed = math.hypot(act.vx, act.vy) * cfg.max_speed

        carried = state.carried
        in_source = state.in_source
        in_target = state.in_target
        on_table = state.on_table

        # 1) scoop
        if (cfg.source_bowl.contains(x, y) and tilt <= cfg.tilt_scoop
                and speed <= cfg.v_spill):
            take = min(cfg.pickup_rate, cfg.spoon_capacity - carried, in_source)
            carried += take
            in_source -= take
        # 2) dump
        if tilt >= cfg.tilt_dump and carried > 0:
            tx, ty = state.target_center
            if math.hypot(x - tx, y - ty) <= cfg.target_bowl_radius:
                in_target += carried
            else:
                on_table += carried
            carried = 0
        # 3) spill
        if carried > 0 and speed > cfg.v_spill:
            on_table += carried
            carried = 0

        return replace(
            state,
            tick=state.tick + 1,
            spoon_pose=(x, y, tilt),
            carried=carried,
            in_source=in_source,
            in_target=in_target,
            on_table=on_table,
        )

    def step(self, state: EnvState, action: EnvAction) -> tuple[EnvState, EnvObservation]:
        nxt = self.advance(state, action)
        return nxt, self.observe(nxt)

    # -- outputs -----------------------------------------------------------

    def observe(self, state: EnvState) -> EnvObservation:
        cfg = self.config
        x, y, tilt = state.spoon_pose
        w, h = cfg.world_size
        pose = np.array(
            [2.0 * x / w - 1.0,
             2.0 * y / h - 1.0,
             tilt,
             state.carried / cfg.spoon_capacity],
            dtype=np.float32,
        )
        return EnvObservation(image=self.render(state), pose=pose)

    def render(self, state: EnvState) -> np.ndarray:
        """Deterministic grayscale raster of the scene.

        Drawn on a uint8 canvas and divided by 255, so stored images
        round-trip exactly through byte serialization.
        """
        cfg = self.config
        height, width = cfg.image_size
        w, h = cfg.world_size
        canvas = np.zeros((height, width), dtype=np.uint8)

        sx = (width - 1) / w
        sy = (height - 1) / h

        def px(wx: float) -> int:
            return int(round(wx * sx))

        def py(wy: float) -> int:
            # world y up, image row 0 at the top
            return (height - 1) - int(round(wy * sy))

        # source bowl: filled rectangle, brightness tracks remaining grains
        sb = cfg.source_bowl
        fill = 40 + int(round(120 * state.in_source / cfg.grain_count))
        r0, r1 = py(sb.y1), py(sb.y0)
        c0, c1 = px(sb.x0), px(sb.x1)
        canvas[r0:r1 + 1, c0:c1 + 1] = fill
        canvas[r0, c0:c1 + 1] = 200
        canvas[r1, c0:c1 + 1] = 200
        canvas[r0:r1 + 1, c0] = 200
        canvas[r0:r1 + 1, c1] = 200

        # target bowl: disk with bright rim, brightness tracks content
        tx, ty = state.target_center
        rows = np.arange(height)[:, None]
        cols = np.arange(width)[None, :]
        dist2 = ((cols - px(tx)) / sx) ** 2 + ((rows - py(ty)) / sy) ** 2
        radius = cfg.target_bowl_radius
        disk = dist2 <= radius * radius
        rim = (dist2 <= radius * radius) & (dist2 >= (0.7 * radius) ** 2)
        tfill = 40 + int(round(120 * state.in_target / cfg.grain_count))
        canvas[disk] = tfill
        canvas[rim] = 230

        # spoon: bright block, one-pixel tilt strip underneath, load dot above
        sxp, syp = px(state.spoon_pose[0]), py(state.spoon_pose[1])
        r0, r1 = max(0, syp - 1), min(height - 1, syp + 1)
        c0, c1 = max(0, sxp - 1), min(width - 1, sxp + 1)
        canvas[r0:r1 + 1, c0:c1 + 1] = 255
        tilt_val = int(round(127.5 + 127.5 * state.spoon_pose[2]))
        if r1 + 1 <= height - 1:
            canvas[r1 + 1, c0:c1 + 1] = tilt_val
        if state.carried > 0 and r0 - 1 >= 0:
            canvas[r0 - 1, c0:c1 + 1] = 60 + int(round(195 * state.carried / cfg.spoon_capacity))

        return canvas.astype(np.float32) / 255.0

    def score(self, state: EnvState) -> float:
        """Grams delivered to the target bowl."""
        return state.in_target * self.config.grain_mass_g

    def check_conservation(self, state: EnvState) -> None:
        total = state.carried + state.in_source + state.in_target + state.on_table
        assert total == self.config.grain_count, f"grain leak: {total}"
