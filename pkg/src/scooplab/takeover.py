"""Control-mode state machine, ring buffer and demonstration recording.

While the policy drives, every executed tick is pushed into a bounded ring
buffer. The instant the operator's trigger goes down, the buffer contents
become the prefix of a new demonstration and every operator tick is appended
until the trigger is released, at which point control snaps back to the
policy. A takeover with zero operator ticks is discarded.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from .env import EnvAction, EnvObservation
from .errors import ProtocolError, EmptyDatasetError

__all__ = [
    "ControlMode",
    "StepSource",
    "DemoStep",
    "Demonstration",
    "RingBuffer",
    "TakeoverStarted",
    "TakeoverEnded",
    "TickResult",
    "TakeoverController",
    "record_initial",
    "finalize_takeover",
]

DEFAULT_K_PRE = 6  # observation horizon + action horizon of the default policy


class ControlMode(enum.Enum):
    POLICY = "policy"
    OPERATOR = "operator"


class StepSource(enum.Enum):
    EXPERT = "expert"
    PREFIX = "prefix"
    OPERATOR = "operator"


@dataclass(frozen=True)
class DemoStep:
    tick: int
    observation: EnvObservation
    action: EnvAction
    source: StepSource


@dataclass(frozen=True)
class Demonstration:
    """A recorded step sequence; prefix steps appear only at the head."""

    id: str
    kind: str  # "initial" | "takeover"
    steps: tuple[DemoStep, ...]
    metadata: dict

    def __post_init__(self):
        if self.kind not in ("initial", "takeover"):
            raise ProtocolError(f"unknown demonstration kind {self.kind!r}")
        ticks = [s.tick for s in self.steps]
        if any(b <= a for a, b in zip(ticks, ticks[1:])):
            raise ProtocolError(f"demo {self.id}: ticks not strictly increasing")
        sources = [s.source for s in self.steps]
        if self.kind == "initial":
            if any(s is not StepSource.EXPERT for s in sources):
                raise ProtocolError(f"demo {self.id}: initial demos are expert-only")
        else:
            n_prefix = 0
            while n_prefix < len(sources) and sources[n_prefix] is StepSource.PREFIX:
                n_prefix += 1
            rest = sources[n_prefix:]
            if not rest or any(s is not StepSource.OPERATOR for s in rest):
                raise ProtocolError(
                    f"demo {self.id}: takeover demos are prefix* then >=1 operator steps"
                )

    @property
    def n_prefix(self) -> int:
        return sum(1 for s in self.steps if s.source is StepSource.PREFIX)

    @property
    def n_operator(self) -> int:
        return sum(1 for s in self.steps if s.source is StepSource.OPERATOR)


class RingBuffer:
    """Keeps the newest `capacity` (tick, observation, executed action) rows."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ProtocolError("ring buffer capacity must be >= 0")
        self.capacity = capacity
        self._entries: deque = deque(maxlen=capacity)

    def push(self, tick: int, obs: EnvObservation, action: EnvAction) -> None:
        self._entries.append((tick, obs, action))

    def snapshot(self) -> tuple:
        return tuple(self._entries)

    def clear(self) -> None:
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)


@dataclass(frozen=True)
class TakeoverStarted:
    tick: int
    demo_id: str
    prefix: tuple  # ring buffer snapshot at the press


@dataclass(frozen=True)
class TakeoverEnded:
    tick: int
    demo_id: Optional[str]  # None when the takeover carried no operator steps
    demonstration: Optional[Demonstration]


@dataclass(frozen=True)
class TickResult:
    executed: EnvAction
    mode: ControlMode
    events: tuple


def finalize_takeover(
    prefix: Sequence[tuple],
    operator_steps: Sequence[DemoStep],
    demo_id: str,
    metadata: Optional[dict] = None,
) -> Optional[Demonstration]:
    """Builds a takeover demonstration, or None when nothing was operated.

    Prefix entries are (tick, observation, executed action) rows straight
    from the ring buffer and get tagged `prefix`; their actions are retained
    for replay fidelity but are never used as training targets.
    """
    if not operator_steps:
        return None
    steps = tuple(
        DemoStep(tick=t, observation=o, action=a, source=StepSource.PREFIX)
        for (t, o, a) in prefix
    ) + tuple(operator_steps)
    return Demonstration(
        id=demo_id, kind="takeover", steps=steps, metadata=dict(metadata or {})
    )


def record_initial(
    session: Iterable[tuple[EnvObservation, EnvAction, bool]],
    demo_id: str,
    metadata: Optional[dict] = None,
) -> Demonstration:
    """Filters a teleoperation session down to trigger-held ticks.

    Idle ticks (trigger released) are dropped and the remaining steps are
    re-indexed contiguously from zero, so the stored demonstration carries
    no idle information.
    """
    steps = []
    for obs, action, held in session:
        if held:
            steps.append(
                DemoStep(
                    tick=len(steps),
                    observation=obs,
                    action=action,
                    source=StepSource.EXPERT,
                )
            )
    if not steps:
        raise EmptyDatasetError("session has no trigger-held ticks")
    return Demonstration(
        id=demo_id, kind="initial", steps=tuple(steps), metadata=dict(metadata or {})
    )


class TakeoverController:
    """Advances one simulation tick at a time and owns the ring buffer.

    The buffer is frozen while the operator holds the trigger and cleared on
    release, so a later takeover's prefix only ever contains post-handback
    policy context.
    """

    def __init__(
        self,
        k_pre: int = DEFAULT_K_PRE,
        demo_id_fn: Optional[Callable[[], str]] = None,
        demo_metadata: Optional[dict] = None,
    ):
        self.buffer = RingBuffer(k_pre)
        self.mode = ControlMode.POLICY
        self._held = False
        self._counter = 0
        self._demo_id_fn = demo_id_fn or self._default_id
        self._demo_metadata = dict(demo_metadata or {})
        self._pending: Optional[tuple[str, tuple, list]] = None  # (id, prefix, steps)

    def _default_id(self) -> str:
        self._counter += 1
        return f"takeover-{self._counter:04d}"

    @property
    def trigger_held(self) -> bool:
        return self._held

    def on_tick(
        self,
        tick: int,
        obs: EnvObservation,
        policy_action: Optional[EnvAction],
        operator_action: Optional[EnvAction],
        *,
        trigger_held: Optional[bool] = None,
        trigger_edges: Optional[Sequence[bool]] = None,
    ) -> TickResult:
        """Processes trigger edges, then executes exactly one action.

        Pass either `trigger_held` (level-style driving, edges inferred) or
        `trigger_edges` (every press/release observed since the last tick, in
        order, so a press+release inside one tick interval is still seen).
        """
        if (trigger_held is None) == (trigger_edges is None):
            raise ProtocolError("pass exactly one of trigger_held / trigger_edges")
        if trigger_edges is None:
            trigger_edges = [trigger_held] if trigger_held != self._held else []

        events = []
        for held in trigger_edges:
            if held and not self._held:
                demo_id = self._demo_id_fn()
                prefix = self.buffer.snapshot()
                self._pending = (demo_id, prefix, [])
                events.append(TakeoverStarted(tick=tick, demo_id=demo_id, prefix=prefix))
            elif not held and self._held:
                events.append(self._finish(tick))
            self._held = held

        if self._held:
            if operator_action is None:
                raise ProtocolError("trigger held but no operator action supplied")
            executed = operator_action.clamped()
            self.mode = ControlMode.OPERATOR
            self._pending[2].append(
                DemoStep(tick=tick, observation=obs, action=executed,
                         source=StepSource.OPERATOR)
            )
        else:
            if policy_action is None:
                raise ProtocolError("policy in control but no policy action supplied")
            executed = policy_action.clamped()
            self.mode = ControlMode.POLICY
            self.buffer.push(tick, obs, executed)

        return TickResult(executed=executed, mode=self.mode, events=tuple(events))

    def finish(self, tick: int) -> Optional[TakeoverEnded]:
        """Force-releases the trigger (e.g. at trial end); returns the end event."""
        if not self._held:
            return None
        self._held = False
        self.mode = ControlMode.POLICY
        return self._finish(tick)

    def _finish(self, tick: int) -> TakeoverEnded:
        demo_id, prefix, steps = self._pending
        demo = finalize_takeover(prefix, steps, demo_id, self._demo_metadata)
        self._pending = None
        self.buffer.clear()
        return TakeoverEnded(
            tick=tick,
            demo_id=demo_id if demo is not None else None,
            demonstration=demo,
        )
