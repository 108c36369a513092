"""Live session service: fixed-rate simulation loop over a WebSocket wire.

One authoritative thread owns the environment, the policy controller and the
takeover state machine. Network I/O happens on an asyncio thread; client
messages land in a thread-safe queue that the tick loop drains once per
tick, coalescing operator actions to the freshest one while preserving every
trigger edge in order. Broadcasts are best-effort per client with bounded
queues, so a slow client can never stall the loop.

Wire messages are single JSON objects discriminated by "type". See
`WIRE_SCHEMA` for the exact field names.
"""

from __future__ import annotations

import asyncio
import base64
import itertools
import json
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datasets import DemoStore
from .env import EnvAction, EnvConfig, GranularEnv
from .errors import ConfigError, DimensionalityError
from .ood import Monitor
from .policy import (PolicyParams, RecedingController, TrainConfig,
                     encode_observation, load_policy, save_policy, train)
from .takeover import (DEFAULT_K_PRE, ControlMode, TakeoverController,
                       TakeoverEnded, TakeoverStarted)

__all__ = [
    "GatewayConfig",
    "SessionEngine",
    "Gateway",
    "TelemetryMonitor",
    "WIRE_SCHEMA",
]

WIRE_SCHEMA = {
    "server": {
        "state": ["tick", "pose", "carried", "in_target", "on_table", "grams",
                  "mode", "d_m", "flag", "image_b64"],
        "takeover_started": ["demo_id"],
        "takeover_ended": ["demo_id", "steps"],
        "trial_done": ["grams"],
        "error": ["code", "msg"],
        # listing/training replies, needed by the operator console
        "policies": ["ids"],
        "datasets": ["ids"],
        "training_done": ["ok", "policy_id", "msg"],
    },
    "client": {
        "start_trial": ["policy_id", "seed"],
        "trigger": ["held"],
        "operator_action": ["vx", "vy", "tilt_rate"],
        "subscribe_image": ["on"],
        "list_policies": [],
        "list_datasets": [],
        "start_training": ["dataset_id"],
    },
}


@dataclass(frozen=True)
class GatewayConfig:
    host: str = "127.0.0.1"
    port: int = 8765
    tick_hz: int = 10
    store_root: str = "stores"
    policy_dir: str = "policies"
    k_pre: int = DEFAULT_K_PRE
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    static_dir: Optional[str] = None  # optional operator console bundle

    @classmethod
    def from_file(cls, path) -> "GatewayConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read gateway config {path}: {exc}") from exc
        kwargs = dict(data)
        if "env" in kwargs:
            kwargs["env"] = EnvConfig.from_dict(kwargs["env"])
        if "train" in kwargs:
            kwargs["train"] = TrainConfig(**kwargs["train"])
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown gateway config keys: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass(frozen=True)
class TelemetryMonitor:
    """A fitted distance monitor tied to the encoder that produced it."""

    monitor: Monitor
    params: PolicyParams

    def __post_init__(self):
        d_in = (self.monitor.projection.shape[0]
                if self.monitor.projection is not None
                else self.monitor.gaussian.dim)
        if d_in != self.params.spec.d_e:
            raise DimensionalityError(
                f"monitor expects {d_in}-d embeddings, encoder emits "
                f"{self.params.spec.d_e}-d")


@dataclass
class _Inputs:
    """Everything drained from the wire for one tick."""

    trigger_edges: list = field(default_factory=list)   # (client_id, held)
    operator_action: Optional[EnvAction] = None         # freshest only
    commands: list = field(default_factory=list)        # (client_id, message)


class SessionEngine:
    """Synchronous tick engine; one instance is owned by one loop/thread."""

    def __init__(self, config: GatewayConfig, session_id: str = "session"):
        self.config = config
        self.session_id = session_id
        self.env = GranularEnv(config.env)
        self.store_root = Path(config.store_root)
        self.policy_dir = Path(config.policy_dir)
        self.store_root.mkdir(parents=True, exist_ok=True)
        self.policy_dir.mkdir(parents=True, exist_ok=True)
        self.live_store = DemoStore(self.store_root / "live", dataset_id="live")
        self.session_tick = 0
        self.clients = 0
        self.telemetry: Optional[TelemetryMonitor] = None
        self._demo_counter = itertools.count(len(self.live_store) + 1)
        self._training_results: "queue.Queue" = queue.Queue()
        self._trial = None  # dict with env state, controller, takeover, ...
        self._sticky_operator = EnvAction()
        self._last_d_m: Optional[float] = None

    # -- monitoring ----------------------------------------------------------

    def attach_monitor(self, telemetry: TelemetryMonitor) -> None:
        self.telemetry = telemetry

    # -- trial management ----------------------------------------------------

    def _next_demo_id(self) -> str:
        return f"live-{next(self._demo_counter):04d}"

    def _start_trial(self, policy_id: str, seed: int):
        path = self.policy_dir / policy_id
        if path.suffix != ".pt":
            path = path.with_suffix(".pt")
        params = load_policy(path)
        state, obs = self.env.reset(int(seed))
        self._trial = {
            "policy_id": policy_id,
            "seed": int(seed),
            "tick": 0,
            "state": state,
            "obs": obs,
            "prev_obs": obs,
            "controller": RecedingController(params, seed=int(seed)),
            "takeover": TakeoverController(
                self.config.k_pre,
                demo_id_fn=self._next_demo_id,
                demo_metadata={
                    "seed": int(seed),
                    "policy_id": policy_id,
                    "trial_id": f"{self.session_id}-t{self.session_tick}",
                    "tick_hz": self.config.env.tick_hz,
                    "image_size": list(self.config.env.image_size),
                }),
        }
        self._sticky_operator = EnvAction()

    def _finish_trial(self):
        outs = []
        trial = self._trial
        end = trial["takeover"].finish(trial["tick"])
        if end is not None:
            outs.extend(self._takeover_event_messages([end]))
        outs.append({"type": "trial_done",
                     "grams": self.env.score(trial["state"])})
        self._trial = None
        self._last_d_m = None
        return outs

    def _takeover_event_messages(self, events):
        outs = []
        for ev in events:
            if isinstance(ev, TakeoverStarted):
                outs.append({"type": "takeover_started", "demo_id": ev.demo_id})
            elif isinstance(ev, TakeoverEnded):
                if ev.demonstration is not None:
                    self.live_store.save(ev.demonstration)
                    outs.append({"type": "takeover_ended", "demo_id": ev.demo_id,
                                 "steps": len(ev.demonstration.steps)})
                else:
                    outs.append({"type": "takeover_ended", "demo_id": None,
                                 "steps": 0})
        return outs

    # -- commands -------------------------------------------------------------

    def _list_policies(self) -> list:
        return sorted(p.stem for p in self.policy_dir.glob("*.pt"))

    def _list_datasets(self) -> list:
        return sorted(p.parent.name for p in self.store_root.glob("*/manifest.json"))

    def _handle_command(self, client_id, msg) -> list:
        """Returns (client_id | None, message) pairs; None targets everyone."""
        mtype = msg.get("type")
        if mtype == "start_trial":
            try:
                self._start_trial(str(msg["policy_id"]), msg.get("seed", 0))
                return []
            except Exception as exc:
                return [(client_id, {"type": "error", "code": "start_trial",
                                     "msg": str(exc)})]
        if mtype == "list_policies":
            return [(client_id, {"type": "policies", "ids": self._list_policies()})]
        if mtype == "list_datasets":
            return [(client_id, {"type": "datasets", "ids": self._list_datasets()})]
        if mtype == "start_training":
            return self._start_training(client_id, msg)
        return [(client_id, {"type": "error", "code": "unknown_type",
                             "msg": f"unknown message type {mtype!r}"})]

    def _start_training(self, client_id, msg) -> list:
        dataset_id = str(msg.get("dataset_id", ""))
        manifest = self.store_root / dataset_id / "manifest.json"
        if not manifest.exists():
            return [(client_id, {"type": "error", "code": "start_training",
                                 "msg": f"no dataset {dataset_id!r}"})]
        results = self._training_results
        hyper = self.config.train
        policy_id = f"{dataset_id}-pi"
        out_path = self.policy_dir / policy_id
        store_root = self.store_root

        def job():
            try:
                view = DemoStore(store_root / dataset_id).view()
                params, _ = train(view, hyper, dataset_id=dataset_id)
                save_policy(params, out_path)
                results.put({"type": "training_done", "ok": True,
                             "policy_id": policy_id, "msg": ""})
            except Exception as exc:
                results.put({"type": "training_done", "ok": False,
                             "policy_id": policy_id, "msg": str(exc)})

        threading.Thread(target=job, daemon=True).start()
        return []

    # -- the tick -------------------------------------------------------------

    def tick(self, inputs: _Inputs) -> list:
        """Advances one tick; returns (client_id | None, message) pairs."""
        outs = []
        for client_id, msg in inputs.commands:
            outs.extend(self._handle_command(client_id, msg))
        while True:
            try:
                outs.append((None, self._training_results.get_nowait()))
            except queue.Empty:
                break

        if inputs.operator_action is not None:
            self._sticky_operator = inputs.operator_action

        trial = self._trial
        edges = [held for _, held in inputs.trigger_edges]
        if trial is None:
            if any(held for held in edges):
                for client_id, held in inputs.trigger_edges:
                    if held:
                        outs.append((client_id, {
                            "type": "error", "code": "no_trial",
                            "msg": "start a trial before taking over"}))
            self.session_tick += 1
            outs.append((None, self._state_message(None)))
            return outs

        takeover: TakeoverController = trial["takeover"]
        controller: RecedingController = trial["controller"]
        obs = trial["obs"]
        eff_held = edges[-1] if edges else takeover.trigger_held
        if takeover.trigger_held and not eff_held:
            controller.reset()  # release edge: replan from scratch next tick
        if eff_held:
            controller.observe_only(obs)
            policy_action = None
        else:
            policy_action = controller.act(obs)

        result = takeover.on_tick(
            trial["tick"], obs, policy_action, self._sticky_operator,
            trigger_edges=edges)

        outs.extend((None, m) for m in self._takeover_event_messages(result.events))
        state, new_obs = self.env.step(trial["state"], result.executed)
        trial["prev_obs"] = obs
        trial["state"] = state
        trial["obs"] = new_obs
        trial["tick"] += 1
        self.session_tick += 1

        if self.telemetry is not None:
            emb = encode_observation(self.telemetry.params,
                                     (trial["prev_obs"], new_obs))
            self._last_d_m = float(self.telemetry.monitor.distance(emb))

        outs.append((None, self._state_message(state)))
        if trial["tick"] >= self.config.env.trial_ticks:
            outs.extend((None, m) for m in self._finish_trial())
        return outs

    def _state_message(self, state) -> dict:
        trial = self._trial
        if state is None and trial is not None:
            state = trial["state"]
        mode = "policy"
        if trial is not None and trial["takeover"].mode is ControlMode.OPERATOR:
            mode = "operator"
        msg = {
            "type": "state",
            "tick": self.session_tick,
            "pose": list(state.spoon_pose) if state is not None else [0.0, 0.0, 0.0],
            "carried": state.carried if state is not None else 0,
            "in_target": state.in_target if state is not None else 0,
            "on_table": state.on_table if state is not None else 0,
            "grams": self.env.score(state) if state is not None else 0.0,
            "mode": mode,
        }
        if self.telemetry is not None and trial is not None and self._last_d_m is not None:
            msg["d_m"] = self._last_d_m
            msg["flag"] = bool(self._last_d_m > self.telemetry.monitor.threshold)
        return msg

    def session_state(self) -> dict:
        trial = self._trial
        return {
            "session_id": self.session_id,
            "tick": self.session_tick,
            "clients": self.clients,
            "policy_id": trial["policy_id"] if trial else None,
            "trial_tick": trial["tick"] if trial else None,
            "mode": ("operator" if trial and trial["takeover"].mode is ControlMode.OPERATOR
                     else "policy"),
            "recording": bool(trial and trial["takeover"].trigger_held),
            "d_m": self._last_d_m,
        }

    def attach_image(self, msg: dict, obs_image: Optional[np.ndarray]) -> dict:
        if obs_image is None:
            return msg
        u8 = np.round(obs_image * 255.0).astype(np.uint8)
        with_img = dict(msg)
        with_img["image_b64"] = base64.b64encode(u8.tobytes()).decode("ascii")
        with_img["image_shape"] = list(u8.shape)
        return with_img

    @property
    def current_image(self) -> Optional[np.ndarray]:
        return self._trial["obs"].image if self._trial is not None else None


class _Client:
    _ids = itertools.count(1)

    def __init__(self, ws, loop):
        self.id = next(_Client._ids)
        self.ws = ws
        self.loop = loop
        self.queue: deque = deque(maxlen=64)  # oldest broadcast dropped first
        self.wakeup = asyncio.Event()
        self.subscribe_image = False


class Gateway:
    """WebSocket server plus the fixed-rate simulation thread."""

    def __init__(self, config: GatewayConfig,
                 telemetry: Optional[TelemetryMonitor] = None):
        self.config = config
        self.engine = SessionEngine(config)
        if telemetry is not None:
            self.engine.attach_monitor(telemetry)
        self._inputs: "queue.Queue" = queue.Queue()
        self._clients: dict[int, _Client] = {}
        self._clients_lock = threading.Lock()
        self._stop = threading.Event()
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._sim_thread: Optional[threading.Thread] = None
        self._net_thread: Optional[threading.Thread] = None
        self._started = threading.Event()
        self._startup_error: Optional[BaseException] = None
        self.port: Optional[int] = None

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> "Gateway":
        self._net_thread = threading.Thread(target=self._run_network, daemon=True)
        self._net_thread.start()
        self._started.wait(timeout=10)
        if self._startup_error is not None:
            raise ConfigError(f"gateway startup failed: {self._startup_error}")
        self._sim_thread = threading.Thread(target=self._run_sim, daemon=True)
        self._sim_thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._loop is not None:
            self._loop.call_soon_threadsafe(lambda: None)
        if self._sim_thread is not None:
            self._sim_thread.join(timeout=5)
        if self._loop is not None:
            self._loop.call_soon_threadsafe(self._loop.stop)
        if self._net_thread is not None:
            self._net_thread.join(timeout=5)

    def __enter__(self) -> "Gateway":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- network side ------------------------------------------------------------

    def _run_network(self) -> None:
        from websockets.asyncio.server import serve

        loop = asyncio.new_event_loop()
        asyncio.set_event_loop(loop)
        self._loop = loop

        async def boot():
            try:
                server = await serve(
                    self._handler, self.config.host, self.config.port,
                    process_request=self._process_request)
                self.port = server.sockets[0].getsockname()[1]
            except OSError as exc:
                self._startup_error = exc
            finally:
                self._started.set()

        loop.run_until_complete(boot())
        if self._startup_error is None:
            loop.run_forever()

    _MIME = {".html": "text/html; charset=utf-8",
             ".js": "application/javascript",
             ".map": "application/json",
             ".css": "text/css",
             ".json": "application/json"}

    def _process_request(self, connection, request):
        if request.headers.get("Upgrade", "").lower() == "websocket":
            return None  # always let upgrades through, whatever the path
        if request.path == "/health":
            body = json.dumps(self.engine.session_state(), indent=2) + "\n"
            return connection.respond(200, body)
        static = self.config.static_dir
        if static is not None:
            root = Path(static).resolve()
            target = (root / request.path.lstrip("/")).resolve()
            if request.path == "/":
                target = root / "index.html"
            if target.is_file() and str(target).startswith(str(root)):
                from websockets.datastructures import Headers
                from websockets.http11 import Response
                body = target.read_bytes()
                headers = Headers({
                    "Content-Type": self._MIME.get(
                        target.suffix, "application/octet-stream"),
                    "Content-Length": str(len(body)),
                })
                return Response(200, "OK", headers, body)
        return None  # everything else upgrades to WebSocket

    async def _handler(self, ws) -> None:
        client = _Client(ws, self._loop)
        with self._clients_lock:
            self._clients[client.id] = client
        self.engine.clients = len(self._clients)
        sender = asyncio.create_task(self._sender(client))
        try:
            async for raw in ws:
                try:
                    msg = json.loads(raw)
                    if not isinstance(msg, dict) or "type" not in msg:
                        raise ValueError("message must be an object with a type")
                except (json.JSONDecodeError, ValueError) as exc:
                    self._send_to(client, {"type": "error", "code": "bad_message",
                                           "msg": str(exc)})
                    continue
                self._route(client, msg)
        finally:
            sender.cancel()
            with self._clients_lock:
                self._clients.pop(client.id, None)
            self.engine.clients = len(self._clients)

    def _route(self, client: _Client, msg: dict) -> None:
        mtype = msg.get("type")
        if mtype == "subscribe_image":
            client.subscribe_image = bool(msg.get("on"))
            return
        self._inputs.put((client.id, msg))

    async def _sender(self, client: _Client) -> None:
        while True:
            await client.wakeup.wait()
            client.wakeup.clear()
            while client.queue:
                payload = client.queue.popleft()
                await client.ws.send(payload)

    def _send_to(self, client: _Client, msg: dict) -> None:
        client.queue.append(json.dumps(msg))
        self._loop.call_soon_threadsafe(client.wakeup.set)

    # -- simulation side -----------------------------------------------------------

    def _drain_inputs(self) -> _Inputs:
        inputs = _Inputs()
        while True:
            try:
                client_id, msg = self._inputs.get_nowait()
            except queue.Empty:
                return inputs
            mtype = msg.get("type")
            if mtype == "trigger":
                inputs.trigger_edges.append((client_id, bool(msg.get("held"))))
            elif mtype == "operator_action":
                inputs.operator_action = EnvAction(
                    float(msg.get("vx", 0.0)), float(msg.get("vy", 0.0)),
                    float(msg.get("tilt_rate", 0.0))).clamped()
            else:
                inputs.commands.append((client_id, msg))

    def _run_sim(self) -> None:
        interval = 1.0 / self.config.tick_hz
        next_tick = time.monotonic() + interval
        while not self._stop.is_set():
            delay = next_tick - time.monotonic()
            if delay > 0 and self._stop.wait(timeout=delay):
                break
            next_tick += interval
            outs = self.engine.tick(self._drain_inputs())
            self._broadcast(outs)

    def _broadcast(self, outs) -> None:
        if not outs:
            return
        with self._clients_lock:
            clients = list(self._clients.values())
        image = self.engine.current_image
        for target_id, msg in outs:
            for client in clients:
                if target_id is not None and client.id != target_id:
                    continue
                payload = msg
                if (msg.get("type") == "state" and client.subscribe_image):
                    payload = self.engine.attach_image(msg, image)
                self._send_to(client, payload)


def serve_forever(config: GatewayConfig,
                  telemetry: Optional[TelemetryMonitor] = None) -> None:
    """Blocking entry point used by the CLI."""
    gw = Gateway(config, telemetry)
    gw.start()
    print(f"gateway listening on ws://{config.host}:{gw.port} "
          f"(health: http://{config.host}:{gw.port}/health)")
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        gw.stop()
