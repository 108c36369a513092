"""A live gateway session driven by a scripted WebSocket client.

Starts the service in-process, lists policies over the wire, starts a trial,
performs a press-drive-release takeover exactly like the browser console
does, and shows the messages coming back (including the persisted demo id).
"""

import json
import tempfile
import time
from pathlib import Path

from websockets.sync.client import connect

from scooplab import EnvConfig, GranularEnv, TrainConfig, train
from scooplab.datasets import DemoStore
from scooplab.gateway import Gateway, GatewayConfig
from scooplab.harness import collect_initial
from scooplab.policy import save_policy


def main():
    with tempfile.TemporaryDirectory() as td:
        td = Path(td)
        env_cfg = EnvConfig(trial_ticks=80)
        env = GranularEnv(env_cfg)
        store = DemoStore(td / "stores" / "warmup", dataset_id="warmup")
        collect_initial(env, 2, 0, store)
        params, _ = train(store.view(), TrainConfig(epochs=2, seed=0))
        save_policy(params, td / "policies" / "pilot")

        cfg = GatewayConfig(port=0, tick_hz=20, store_root=str(td / "stores"),
                            policy_dir=str(td / "policies"), env=env_cfg)
        with Gateway(cfg) as gw:
            print(f"gateway on ws://127.0.0.1:{gw.port} "
                  f"(health at /health)\n")
            with connect(f"ws://127.0.0.1:{gw.port}") as ws:
                ws.send(json.dumps({"type": "list_policies"}))
                ws.send(json.dumps({"type": "start_trial",
                                    "policy_id": "pilot", "seed": 4}))
                held = False
                shown = 0
                deadline = time.time() + 20
                while time.time() < deadline:
                    msg = json.loads(ws.recv(timeout=10))
                    mtype = msg["type"]
                    if mtype == "policies":
                        print("policies on the server:", msg["ids"])
                    elif mtype == "state":
                        if shown < 3 or msg["tick"] % 25 == 0:
                            print(f"state tick={msg['tick']} mode={msg['mode']} "
                                  f"pose=({msg['pose'][0]:.1f},{msg['pose'][1]:.1f}) "
                                  f"grams={msg['grams']}")
                            shown += 1
                        if msg["tick"] == 10 and not held:
                            held = True
                            print(">> press: trigger held")
                            ws.send(json.dumps({"type": "trigger", "held": True}))
                        if held and 10 <= msg["tick"] < 22:
                            ws.send(json.dumps({"type": "operator_action",
                                                "vx": 0.3, "vy": -0.2,
                                                "tilt_rate": 0.0}))
                        if msg["tick"] == 22 and held:
                            held = False
                            print(">> release: control back to the policy")
                            ws.send(json.dumps({"type": "trigger", "held": False}))
                    elif mtype == "takeover_started":
                        print(f"<< takeover_started demo_id={msg['demo_id']}")
                    elif mtype == "takeover_ended":
                        print(f"<< takeover_ended demo_id={msg['demo_id']} "
                              f"steps={msg['steps']}")
                        live = DemoStore(td / "stores" / "live")
                        demo = live.load(msg["demo_id"])
                        print(f"   persisted: {demo.n_prefix} prefix + "
                              f"{demo.n_operator} operator steps")
                    elif mtype == "trial_done":
                        print(f"<< trial_done grams={msg['grams']}")
                        break


if __name__ == "__main__":
    main()
