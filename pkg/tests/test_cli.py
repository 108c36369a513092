import json

import pytest

from scooplab.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    env_path = root / "env.json"
    env_path.write_text(json.dumps({"trial_ticks": 120}))
    rc = main(["collect-initial", "--n", "3", "--seed", "0",
               "--store", str(root / "stores" / "initial"),
               "--env-config", str(env_path)])
    assert rc == 0
    rc = main(["train", "--dataset", str(root / "stores" / "initial"),
               "--out", str(root / "policies" / "tiny"), "--epochs", "1"])
    assert rc == 0
    return root, env_path


def test_collect_and_train_artifacts(workspace):
    root, _ = workspace
    assert (root / "stores" / "initial" / "manifest.json").exists()
    assert (root / "policies" / "tiny.pt").exists()
    assert (root / "policies" / "tiny.json").exists()


def test_train_union_and_first_n(workspace, tmp_path):
    root, _ = workspace
    rc = main(["train", "--dataset", str(root / "stores" / "initial"),
               "--first-n", "2", "--out", str(tmp_path / "sub"), "--epochs", "0"])
    assert rc == 0
    manifest = json.loads((tmp_path / "sub.json").read_text())
    assert manifest["d_e"] == 80


def test_rtot_round_cli(workspace):
    root, env_path = workspace
    rc = main(["rtot-round", "--policy", str(root / "policies" / "tiny.pt"),
               "--n", "1", "--seed", "7",
               "--out-store", str(root / "stores" / "tk"),
               "--budget", "3", "--env-config", str(env_path)])
    assert rc == 0


def test_evaluate_handles_zero_reference_pair(workspace, capsys):
    root, env_path = workspace
    # a 1-epoch policy scores zero; the pair report must degrade gracefully
    rc = main(["evaluate", "--policies", str(root / "policies" / "tiny.pt"),
               "--trials", "1", "--env-config", str(env_path),
               "--pair", "tiny:tiny"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "n/a (reference mean is zero)" in out


def test_evaluate_unknown_pair_label(workspace):
    root, env_path = workspace
    rc = main(["evaluate", "--policies", str(root / "policies" / "tiny.pt"),
               "--trials", "1", "--env-config", str(env_path),
               "--pair", "tiny:nope"])
    assert rc == 2


def test_ood_report_cli(workspace, tmp_path):
    root, _ = workspace
    rc = main(["ood-report", "--models", str(root / "policies" / "tiny.pt"),
               "--datasets", str(root / "stores" / "initial"),
               "--experiments", str(root / "stores" / "initial"),
               "--out", str(tmp_path / "ood"), "--subsets", "40"])
    assert rc == 0
    assert (tmp_path / "ood" / "violins.csv").exists()
    assert (tmp_path / "ood" / "traces.csv").exists()


def test_config_errors_exit_2(tmp_path):
    assert main(["protocol", "--plan", str(tmp_path / "missing.json")]) == 2
    bad_env = tmp_path / "bad.json"
    bad_env.write_text(json.dumps({"nonsense": 1}))
    assert main(["collect-initial", "--n", "1", "--seed", "0",
                 "--store", str(tmp_path / "s"),
                 "--env-config", str(bad_env)]) == 2
    assert main(["serve", "--config", str(tmp_path / "missing.json")]) == 2
