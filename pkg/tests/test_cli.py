import json
import os
import subprocess
import sys

import pytest

from advocate import Advocate, Gateway
from advocate.cli import main
from conftest import SEED_A


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("ADVOCATE_HOME", raising=False)
    monkeypatch.delenv("ADVOCATE_CONFIG", raising=False)
    monkeypatch.delenv("ADVOCATE_FAULT", raising=False)


@pytest.fixture
def config(tmp_path):
    data = {
        "home": str(tmp_path / "home"),
        "instance": {"instance_name": "cli", "advocate_version": "1.0.0", "operator": "ops", "environment": {}},
        "sources": [],
        "anchor_flush_interval_s": 1,
        "api_listen": "127.0.0.1:0",
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def home(config, capsys):
    code, out, _ = run(capsys, "--config", config, "init", "--seed-hex", SEED_A.hex())
    assert code == 0
    return json.loads(config.read_text())["home"], out.strip()


def test_init_twice(config, home, capsys):
    code, _, err = run(capsys, "--config", config, "init")
    assert code == 3
    assert err.startswith("error: AlreadyBootstrapped: ") and err.count("\n") == 1


def test_verify_exit_codes(home, capsys):
    path, self_id = home
    code, out, _ = run(capsys, "--home", path, "verify", self_id, "--json")
    assert code == 0 and json.loads(out)["overall"] is True
    assert json.loads(out) == Advocate(path).verify(self_id).to_json()
    assert run(capsys, "--home", path, "anchor", "revoke", self_id)[0] == 0
    code, out, _ = run(capsys, "--home", path, "verify", self_id)
    assert code == 1 and "revoked" in out


def test_verify_code_tracks_overall(home, capsys):
    path, _ = home
    adv = Advocate(path)
    flushed = adv.emit_claim("evidence", "s", {"n": 1}, None, adv.clock.now())
    adv.flush()
    pending = adv.emit_claim("evidence", "s", {"n": 2}, None, adv.clock.now())
    for claim in (flushed, pending):
        code = run(capsys, "--home", path, "verify", claim.id)[0]
        assert code == (0 if adv.verify(claim.id).overall else 1)
    assert run(capsys, "--home", path, "verify", pending.id)[0] == 1


def test_usage_errors(home, tmp_path, capsys):
    path, _ = home
    code, _, err = run(capsys, "--home", path, "verify", "not-an-id")
    assert code == 2 and err.startswith("error: UsageError: ")
    assert run(capsys, "verify", "x")[0] == 2
    assert run(capsys, "--home", path, "frobnicate")[0] == 2
    assert run(capsys, "--config", tmp_path / "missing.json", "init")[0] == 2


def test_uninitialised_home_writes_nothing(tmp_path, capsys):
    empty = tmp_path / "empty"
    for argv in (["run", "--max-seconds", "0"], ["anchor", "flush"], ["verify", "sha2-256:" + "00" * 32]):
        code, _, err = run(capsys, "--home", empty, *argv)
        assert code == 3 and "NotBootstrapped" in err
    assert not empty.exists()


def test_run_against_uninitialised_home_with_config(config, tmp_path, capsys):
    code, _, _ = run(capsys, "--config", config, "run", "--max-seconds", "0")
    assert code == 3
    assert not (tmp_path / "home").exists()


def test_env_overrides(home, config, monkeypatch, capsys):
    path, self_id = home
    monkeypatch.setenv("ADVOCATE_HOME", path)
    assert run(capsys, "verify", self_id)[0] == 0
    monkeypatch.delenv("ADVOCATE_HOME")
    monkeypatch.setenv("ADVOCATE_CONFIG", str(config))
    assert run(capsys, "verify", self_id)[0] == 0


def test_publish_flow(home, tmp_path, capsys):
    path, _ = home
    key_file = tmp_path / "pub.json"
    code, key_id, _ = run(capsys, "key", "new", "--out", key_file)
    assert code == 0
    payload = tmp_path / "payload.json"
    payload.write_text('{"latency_ms": 7}')
    argv = ["--home", path, "publish", "--key-file", key_file, "--kind", "evidence", "--subject", "svc", "--payload-file", payload]
    code, _, err = run(capsys, *argv)
    assert code == 1 and "PublishRejected" in err
    assert run(capsys, "--home", path, "key", "register", "--owner", "alice", "--key-file", key_file)[1].strip() == key_id.strip()
    code, out, _ = run(capsys, *argv, "--json")
    claim_id = json.loads(out)["id"]
    code, out, _ = run(capsys, "--home", path, "inspect", claim_id)
    assert json.loads(out)["issuer_key_id"] == key_id.strip()
    code, out, _ = run(capsys, "--home", path, "anchor", "flush", "--json")
    assert json.loads(out)["leaf_count"] == 2
    assert run(capsys, "--home", path, "anchor", "flush")[2].strip() == "nothing pending"
    assert run(capsys, "--home", path, "verify", claim_id)[0] == 0

    adv = Advocate(path)
    with Gateway(adv) as gw:
        code, out, _ = run(capsys, *argv[2:], "--api", gw.url)
        assert code == 0 and out.strip().startswith("sha2-256:")
        payload.write_text("[1.5]")
        assert run(capsys, *argv[2:], "--api", gw.url)[0] == 2


def test_policy_commands(home, tmp_path, capsys):
    path, _ = home
    adv = Advocate(path)
    for i in range(3):
        adv.emit_claim("evidence", "svc", {"cpu_ms": 10 * i}, None, adv.clock.now())
    policy = tmp_path / "cpu.apl"
    policy.write_text('policy cpu window 3600s select kind == "evidence" aggregate sum(payload.cpu_ms) publish confidential\n')
    code, _, err = run(capsys, "--home", path, "policy", "add", policy)
    assert code == 1 and "PolicyRejected" in err
    assert run(capsys, "--home", path, "policy", "sign", policy)[0] == 0
    assert run(capsys, "--home", path, "policy", "add", policy)[0] == 0
    assert (tmp_path / "home" / "policies" / "cpu.apl.sig").exists()
    code, out, _ = run(capsys, "--home", path, "policy", "run", "--json")
    (claim,) = json.loads(out)
    assert claim["payload"]["groups"] == {"*": 30} and "input_ids" not in claim["payload"]
    policy.write_text(policy.read_text().replace("3600", "60"))
    assert run(capsys, "--home", path, "policy", "add", policy)[0] == 1


def test_peer_commands(home, tmp_path, capsys, peer_pair):
    path, _ = home
    _, (a, gw_a) = peer_pair  # the CLI home shares a seed with the first instance, so pair with the second
    code, out, _ = run(capsys, "--home", path, "peer", "add", gw_a.url)
    assert code == 0 and json.loads(out)["peer_key_id"] == a.instance_key_id
    code, out, _ = run(capsys, "--home", path, "peer", "sync", a.instance_key_id)
    assert json.loads(out)["receipts_imported"] == 1
    code, out, _ = run(capsys, "--home", path, "peer", "list")
    assert [p["peer_url"] for p in json.loads(out)] == [gw_a.url]
    assert run(capsys, "--home", path, "verify", a.self_claim_id)[0] == 0
    assert run(capsys, "--home", path, "peer", "sync", "zNobody")[0] == 3


def test_run_collects_and_anchors(config, home, tmp_path, capsys):
    path, _ = home
    log = tmp_path / "app.log"
    log.write_text('{"n": 1}\n{"n": 2}\n')
    data = json.loads(config.read_text())
    data["sources"] = [{"source_id": "log", "mode": "pull", "kind": "file-tail", "target": str(log), "interval_s": 1}]
    config.write_text(json.dumps(data))
    code, _, err = run(capsys, "--config", config, "run", "--max-seconds", "1.5", "--tick", "0.2")
    assert code == 0 and "listening on http://127.0.0.1:" in err
    adv = Advocate(path)
    evidence = adv.store.claims(kind="evidence")
    assert [c.payload["content"] for c in evidence] == [{"n": 1}, {"n": 2}]
    assert all(adv.verify(c.id).overall for c in evidence)


def test_module_entry_point(home):
    path, self_id = home
    env = {k: v for k, v in os.environ.items() if not k.startswith("ADVOCATE_")}
    done = subprocess.run(
        [sys.executable, "-m", "advocate", "--home", path, "verify", self_id],
        capture_output=True, text=True, env=env, timeout=60,
    )
    assert done.returncode == 0 and "overall" in done.stdout and done.stderr == ""
