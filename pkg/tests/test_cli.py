from __future__ import annotations

import json

import pytest
from fastapi.testclient import TestClient

from conftest import OWNER_KEY
from microdb import cli
from microdb.engine import Microdatabase
from microdb.errors import InvalidConfig
from microdb.service.app import create_app
from microdb.service.client import Client


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["--help"])
    assert ei.value.code == 0
    assert "sim" in capsys.readouterr().out


def test_usage_error_exits_two(capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["frobnicate"])
    assert ei.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_sim_run_missing_file_exits_one(capsys, tmp_path):
    code, _, err = run(capsys, "sim", "run", str(tmp_path / "missing.json"))
    assert code == 1 and "missing.json" in err and err.startswith("error: ")


def test_sim_run_bundled_scenario_writes_report(capsys, tmp_path):
    out = tmp_path / "r.json"
    code, stdout, _ = run(capsys, "sim", "run", "outage-heal", "--out", str(out))
    assert code == 0
    assert stdout.splitlines()[0] == "scenario\toutage-heal\tpass"
    assert json.loads(out.read_text())["passed"] is True
    code, stdout, _ = run(capsys, "sim", "report", str(out))
    assert code == 0 and "counter\tsync_rounds\t" in stdout
    assert sum(line.startswith("hash\t") for line in stdout.splitlines()) == 8  # 4 replicas x (temp, registry)


def test_sim_run_failing_scenario_exits_one(capsys, tmp_path):
    out = tmp_path / "r.json"
    code, stdout, _ = run(capsys, "sim", "run", "policy-blocked", "--out", str(out))
    assert code == 1
    assert any(line.startswith("warning\t") and "policy-blocked: store 'secret'" in line for line in stdout.splitlines())
    assert run(capsys, "sim", "report", str(out))[0] == 1


def test_sim_report_bad_json(capsys, tmp_path):
    p = tmp_path / "r.json"
    p.write_text("{")
    code, _, err = run(capsys, "sim", "report", str(p))
    assert code == 1 and "parse-error" in err


def test_config_precedence(tmp_path, monkeypatch):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"data_dir": "/from/file", "replica_id": "file-r", "url": "http://file"}))
    parser = cli.build_parser()
    monkeypatch.delenv("MICRODB_DATA_DIR", raising=False)
    cfg = cli.load_config(parser.parse_args(["--config", str(conf), "registry-log"]))
    assert (cfg.data_dir, cfg.replica_id, cfg.url) == ("/from/file", "file-r", "http://file")
    monkeypatch.setenv("MICRODB_DATA_DIR", "/from/env")
    cfg = cli.load_config(parser.parse_args(["--config", str(conf), "registry-log"]))
    assert cfg.data_dir == "/from/env"
    cfg = cli.load_config(parser.parse_args(["--config", str(conf), "--data-dir", "/from/flag", "registry-log"]))
    assert cfg.data_dir == "/from/flag"
    monkeypatch.setenv("MICRODB_CONFIG", str(conf))
    assert cli.load_config(parser.parse_args(["registry-log"])).replica_id == "file-r"


def test_flags_before_and_after_subcommand():
    parser = cli.build_parser()
    assert cli.load_config(parser.parse_args(["--url", "http://x", "sync", "status"])).url == "http://x"
    assert cli.load_config(parser.parse_args(["sync", "status", "--url", "http://y"])).url == "http://y"


def test_bad_config_file_is_domain_error(capsys, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"nope": 1}))
    code, _, err = run(capsys, "--config", str(conf), "registry-log")
    assert code == 1 and "unknown config keys" in err


def test_grant_parsing():
    assert cli._grant("interface=exchange-read,store=temp,lo=0,hi=10") == {
        "interface": "exchange-read", "store": "temp", "range": [0, 10], "policy": None}
    with pytest.raises(InvalidConfig):
        cli._grant("store=temp")


@pytest.fixture
def live(monkeypatch):
    db = Microdatabase("r1", "local", owner_key=OWNER_KEY)
    token = db.issue_token("owner").decode()

    def client(cfg):
        c = Client("http://testserver")
        c.http = TestClient(create_app(db), headers={"Authorization": f"Bearer {token}"})
        return c

    monkeypatch.setattr(cli, "_client", client)
    yield db
    db.close()


def test_client_commands_against_service(capsys, live, tmp_path):
    m = tmp_path / "m.json"
    m.write_text(json.dumps({"manifest_id": "plant", "version": 1, "stores": [{"name": "temp"}]}))
    assert run(capsys, "publish", str(m))[1] == "r1\t1\tplant\t1\towner\n"
    assert run(capsys, "deploy", "plant", "1")[1] == "created\tstores\ttemp\n"
    assert run(capsys, "deploy", "plant", "1")[1] == "noop\tplant\t1\nskipped\tstores\ttemp\n"
    assert run(capsys, "registry-log")[1] == "r1\t1\tplant\t1\towner\n"
    assert run(capsys, "admin", "create-store", "flow", "--mutable")[1] == "created\tflow\tmutable\n"
    assert run(capsys, "admin", "define-role", "reader", "--grant", "interface=exchange-read,store=flow")[1] \
        == "role\treader\t1\n"
    assert run(capsys, "admin", "provision", "bob", "reader")[1] == "provisioned\tbob\treader\n"
    assert run(capsys, "sync", "link", "l1", "peer", "regional", "--stores", "temp")[1] == "link\tl1\tpeer\tregional\n"
    assert run(capsys, "sync", "status")[1].startswith("l1\tpeer\tregional\ttemp\tmanual\t")
    assert run(capsys, "admin", "drop-store", "flow")[1] == "dropped\tflow\n"
    assert "flow" not in live.stores
    live.append("temp", 1, 1.0)
    code, out, _ = run(capsys, "tail", "temp", "--timeout", "0.5")
    assert code == 0 and out == ""
    assert run(capsys, "ingest-status")[1] == ""


def test_domain_error_exits_one(capsys, live):
    code, _, err = run(capsys, "deploy", "ghost", "1")
    assert code == 1 and err.startswith("error: not-found")
    code, _, err = run(capsys, "sync", "run", "nolink")
    assert code == 1 and err.startswith("error: ")


def test_publish_unreadable_manifest(capsys, live, tmp_path):
    code, _, err = run(capsys, "publish", str(tmp_path / "nope.json"))
    assert code == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{\n,")
    code, _, err = run(capsys, "publish", str(bad))
    assert code == 1 and "bad.json:2:" in err


def test_token_file_missing_is_error(capsys, tmp_path):
    code, _, err = run(capsys, "--token-file", str(tmp_path / "t"), "registry-log")
    assert code == 1 and "token file" in err


def test_unreachable_service_is_transport_down(capsys, tmp_path):
    code, _, err = run(capsys, "--data-dir", str(tmp_path), "--url", "http://127.0.0.1:9", "registry-log")
    assert code == 1 and "transport-down" in err
