import http.client
import json
import signal
import subprocess
import sys
import threading
import time

import pytest

from rmaws.cli import bundled_scenarios, main


def run_cli(*argv):
    return main(list(argv))


def _free_port() -> int:
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _wait_for_health(port: int, timeout_s: float = 10.0) -> None:
    deadline = time.time() + timeout_s
    while time.time() < deadline:
        try:
            conn = http.client.HTTPConnection("127.0.0.1", port, timeout=1.0)
            conn.request("GET", "/healthz")
            if conn.getresponse().status == 200:
                conn.close()
                return
        except OSError:
            time.sleep(0.05)
    raise TimeoutError("server did not come up")


class TestSim:
    def test_bundled_happy_path_exits_zero(self, tmp_path, capsys):
        out = tmp_path / "trace.jsonl"
        code = run_cli("sim", "happy_path", "--out", str(out))
        assert code == 0
        assert "all invariants hold" in capsys.readouterr().out
        lines = out.read_text().strip().splitlines()
        assert json.loads(lines[-1])["kind"] == "summary"

    def test_timeout_recovery_uses_push(self, tmp_path, capsys):
        out = tmp_path / "trace.jsonl"
        code = run_cli("sim", "timeout_recovery", "--out", str(out))
        assert code == 0
        assert "via Push" in capsys.readouterr().out
        events = [json.loads(line) for line in out.read_text().strip().splitlines()]
        assert any(e.get("kind") == "push_deliver" for e in events)

    def test_offline_replay_uses_cache(self, tmp_path, capsys):
        code = run_cli("sim", "offline_replay", "--out", str(tmp_path / "t.jsonl"))
        assert code == 0
        assert "via CacheReplay" in capsys.readouterr().out

    def test_missing_scenario_exits_two(self, tmp_path, capsys):
        assert run_cli("sim", "no_such_scenario", "--out", str(tmp_path / "t")) == 2

    def test_malformed_scenario_exits_two(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"sends": [{"service": "ghost", "t": 1}]}')
        assert run_cli("sim", str(bad), "--out", str(tmp_path / "t")) == 2

    def test_break_dedup_flags_violation(self, tmp_path, capsys):
        spec = {
            "name": "dup",
            "end_time_ms": 20000,
            "services": [{"name": "svc", "delay_ms": 50, "output_size": 16}],
            "sends": [
                {"t": 100, "client": "c1", "service": "svc", "payload_size": 4,
                 "http_timeout_ms": 200, "push_wait_ms": 300, "max_trials": 3},
                {"t": 100, "client": "c1", "service": "svc", "payload_size": 4,
                 "http_timeout_ms": 200, "push_wait_ms": 300, "max_trials": 3}
            ],
            "faults": [{"kind": "drop_http_response", "send": 0, "trial": 1}]
        }
        path = tmp_path / "dup.json"
        path.write_text(json.dumps(spec))
        code = run_cli("sim", str(path), "--out", str(tmp_path / "t"), "--break-dedup")
        assert code == 1
        assert "AtMostOnce" in capsys.readouterr().err


class TestEnumerate:
    def test_bundled_template_is_clean(self, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = run_cli("enumerate", "atmostonce_template", "--out", str(out))
        assert code == 0
        report = json.loads(out.read_text())
        assert report["total_scenarios"] == 16
        assert report["violation_count"] == 0
        assert "16 scenario(s)" in capsys.readouterr().out

    def test_break_dedup_exits_one(self, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = run_cli("enumerate", "atmostonce_template", "--out", str(out),
                       "--break-dedup")
        assert code == 1
        report = json.loads(out.read_text())
        assert report["violation_count"] > 0
        # the report command can render it back
        assert run_cli("report", str(out)) == 0

    def test_missing_template(self, tmp_path):
        assert run_cli("enumerate", "nope", "--out", str(tmp_path / "r")) == 2


class TestBenchAndReport:
    def test_bench_desk_scale(self, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = run_cli("bench", "--payload-sizes", "25,55", "--response-sizes", "5,191745",
                       "--repeats", "2", "--out", str(out))
        assert code == 0
        report = json.loads(out.read_text())
        rows = {(r["payload_size"], r["response_size"]): r for r in report["rows"]}
        assert rows[(25, 5)]["request_bytes_rmaws"] == 251
        assert rows[(55, 5)]["request_bytes_rmaws"] == 281
        assert all(r["overhead_bytes"] == 226 for r in report["rows"])
        assert all(r["response_bytes_direct"] == r["response_bytes_rmaws"]
                   for r in report["rows"])
        text = capsys.readouterr().out
        # text table and JSON carry identical numbers
        assert "251" in text and "281" in text
        for r in report["rows"]:
            assert f"{r['time_ms_rmaws_median']:.3f}" in text
        assert run_cli("report", str(out)) == 0

    def test_report_rejects_garbage(self, tmp_path):
        bad = tmp_path / "r.json"
        bad.write_text("{}")
        assert run_cli("report", str(bad)) == 2
        assert run_cli("report", str(tmp_path / "missing.json")) == 2


class TestServeConfig:
    def test_bad_config_path_exits_two(self, capsys):
        assert run_cli("serve", "--config", "/nonexistent/config.json") == 2

    def test_sigterm_drains_inflight_then_exits_zero(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        port = _free_port()
        cfg.write_text(json.dumps({
            "bind": f"127.0.0.1:{port}",
            "auth_token": "cli-token",
            "services": [{"name": "slow", "delay_ms": 600, "output_size": 128}],
        }))
        proc = subprocess.Popen(
            [sys.executable, "-m", "rmaws.cli", "serve", "--config", str(cfg)],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
        try:
            _wait_for_health(port)
            from rmaws.client import Client, SendOptions
            result = {}

            def sender():
                client = Client("127.0.0.1", port, auth_token="cli-token")
                result["outcome"] = client.send("slow", b"p", SendOptions(
                    http_timeout_ms=10_000, auth_token="cli-token"))

            t = threading.Thread(target=sender)
            t.start()
            time.sleep(0.2)  # the slow request is in flight
            proc.send_signal(signal.SIGTERM)
            t.join(timeout=10)
            assert result["outcome"].body is not None
            assert len(result["outcome"].body) == 128
            assert proc.wait(timeout=10) == 0
        finally:
            proc.kill()

    def test_bundled_listing(self):
        names = bundled_scenarios()
        assert "happy_path" in names
        assert "timeout_recovery" in names
        assert "atmostonce_template" in names


class TestConfigLoading:
    def test_file_and_env_overrides(self, tmp_path, monkeypatch):
        from rmaws.server.http import ServerConfig
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "bind": "127.0.0.1:8123",
            "auth_token": "from-file",
            "cache_ttl_ms": 1000,
            "services": [{"name": "orders", "delay_ms": 5, "output_size": 64}],
        }))
        cfg = ServerConfig.load(str(cfg_path), env={})
        assert cfg.bind_port == 8123
        assert cfg.auth_token == "from-file"
        assert cfg.cache_ttl_ms == 1000
        assert cfg.services[0]["name"] == "orders"

        cfg = ServerConfig.load(str(cfg_path), env={
            "RMAWS_BIND": "0.0.0.0:9999",
            "RMAWS_AUTH_TOKEN": "from-env",
            "RMAWS_CACHE_TTL_MS": "5000",
        })
        assert (cfg.bind_host, cfg.bind_port) == ("0.0.0.0", 9999)
        assert cfg.auth_token == "from-env"
        assert cfg.cache_ttl_ms == 5000
