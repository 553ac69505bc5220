import base64
from pathlib import Path

import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from afruntime.engine import Runtime
from afruntime.harness.cli import main
from afruntime.harness.metrics import COLUMNS, read_csv
from afruntime.harness.service import ServerThread, create_runtime_app
from afruntime.harness.transforms import apply
from afruntime.policy import PlacementRule

PROCESS = "com.example.myapp.process"
SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


@pytest.fixture
def runner():
    return CliRunner()


def write(tmp_path, text):
    path = tmp_path / "s.scn"
    path.write_text(text)
    return str(path)


def test_run_passing_script_writes_metrics(runner, tmp_path):
    script = write(tmp_path, "set size=4KiB\nat 0 frames 5\nat 0 expect status 200\nat 0 expect chain ok\n")
    out = tmp_path / "m.csv"
    res = runner.invoke(main, ["run", script, "--heap-capacity", "1MiB", "--merge", "off",
                               "--mode", "copy", "--metrics", str(out), "--sample-every", "1"])
    assert res.exit_code == 0, res.output
    assert "[PASS]" in res.output and "frames_ok: 5" in res.output
    rows = read_csv(out)
    assert list(rows[0]) == list(COLUMNS)
    # per frame: Process request + response, Display request + 32-byte ack; COPY counts each twice
    assert int(rows[-1]["bytes_copied"]) == 2 * 5 * (3 * 4096 + 32)


def test_run_failing_script_exits_nonzero(runner, tmp_path):
    script = write(tmp_path, "at 0 frames 1 size=16\nat 0 expect placement process=REMOTE\n")
    res = runner.invoke(main, ["run", script, "--heap-capacity", "1MiB", "--json"])
    assert res.exit_code == 1
    assert '"passed": false' in res.output


def test_run_parse_error(runner, tmp_path):
    script = write(tmp_path, "at 1 frames 1\nat 0 frames 1\n")
    res = runner.invoke(main, ["run", script])
    assert res.exit_code != 0 and "line 2" in res.output


def test_run_rejects_bad_options(runner, tmp_path):
    script = write(tmp_path, "at 0 frames 1\n")
    assert runner.invoke(main, ["run", script, "--heap-capacity", "huge"]).exit_code == 2
    assert runner.invoke(main, ["run", script, "--remote-map", "process"]).exit_code == 2
    assert runner.invoke(main, ["run", script, "--mode", "shm"]).exit_code == 2


def test_run_video_policy_with_remote_map(runner, stub_url):
    res = runner.invoke(main, ["run", str(SCENARIOS / "video_policy.scn"), "--heap-capacity", "8MiB",
                               "--remote-map", f"process={stub_url}/process",
                               "--remote-map", f"display={stub_url}/display"])
    assert res.exit_code == 0, res.output
    assert f"t=1 context -> offloadFunction({PROCESS})" in res.output


def test_catalogue_list_from_script(runner):
    res = runner.invoke(main, ["catalogue", "list", "--script", str(SCENARIOS / "memory.scn")])
    assert res.exit_code == 0
    assert res.output.splitlines() == ["com.example.myapp.display local heap_ref",
                                       "com.example.myapp.process local heap_ref"]


@pytest.fixture
def live_runtime(stub_url):
    rt = Runtime(heap_capacity=1 << 20, timeout=5,
                 rules=[PlacementRule.parse(PROCESS, "network_id = HOME and connected = true")],
                 remote_overrides={PROCESS: stub_url + "/process"})
    rt.function(PROCESS, lambda req: apply("gray", req.body))
    with ServerThread(create_runtime_app(rt)) as srv:
        yield srv.url
    rt.close()


def test_thin_client_round_trip(runner, live_runtime, tmp_path):
    url = ["--url", live_runtime]
    res = runner.invoke(main, ["catalogue", "list", *url])
    assert res.output.strip() == f"{PROCESS} local heap_ref"
    assert runner.invoke(main, ["placements", *url]).output.strip() == f"{PROCESS} LOCAL"

    data = tmp_path / "px"
    data.write_bytes(bytes([30, 60, 90]))
    out = tmp_path / "out"
    res = runner.invoke(main, ["invoke", *url, PROCESS, "--data-file", str(data), "--output", str(out)])
    assert res.exit_code == 0, res.output
    assert out.read_bytes() == bytes([60, 60, 60])

    res = runner.invoke(main, ["context", *url, "network_id=HOME", "connected=true"])
    assert res.output.strip() == f"offloadFunction({PROCESS})"
    assert runner.invoke(main, ["placements", *url]).output.strip() == f"{PROCESS} REMOTE"
    # remote stub answers gray too since effect is in the query
    res = runner.invoke(main, ["invoke", *url, PROCESS + "?effect=gray", "--data-file", str(data),
                               "--output", str(out)])
    assert "REMOTE" in res.output and out.read_bytes() == bytes([60, 60, 60])


def test_thin_client_errors(runner, live_runtime, dead_url):
    res = runner.invoke(main, ["catalogue", "list", "--url", dead_url])
    assert res.exit_code == 1 and "Error" in res.output
    res = runner.invoke(main, ["context", "--url", live_runtime, "altitude=3"])
    assert res.exit_code == 2
    res = runner.invoke(main, ["context", "--url", live_runtime, "battery_level=300"])
    assert res.exit_code == 1 and "422" in res.output


def test_runtime_app_endpoints(stub_url):
    with Runtime(heap_capacity=1 << 20, timeout=5) as rt:
        rt.function(PROCESS, lambda req: req.body[::-1])
        client = TestClient(create_runtime_app(rt))
        assert client.get("/healthz").json()["status"] == "ok"
        r = client.post(f"/invoke/{PROCESS}", content=b"abc").json()
        assert r["status"] == 200 and base64.b64decode(r["body_b64"]) == b"cba"
        assert r["request_id"]
        r = client.post("/invoke/com.example.nobody", content=b"abc").json()
        assert r["status"] == 404
        m = client.get("/metrics").json()
        assert m["dispatched_local"] == 2 and m["heap_used_bytes"] == 0
        assert client.post("/context", json={"cpu_utilization": 2}).status_code == 422
        assert client.post("/context", json={"connected": True}).json() == []
