"""Command line entry point.

``run`` replays a scenario in-process. ``serve-stub`` and ``serve-runtime``
start HTTP services; ``catalogue``, ``placements``, ``context`` and
``invoke`` are thin clients for a running ``serve-runtime``.
"""

from __future__ import annotations

import base64
import json
import sys
from pathlib import Path

import click
import httpx

from ..catalogue import format_record
from ..heap import DEFAULT_CAPACITY
from ..policy import SNAPSHOT_FIELDS, parse_literal
from .metrics import DEFAULT_TICK, write_csv
from .runner import MODES, RunConfig, deploy, run_scenario
from .scenario import ScenarioError, ScenarioScript, load_scenario, parse_size
from .service import create_runtime_app, create_stub_app, serve
from .transforms import TRANSFORMS


class SizeType(click.ParamType):
    name = "size"

    def convert(self, value, param, ctx):
        if isinstance(value, int):
            return value
        try:
            return parse_size(value)
        except ValueError:
            self.fail(f"{value!r} is not a byte count (e.g. 65536, 64KiB, 256MiB)", param, ctx)


def _remote_map(items: tuple[str, ...], script: ScenarioScript | None = None) -> dict[str, str]:
    out = {}
    for item in items:
        addr, sep, url = item.partition("=")
        if not sep or not url:
            raise click.BadParameter(f"expected addr=url, got {item!r}", param_hint="--remote-map")
        out[script.address(addr) if script else addr] = url
    return out


def _load(path: str) -> ScenarioScript:
    try:
        return load_scenario(path)
    except ScenarioError as exc:
        raise click.ClickException(f"{path}: {exc}")


@click.group()
def main():
    """Mobile function runtime: scenario replay, stub service and control clients."""


@main.command()
@click.argument("script", type=click.Path(exists=True, dir_okay=False))
@click.option("--heap-capacity", type=SizeType(), default=DEFAULT_CAPACITY, show_default=True)
@click.option("--mode", type=click.Choice(MODES), default=None,
              help="Force one local stack for the chain functions.")
@click.option("--merge", type=click.Choice(["on", "off"]), default="on", show_default=True)
@click.option("--metrics", "metrics_path", type=click.Path(dir_okay=False), default=None,
              help="Write per-tick metrics as CSV.")
@click.option("--remote-map", multiple=True, metavar="ADDR=URL",
              help="Remote base URL for an address (repeatable).")
@click.option("--tick", type=float, default=DEFAULT_TICK, show_default=True)
@click.option("--sample-every", type=int, default=0, help="Also sample after every N frames.")
@click.option("--timeout", type=float, default=30.0, show_default=True)
@click.option("--realtime", is_flag=True, help="Sleep until each entry's time offset.")
@click.option("--json", "as_json", is_flag=True, help="Print the summary as JSON.")
def run(script, heap_capacity, mode, merge, metrics_path, remote_map, tick, sample_every,
        timeout, realtime, as_json):
    """Replay SCRIPT against a fresh runtime; exit 1 if an assertion fails."""
    parsed = _load(script)
    config = RunConfig(heap_capacity=heap_capacity, mode=mode, merge=merge == "on",
                       remote_map=_remote_map(remote_map, parsed), timeout=timeout, tick=tick,
                       sample_every=sample_every, realtime=realtime)
    try:
        result = run_scenario(parsed, config)
    except ScenarioError as exc:
        raise click.ClickException(f"{script}: {exc}")
    if metrics_path:
        write_csv(result.metrics, metrics_path)
    if as_json:
        click.echo(json.dumps({"passed": result.passed, "summary": result.summary,
                               "assertions": [str(a) for a in result.assertions]}, indent=2))
    else:
        for ev in result.events:
            if ev["event"] == "context":
                click.echo(f"t={ev['at']:g} context -> {', '.join(ev['actions']) or 'no actions'}")
        for a in result.assertions:
            click.echo(str(a))
        for k, v in result.summary.items():
            click.echo(f"{k}: {v}")
    if not result.passed:
        failed = sum(not a.passed for a in result.assertions)
        click.echo(f"{failed} assertion(s) failed", err=True)
        sys.exit(1)


@main.command("serve-stub")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8080, show_default=True)
@click.option("--transform", type=click.Choice(sorted(TRANSFORMS)), default="identity", show_default=True)
def serve_stub(host, port, transform):
    """Run the remote Process/Display stub service."""
    serve(create_stub_app(transform), host, port)


@main.command("serve-runtime")
@click.argument("script", type=click.Path(exists=True, dir_okay=False), required=False)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8081, show_default=True)
@click.option("--heap-capacity", type=SizeType(), default=DEFAULT_CAPACITY, show_default=True)
@click.option("--mode", type=click.Choice(MODES), default=None)
@click.option("--merge", type=click.Choice(["on", "off"]), default="on", show_default=True)
@click.option("--remote-map", multiple=True, metavar="ADDR=URL")
def serve_runtime(script, host, port, heap_capacity, mode, merge, remote_map):
    """Serve a live runtime with the chain functions and SCRIPT's rules.

    Timed entries of SCRIPT are ignored; push context with the ``context`` command.
    """
    parsed = _load(script) if script else ScenarioScript()
    config = RunConfig(heap_capacity=heap_capacity, mode=mode, merge=merge == "on",
                       remote_map=_remote_map(remote_map, parsed))
    deployment = deploy(parsed, config)
    try:
        serve(create_runtime_app(deployment.runtime), host, port)
    finally:
        deployment.close()


# -- thin clients ----------------------------------------------------------------

def _client_call(method: str, url: str, **kwargs) -> httpx.Response:
    try:
        resp = httpx.request(method, url, timeout=30, **kwargs)
    except httpx.HTTPError as exc:
        raise click.ClickException(f"{url}: {exc}")
    if resp.status_code >= 400:
        raise click.ClickException(f"{url}: HTTP {resp.status_code} {resp.text}")
    return resp


URL_OPTION = click.option("--url", default="http://127.0.0.1:8081", show_default=True,
                          help="Base URL of a serve-runtime instance.")


@main.group()
def catalogue():
    """Inspect the function catalogue."""


@catalogue.command("list")
@URL_OPTION
@click.option("--script", type=click.Path(exists=True, dir_okay=False), default=None,
              help="List what SCRIPT would register instead of asking a server.")
def catalogue_list(url, script):
    """One line per live function: address, scope, comm methods."""
    if script:
        deployment = deploy(_load(script), RunConfig())
        try:
            for rec in deployment.runtime.catalogue.records():
                click.echo(format_record(rec))
        finally:
            deployment.close()
        return
    for rec in _client_call("GET", f"{url}/catalogue").json():
        click.echo(f"{rec['address']} {rec['scope']} {','.join(rec['comm_methods'])}")


@main.command()
@URL_OPTION
def placements(url):
    """Current LOCAL/REMOTE placement per function."""
    for addr, placement in _client_call("GET", f"{url}/placements").json().items():
        click.echo(f"{addr} {placement}")


@main.command()
@URL_OPTION
@click.argument("fields", nargs=-1, metavar="FIELD=VALUE...")
def context(url, fields):
    """Push a context snapshot; prints the resulting transition actions."""
    body = {}
    for item in fields:
        key, sep, raw = item.partition("=")
        if not sep or key not in SNAPSHOT_FIELDS:
            raise click.BadParameter(f"expected one of {', '.join(SNAPSHOT_FIELDS)} as key=value, got {item!r}")
        value = parse_literal(raw)
        body[key] = str(value) if key in ("network_id", "location_tag") and value is not None else value
    for action in _client_call("POST", f"{url}/context", json=body).json():
        click.echo(f"{action['kind']}({action['address']})")


@main.command()
@URL_OPTION
@click.argument("target")
@click.option("--data-file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Request body (defaults to stdin when piped, else empty).")
@click.option("--output", type=click.Path(dir_okay=False), default=None,
              help="Write the response body here instead of stdout.")
def invoke(url, target, data_file, output):
    """Send one request to TARGET (an address, optionally with ?query) through the runtime."""
    if data_file:
        data = Path(data_file).read_bytes()
    elif not sys.stdin.isatty():
        data = sys.stdin.buffer.read()
    else:
        data = b""
    out = _client_call("POST", f"{url}/invoke/{target}", content=data).json()
    body = base64.b64decode(out["body_b64"])
    click.echo(f"{out['request_id']} {out['status']} {out['placement']} {len(body)} bytes", err=True)
    if output:
        Path(output).write_bytes(body)
    else:
        sys.stdout.buffer.write(body)


if __name__ == "__main__":
    main()
