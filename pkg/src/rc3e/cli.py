"""Command-line front end for the service.

Talks the line protocol to a running server (``rc3e serve``); the address
comes from --addr, $RC3E_ADDR, or the default.  Exit codes: 0 success,
1 service or connection error, 2 usage error.
"""

from __future__ import annotations

import argparse
import base64
import json
import logging
import sys
from typing import Optional

from .errors import Rc3eError
from .kernels import MatrixBatch
from .middleware import (
    ADDR_ENV,
    DEFAULT_LISTEN,
    CommandService,
    Rc3eClient,
    ServiceConfig,
    build_hypervisor,
    make_server,
)

log = logging.getLogger(__name__)


def _add_client_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--addr", default=None, help=f"server address (default ${ADDR_ENV} or {DEFAULT_LISTEN})")
    p.add_argument("--user", default="cli", help="tenant name commands run as")
    p.add_argument("--json", action="store_true", help="print the raw result as JSON")


def _bitfile_args(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--bitfile", metavar="FILE", help="bitfile descriptor JSON")
    group.add_argument("--preset", choices=["mm16", "mm32", "loopback"], help="calibrated core")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rc3e", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("alloc", help="take out a lease")
    _add_client_args(p)
    p.add_argument("--model", required=True, choices=["rsaas", "raaas", "baaas"])
    p.add_argument("--slots", type=int, default=None, help="region count for slot leases (1, 2, or 4)")
    p.add_argument("--target-model", default=None, help="restrict placement to one device model")

    p = sub.add_parser("release", help="return a lease")
    _add_client_args(p)
    p.add_argument("lease_id", type=int)

    p = sub.add_parser("configure", help="load a design onto a lease")
    _add_client_args(p)
    p.add_argument("lease_id", type=int)
    _bitfile_args(p)
    p.add_argument("--local", action="store_true", help="charge the same-host latency")

    p = sub.add_parser("status", help="show a leased device's occupancy")
    _add_client_args(p)
    p.add_argument("lease_id", type=int)
    p.add_argument("--local", action="store_true")

    p = sub.add_parser("exec", help="run register/stream ops or a curated service")
    _add_client_args(p)
    p.add_argument("--lease", type=int, default=None, help="lease to run ops against")
    p.add_argument("--script", metavar="FILE", default=None, help="JSON list of ops")
    p.add_argument("--service", default=None, help="curated service name (e.g. matmul16)")
    p.add_argument("--input", metavar="FILE", default=None, help="payload; replaces \"$INPUT\" in scripts")
    p.add_argument("--output", metavar="FILE", default=None, help="write returned bytes here")
    p.add_argument("--local", action="store_true")

    p = sub.add_parser("submit", help="queue a batch job")
    _add_client_args(p)
    p.add_argument("--model", default="baaas", choices=["rsaas", "raaas", "baaas"])
    p.add_argument("--slots", type=int, default=1)
    _bitfile_args(p)
    p.add_argument("--input", metavar="FILE", required=True)
    p.add_argument("--input-ref", default="", help="label stored with the job")

    p = sub.add_parser("jobs", help="list jobs or fetch one")
    _add_client_args(p)
    p.add_argument("job_id", type=int, nargs="?", default=None)
    p.add_argument("--wait", action="store_true", help="advance virtual time until all jobs settle")
    p.add_argument("--output", metavar="FILE", default=None, help="write a finished job's output bytes")

    p = sub.add_parser("list", help="show devices and leases")
    _add_client_args(p)

    p = sub.add_parser("put", help="write bytes into a slot's input stream")
    _add_client_args(p)
    p.add_argument("lease_id", type=int)
    p.add_argument("--slot", type=int, default=None)
    p.add_argument("--endpoint", default=None, help="endpoint name instead of a slot index")
    p.add_argument("--input", metavar="FILE", required=True)

    p = sub.add_parser("get", help="read bytes from a slot's output stream")
    _add_client_args(p)
    p.add_argument("lease_id", type=int)
    p.add_argument("--slot", type=int, default=None)
    p.add_argument("--endpoint", default=None)
    p.add_argument("-n", "--bytes", dest="n", type=int, required=True)
    p.add_argument("--output", metavar="FILE", default=None)

    p = sub.add_parser("gen-batch", help="generate a matrix operand payload locally")
    p.add_argument("--n", type=int, default=16, help="matrix size")
    p.add_argument("--count", type=int, required=True, help="operand pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", metavar="FILE", required=True)

    p = sub.add_parser("serve", help="run the service")
    p.add_argument("--config", metavar="FILE", default=None)
    p.add_argument("--db", default=None, help="device database path (created if missing)")
    p.add_argument("--listen", default=None, help="host:port or unix:/path")
    p.add_argument("--time-scale", type=float, default=None, help="wall seconds per simulated second")
    return parser


def _client(ns) -> Rc3eClient:
    return Rc3eClient(address=ns.addr, user=ns.user)


def _emit(ns, result: dict, human: str = "") -> None:
    if ns.json:
        print(json.dumps(result, indent=2, sort_keys=True))
    elif human:
        print(human)


def _read_file(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write_file(path: Optional[str], data: bytes) -> None:
    if path:
        with open(path, "wb") as fh:
            fh.write(data)


def _bitfile_arg(ns) -> object:
    if ns.bitfile:
        return json.loads(_read_file(ns.bitfile).decode("utf-8"))
    return ns.preset


def _run_alloc(ns) -> int:
    with _client(ns) as client:
        args = {"model": ns.model}
        if ns.slots is not None:
            args["slots"] = ns.slots
        if ns.target_model:
            args["target_model"] = ns.target_model
        result = client.request("ALLOC", args)
    _emit(
        ns,
        result,
        f"lease {result['lease_id']}: device {result['device_id']} "
        f"slots {result['slot_indices']} ({result['model']})",
    )
    return 0


def _run_release(ns) -> int:
    with _client(ns) as client:
        result = client.request("RELEASE", {"lease_id": ns.lease_id})
    _emit(ns, result, f"released lease {result['released']}")
    return 0


def _run_configure(ns) -> int:
    with _client(ns) as client:
        result = client.request(
            "CONFIGURE",
            {"lease_id": ns.lease_id, "bitfile": _bitfile_arg(ns), "local": ns.local},
        )
    _emit(
        ns,
        result,
        f"configured in {result['charged_us']} us "
        f"(virtual time now {result['completed_at_us']} us)",
    )
    return 0


def _run_status(ns) -> int:
    with _client(ns) as client:
        result = client.request("STATUS", {"lease_id": ns.lease_id, "local": ns.local})
    lines = [
        f"device {result['device_id']} ({result['model']}) on node {result['node_id']}: "
        f"mode={result['mode']} power={result['power']}"
    ]
    for slot in result["slots"]:
        design = f" design={slot['design']}" if slot["design"] else ""
        lease = f" lease={slot['lease_id']}" if slot["lease_id"] is not None else ""
        lines.append(f"  v{slot['index']}: {slot['state']}{lease}{design}")
    if result["full_design"]:
        lines.append(f"  full design: {result['full_design']}")
    lines.append(f"  charged {result['charged_us']} us")
    _emit(ns, result, "\n".join(lines))
    return 0


def _run_exec(ns) -> int:
    if (ns.script is None) == (ns.service is None):
        print("exec needs exactly one of --script or --service", file=sys.stderr)
        return 2
    payload = _read_file(ns.input) if ns.input else b""
    with _client(ns) as client:
        if ns.service:
            result = client.request(
                "EXEC",
                {
                    "service": ns.service,
                    "input_b64": base64.b64encode(payload).decode("ascii"),
                    "local": ns.local,
                },
            )
            data = base64.b64decode(result.get("output_b64", ""))
            _write_file(ns.output, data)
            _emit(
                ns,
                result,
                f"{len(data)} output bytes in {result['elapsed_us']} us"
                + (f" -> {ns.output}" if ns.output else ""),
            )
            return 0
        if ns.lease is None:
            print("exec --script needs --lease", file=sys.stderr)
            return 2
        ops = json.loads(_read_file(ns.script).decode("utf-8"))
        if ns.input:
            encoded = base64.b64encode(payload).decode("ascii")
            for op in ops:
                if isinstance(op, dict) and op.get("data_b64") == "$INPUT":
                    op["data_b64"] = encoded
        result = client.request("EXEC", {"lease_id": ns.lease, "ops": ops})
        data = b"".join(base64.b64decode(x) for x in result.get("outputs_b64", []))
        _write_file(ns.output, data)
        lines = [f"{len(result['results'])} ops in {result['elapsed_us']} us"]
        for entry in result["results"]:
            lines.append(f"  {json.dumps(entry, sort_keys=True)}")
        if ns.output:
            lines.append(f"wrote {len(data)} bytes -> {ns.output}")
        _emit(ns, result, "\n".join(lines))
        return 0


def _run_submit(ns) -> int:
    payload = _read_file(ns.input)
    with _client(ns) as client:
        result = client.request(
            "SUBMIT",
            {
                "model": ns.model,
                "slots": ns.slots,
                "bitfile": _bitfile_arg(ns),
                "input_b64": base64.b64encode(payload).decode("ascii"),
                "input_ref": ns.input_ref or ns.input,
            },
        )
    _emit(ns, result, f"job {result['job_id']} {result['state']}")
    return 0


def _run_jobs(ns) -> int:
    with _client(ns) as client:
        args = {"wait": ns.wait, "with_output": bool(ns.output)}
        if ns.job_id is not None:
            args["job_id"] = ns.job_id
        result = client.request("JOBS", args)
    if "job" in result:
        rows = [result["job"]]
    else:
        rows = result["jobs"]
    lines = []
    for job in rows:
        span = f"{job['slots']} slot(s)" if job["model"] != "rsaas" else "whole device"
        extra = f" error={job['error']}" if job.get("error") else ""
        lines.append(
            f"job {job['job_id']} [{job['state']}] {job['bitfile']} on {span}"
            f" submitted={job['submitted_at']}us"
            + (f" ended={job['ended_at']}us" if job.get("ended_at") is not None else "")
            + extra
        )
    if ns.output and rows and rows[0].get("output_b64"):
        _write_file(ns.output, base64.b64decode(rows[0]["output_b64"]))
        lines.append(f"wrote output -> {ns.output}")
    _emit(ns, result, "\n".join(lines) if lines else "no jobs")
    return 0


def _run_list(ns) -> int:
    with _client(ns) as client:
        result = client.request("LIST", {})
    lines = []
    for dev in result["devices"]:
        lines.append(
            f"fpga{dev['device_id']} {dev['model']} on {dev['hostname']}: "
            f"mode={dev['mode']} power={dev['power']} slots={'/'.join(dev['slot_states'])}"
        )
    for lease in result["leases"]:
        lines.append(
            f"lease {lease['lease_id']} ({lease['model']}) user={lease['user']} "
            f"device={lease['device_id']} slots={lease['slot_indices']}"
        )
    _emit(ns, result, "\n".join(lines) if lines else "fleet is empty")
    return 0


def _open_handle(client: Rc3eClient, lease_id: int) -> int:
    return client.request("OPEN", {"lease_id": lease_id})["handle"]


def _run_put(ns) -> int:
    data = _read_file(ns.input)
    with _client(ns) as client:
        handle = _open_handle(client, ns.lease_id)
        args = {"handle": handle, "data_b64": base64.b64encode(data).decode("ascii")}
        if ns.endpoint:
            args["endpoint"] = ns.endpoint
        elif ns.slot is not None:
            args["slot"] = ns.slot
        result = client.request("PUT", args)
    _emit(ns, result, f"accepted {result['accepted']} bytes")
    return 0


def _run_get(ns) -> int:
    with _client(ns) as client:
        handle = _open_handle(client, ns.lease_id)
        args = {"handle": handle, "n": ns.n}
        if ns.endpoint:
            args["endpoint"] = ns.endpoint
        elif ns.slot is not None:
            args["slot"] = ns.slot
        result = client.request("GET", args)
        data = base64.b64decode(result["data_b64"])
    _write_file(ns.output, data)
    human = f"read {len(data)} bytes" + (f" -> {ns.output}" if ns.output else "")
    if not ns.output and not ns.json:
        sys.stdout.buffer.write(data)
        return 0
    _emit(ns, result, human)
    return 0


def _run_gen_batch(ns) -> int:
    batch = MatrixBatch.generate(ns.n, ns.count, ns.seed)
    _write_file(ns.output, batch.payload)
    print(f"{batch.count} pairs of {ns.n}x{ns.n} -> {ns.output} ({len(batch.payload)} bytes)")
    return 0


def _run_serve(ns) -> int:
    if ns.config:
        config = ServiceConfig.load(ns.config)
    else:
        config = ServiceConfig()
    if ns.db is not None:
        config.db_path = ns.db
    if ns.listen is not None:
        config.listen = ns.listen
    if ns.time_scale is not None:
        config.time_scale = ns.time_scale
    hv = build_hypervisor(config)
    service = CommandService(hv, time_scale=config.time_scale)
    server = make_server(service, config.listen)
    addr = server.server_address
    shown = f"{addr[0]}:{addr[1]}" if isinstance(addr, tuple) else f"unix:{addr}"
    print(f"rc3e service on {shown} ({len(hv.fleet.fpgas)} devices)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


_RUNNERS = {
    "alloc": _run_alloc,
    "release": _run_release,
    "configure": _run_configure,
    "status": _run_status,
    "exec": _run_exec,
    "submit": _run_submit,
    "jobs": _run_jobs,
    "list": _run_list,
    "put": _run_put,
    "get": _run_get,
    "gen-batch": _run_gen_batch,
    "serve": _run_serve,
}


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    ns = build_parser().parse_args(argv)
    try:
        return _RUNNERS[ns.command](ns)
    except Rc3eError as exc:
        print(f"error [{exc.code}]: {exc.message}", file=sys.stderr)
        return 1
    except (ConnectionError, OSError) as exc:
        print(f"connection error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
