"""Network front end: newline-delimited JSON commands over TCP or a unix socket.

One JSON object per line.  Request: ``{"id", "cmd", "user", "args"}``.
Reply: ``{"id", "ok": true, "result", "sim_time"}`` or ``{"id", "ok": false,
"error": {"code", "message"}, "sim_time"}``, with ``sim_time`` in µs.

Commands execute under one service-wide lock, so every command is atomic
against the virtual clock; connections are merely transports.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import logging
import os
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .errors import (
    BadRequest,
    ConfigError,
    Rc3eError,
    UnknownCommand,
    WrongDirection,
    from_code,
)
from .fleet import Fleet
from .hypervisor import (
    Bitfile,
    BitfileKind,
    Hypervisor,
    Lease,
    ServiceModel,
    loopback_bitfile,
    preset_bitfile,
)
from .rc2f import DeviceHandle
from .simclock import LatencyTable

log = logging.getLogger(__name__)

DEFAULT_LISTEN = "127.0.0.1:7733"
ADDR_ENV = "RC3E_ADDR"


@dataclass
class ServiceConfig:
    """Server-side settings, loadable from a JSON file."""

    db_path: Optional[str] = None
    listen: str = DEFAULT_LISTEN
    latency_table: LatencyTable = field(default_factory=LatencyTable)
    link_bandwidth_mbps: Optional[float] = None
    time_scale: float = 0.0  # wall seconds per simulated second; 0 = free-running

    @classmethod
    def from_json(cls, doc: dict) -> "ServiceConfig":
        try:
            table = LatencyTable.from_json(doc.get("latency_table", {}))
            bw = doc.get("link_bandwidth_mbps")
            return cls(
                db_path=doc.get("db_path"),
                listen=str(doc.get("listen", DEFAULT_LISTEN)),
                latency_table=table,
                link_bandwidth_mbps=None if bw is None else float(bw),
                time_scale=float(doc.get("time_scale", 0.0)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config: {exc}") from exc

    @classmethod
    def load(cls, path: str) -> "ServiceConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_json(doc)


def default_fleet() -> Fleet:
    """Two hosts, two VC707-class boards each."""
    fleet = Fleet()
    for host in ("node0", "node1"):
        node = fleet.register_node(host)
        fleet.register_fpga(node, "XC7VX485T")
        fleet.register_fpga(node, "XC7VX485T")
    return fleet


def build_hypervisor(config: ServiceConfig) -> Hypervisor:
    if config.db_path and os.path.exists(config.db_path):
        fleet = Fleet.load(config.db_path)
    else:
        fleet = default_fleet()
        if config.db_path:
            fleet.save(config.db_path)
    return Hypervisor(
        fleet,
        latency=config.latency_table,
        link_bandwidth=config.link_bandwidth_mbps,
    )


def state_digest(hv: Hypervisor) -> str:
    """Digest of all tenant-visible state, excluding the clock.

    Two calls bracketing a read-only command must agree.
    """
    snapshot = {
        "fleet": hv.fleet.to_json(),
        "leases": [hv.leases[k].to_json() for k in sorted(hv.leases)],
        "jobs": [hv.jobs[k].to_json() for k in sorted(hv.jobs)],
        "runtime": {},
    }
    for device_id in sorted(hv.runtime._devices):
        devrt = hv.runtime._devices[device_id]
        slots = []
        for rt in [devrt.full] + list(devrt.slots):
            slots.append(
                {
                    "ucs": rt.ucs,
                    "design": rt.design.name if rt.design else None,
                    "running": rt.running,
                    "loopback": rt.loopback,
                    "in_written": rt.in_written,
                    "out_produced": rt.out_produced,
                    "out_read": rt.out_read,
                    "pending": len(rt.pending),
                }
            )
        snapshot["runtime"][str(device_id)] = {
            "gcs_scratch": devrt.gcs_scratch,
            "slots": slots,
        }
    blob = json.dumps(snapshot, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _b64_decode(text) -> bytes:
    try:
        return base64.b64decode(text or "", validate=True)
    except (binascii.Error, ValueError, TypeError) as exc:
        raise BadRequest(f"bad base64 payload: {exc}") from exc


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


class CommandService:
    """Executes wire commands against one hypervisor, serialized by a lock."""

    def __init__(self, hv: Hypervisor, time_scale: float = 0.0):
        self.hv = hv
        self.time_scale = time_scale
        self._lock = threading.RLock()
        self._handles: dict[int, DeviceHandle] = {}
        self._next_handle = 0

    def execute(self, user: str, cmd: str, args: dict) -> dict:
        if not isinstance(args, dict):
            raise BadRequest("args must be an object")
        method = getattr(self, f"_cmd_{cmd.lower()}", None) if isinstance(cmd, str) else None
        if method is None:
            raise UnknownCommand(f"unknown command: {cmd}")
        with self._lock:
            before = self.hv.clock.now()
            result = method(user, args)
            elapsed = self.hv.clock.now() - before
        if self.time_scale > 0 and elapsed > 0:
            time.sleep(elapsed * self.time_scale / 1e6)
        return result

    def sim_time(self) -> int:
        return self.hv.clock.now()

    # --- helpers -------------------------------------------------------------

    @staticmethod
    def _model(args: dict) -> ServiceModel:
        try:
            return ServiceModel(str(args.get("model", "")).lower())
        except ValueError:
            raise BadRequest(f"unknown service model: {args.get('model')!r}") from None

    @staticmethod
    def _int(args: dict, key: str, default=None) -> int:
        if key not in args:
            if default is None:
                raise BadRequest(f"missing required field: {key}")
            return default
        try:
            return int(args[key])
        except (TypeError, ValueError):
            raise BadRequest(f"field {key} must be an integer") from None

    def _handle(self, args: dict) -> DeviceHandle:
        hid = self._int(args, "handle")
        handle = self._handles.get(hid)
        if handle is None:
            raise BadRequest(f"unknown handle: {hid}")
        return handle

    def _lease_for(self, args: dict) -> Lease:
        return self.hv.lease(self._int(args, "lease_id"))

    def _bitfile(self, args: dict, lease: Optional[Lease] = None, slots: Optional[int] = None,
                 model: Optional[ServiceModel] = None) -> Bitfile:
        doc = args.get("bitfile")
        if isinstance(doc, dict) and "preset" not in doc:
            return Bitfile.from_json(doc)
        if isinstance(doc, dict):
            name = str(doc["preset"])
        elif isinstance(doc, str):
            name = doc
        else:
            raise BadRequest("bitfile must be a descriptor object or a preset name")
        if lease is not None:
            device = self.hv.fleet.device(lease.device_id)
            target = device.model.name
            full = lease.model is ServiceModel.RSAAS
            span = len(lease.slot_indices)
        else:
            target = str(args.get("target_model", "XC7VX485T"))
            full = model is ServiceModel.RSAAS
            span = slots or 1
        kind = BitfileKind.FULL if full else BitfileKind.PARTIAL
        if name == "loopback":
            return loopback_bitfile(target_model=target, kind=kind)
        if name in ("mm16", "mm32"):
            n = 16 if name == "mm16" else 32
            return preset_bitfile(n, cores_hint=1 if full else span, target_model=target, kind=kind)
        raise BadRequest(f"unknown preset: {name}")

    def _stream_slot(self, handle: DeviceHandle, args: dict, want: str) -> int:
        if "endpoint" in args:
            slot, kind = self.hv.runtime.resolve_endpoint(handle, str(args["endpoint"]))
            if kind != want:
                raise WrongDirection(f"endpoint is {kind!r}, operation needs {want!r}")
            return slot
        return self._int(args, "slot", handle.slots[0])

    # --- commands ---------------------------------------------------------------

    def _cmd_alloc(self, user: str, args: dict) -> dict:
        model = self._model(args)
        slots = args.get("slots")
        lease = self.hv.allocate(
            user,
            model,
            slots=None if slots is None else int(slots),
            target_model=args.get("target_model"),
        )
        return lease.to_json()

    def _cmd_release(self, user: str, args: dict) -> dict:
        lease = self._lease_for(args)
        self.hv.release(lease.id)
        self._handles = {k: h for k, h in self._handles.items() if h.lease_id != lease.id}
        return {"released": lease.id}

    def _cmd_configure(self, user: str, args: dict) -> dict:
        lease = self._lease_for(args)
        bitfile = self._bitfile(args, lease=lease)
        receipt = self.hv.configure(lease.id, bitfile, local=bool(args.get("local", False)))
        return {
            "charged_us": receipt.duration_us,
            "completed_at_us": receipt.completed_at,
            "pcie_link_restored": receipt.pcie_link_restored,
        }

    def _cmd_status(self, user: str, args: dict) -> dict:
        lease = self._lease_for(args)
        report = self.hv.device_status(lease.id, local=bool(args.get("local", False)))
        return report.to_json()

    def _cmd_open(self, user: str, args: dict) -> dict:
        lease = self._lease_for(args)
        handle = self.hv.open_device(user, lease.id)
        hid = self._next_handle
        self._next_handle += 1
        self._handles[hid] = handle
        return {
            "handle": hid,
            "device_id": handle.device_id,
            "slots": list(handle.slots),
            "is_full": handle.is_full,
            "endpoints": handle.endpoint_names(),
        }

    def _cmd_ucs_rd(self, user: str, args: dict) -> dict:
        handle = self._handle(args)
        value = self.hv.runtime.ucs_read(
            handle, self._int(args, "slot", handle.slots[0]), self._int(args, "addr")
        )
        return {"value": value}

    def _cmd_ucs_wr(self, user: str, args: dict) -> dict:
        handle = self._handle(args)
        self.hv.runtime.ucs_write(
            handle,
            self._int(args, "slot", handle.slots[0]),
            self._int(args, "addr"),
            self._int(args, "value"),
        )
        return {}

    def _cmd_ctrl(self, user: str, args: dict) -> dict:
        handle = self._handle(args)
        signal = str(args.get("signal", ""))
        slot = args.get("slot")
        self.hv.runtime.control(handle, signal, None if slot is None else int(slot))
        return {}

    def _cmd_put(self, user: str, args: dict) -> dict:
        handle = self._handle(args)
        slot = self._stream_slot(handle, args, "in")
        data = _b64_decode(args.get("data_b64"))
        accepted = self.hv.runtime.fifo_write(handle, slot, data)
        return {"accepted": accepted}

    def _cmd_get(self, user: str, args: dict) -> dict:
        handle = self._handle(args)
        slot = self._stream_slot(handle, args, "out")
        n = self._int(args, "n")
        data = self.hv.runtime.fifo_read(handle, slot, n)
        return {"data_b64": _b64(data)}

    def _cmd_exec(self, user: str, args: dict) -> dict:
        if "service" in args:
            payload = _b64_decode(args.get("input_b64"))
            output, elapsed = self.hv.invoke_service(
                user, str(args["service"]), payload, local=bool(args.get("local", False))
            )
            return {"output_b64": _b64(output), "elapsed_us": elapsed}
        lease = self._lease_for(args)
        ops = args.get("ops")
        if not isinstance(ops, list):
            raise BadRequest("EXEC needs either a service or an ops list")
        handle = self.hv.open_device(user, lease.id)
        started = self.hv.clock.now()
        results = []
        outputs = []
        for op in ops:
            results.append(self._exec_op(handle, lease, op, outputs))
        return {
            "results": results,
            "outputs_b64": outputs,
            "elapsed_us": self.hv.clock.now() - started,
        }

    def _exec_op(self, handle: DeviceHandle, lease: Lease, op, outputs: list) -> dict:
        if not isinstance(op, dict) or "op" not in op:
            raise BadRequest("each EXEC op must be an object with an 'op' field")
        runtime = self.hv.runtime
        name = str(op["op"])
        slot = self._int(op, "slot", handle.slots[0])
        if name == "ucs_wr":
            runtime.ucs_write(handle, slot, self._int(op, "addr"), self._int(op, "value"))
            return {"op": name}
        if name == "ucs_rd":
            value = runtime.ucs_read(handle, slot, self._int(op, "addr"))
            return {"op": name, "value": value}
        if name == "ctrl":
            runtime.control(handle, str(op.get("signal", "")), slot)
            return {"op": name}
        if name == "kernel_start":
            runtime.kernel_start(handle, slot)
            return {"op": name}
        if name == "kernel_stop":
            runtime.kernel_stop(handle, slot)
            return {"op": name}
        if name == "kernel_status":
            report = runtime.kernel_status(handle, slot)
            return {
                "op": name,
                "state": report.state,
                "bytes_in": report.bytes_in,
                "bytes_out": report.bytes_out,
            }
        if name == "put":
            accepted = runtime.fifo_write(handle, slot, _b64_decode(op.get("data_b64")))
            return {"op": name, "accepted": accepted}
        if name == "get":
            data = runtime.fifo_read(handle, slot, self._int(op, "n"))
            outputs.append(_b64(data))
            return {"op": name, "n": len(data), "arrived_at_us": self.hv.clock.now()}
        if name == "status":
            report = self.hv.device_status(lease.id, local=bool(op.get("local", False)))
            return {"op": name, "report": report.to_json()}
        raise BadRequest(f"unknown EXEC op: {name}")

    def _cmd_submit(self, user: str, args: dict) -> dict:
        model = self._model(args)
        slots = self._int(args, "slots", 1)
        bitfile = self._bitfile(args, slots=slots, model=model)
        payload = _b64_decode(args.get("input_b64"))
        job_id = self.hv.submit_job(
            user, model, slots, bitfile, payload, input_ref=str(args.get("input_ref", ""))
        )
        return {"job_id": job_id, "state": self.hv.job(job_id).state.value}

    def _cmd_jobs(self, user: str, args: dict) -> dict:
        if args.get("wait"):
            self.hv.wait_for_jobs()
        with_output = bool(args.get("with_output", False))
        if "job_id" in args:
            return {"job": self.hv.job(self._int(args, "job_id")).to_json(with_output)}
        return {"jobs": [j.to_json(with_output) for j in self.hv.job_list()]}

    def _cmd_list(self, user: str, args: dict) -> dict:
        devices = []
        for device in self.hv.fleet.devices():
            devices.append(
                {
                    "device_id": device.id,
                    "node_id": device.node_id,
                    "hostname": self.hv.fleet.node(device.node_id).hostname,
                    "model": device.model.name,
                    "mode": device.mode.value,
                    "power": device.power.value,
                    "free_slots": device.free_slot_count(),
                    "slot_states": [s.state.value for s in device.slots],
                }
            )
        return {
            "devices": devices,
            "leases": [self.hv.leases[k].to_json() for k in sorted(self.hv.leases)],
        }


# --- transport ---------------------------------------------------------------------


def parse_listen(listen: str):
    """'host:port' for TCP, or 'unix:/path/to.sock'."""
    if listen.startswith("unix:"):
        return ("unix", listen[len("unix:") :])
    host, sep, port = listen.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"listen must be host:port or unix:/path, got {listen!r}")
    return ("tcp", host or "127.0.0.1", int(port))


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self):
        service: CommandService = self.server.service  # type: ignore[attr-defined]
        for raw in self.rfile:
            line = raw.strip()
            if not line:
                continue
            reply = {"id": None, "ok": False}
            try:
                doc = json.loads(line.decode("utf-8"))
                if not isinstance(doc, dict):
                    raise BadRequest("request must be a JSON object")
                reply["id"] = doc.get("id")
                user = str(doc.get("user") or "anonymous")
                result = service.execute(user, doc.get("cmd", ""), doc.get("args") or {})
                reply.update(ok=True, result=result)
            except json.JSONDecodeError as exc:
                reply["error"] = {"code": BadRequest.code, "message": f"bad JSON: {exc}"}
            except Rc3eError as exc:
                reply["error"] = {"code": exc.code, "message": exc.message}
            except Exception as exc:  # keep the connection alive on server bugs
                log.exception("command failed unexpectedly")
                reply["error"] = {"code": "internal", "message": str(exc)}
            reply["sim_time"] = service.sim_time()
            payload = (json.dumps(reply) + "\n").encode("utf-8")
            try:
                self.wfile.write(payload)
                self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError):
                return


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


if hasattr(socketserver, "ThreadingUnixStreamServer"):

    class _UnixServer(socketserver.ThreadingUnixStreamServer):
        daemon_threads = True


def make_server(service: CommandService, listen: str):
    """Bind a line-protocol server; caller drives serve_forever/shutdown."""
    kind, *rest = parse_listen(listen)
    if kind == "unix":
        path = rest[0]
        if os.path.exists(path):
            os.unlink(path)
        server = _UnixServer(path, _LineHandler)
    else:
        host, port = rest
        server = _TcpServer((host, port), _LineHandler)
    server.service = service  # type: ignore[attr-defined]
    return server


class ServerThread:
    """In-process server for tests and demos."""

    def __init__(self, service: CommandService, listen: str = "127.0.0.1:0"):
        self.server = make_server(service, listen)
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def address(self) -> str:
        addr = self.server.server_address
        if isinstance(addr, tuple):
            return f"{addr[0]}:{addr[1]}"
        return f"unix:{addr}"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
        self._thread.join(timeout=5)


class Rc3eClient:
    """Line-protocol client; address from arg, $RC3E_ADDR, or the default."""

    def __init__(self, address: Optional[str] = None, user: str = "cli", timeout: float = 60.0):
        self.address = address or os.environ.get(ADDR_ENV) or DEFAULT_LISTEN
        self.user = user
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None
        self._file = None
        self._next_id = 0
        self.last_sim_time = 0

    def connect(self) -> "Rc3eClient":
        if self._sock is not None:
            return self
        kind, *rest = parse_listen(self.address)
        if kind == "unix":
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.settimeout(self.timeout)
            sock.connect(rest[0])
        else:
            host, port = rest
            sock = socket.create_connection((host, port), timeout=self.timeout)
        self._sock = sock
        self._file = sock.makefile("rwb")
        return self

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()

    def request(self, cmd: str, args: Optional[dict] = None) -> dict:
        self.connect()
        req_id = self._next_id
        self._next_id += 1
        doc = {"id": req_id, "cmd": cmd, "user": self.user, "args": args or {}}
        self._file.write((json.dumps(doc) + "\n").encode("utf-8"))
        self._file.flush()
        raw = self._file.readline()
        if not raw:
            raise ConnectionError("server closed the connection")
        reply = json.loads(raw.decode("utf-8"))
        self.last_sim_time = int(reply.get("sim_time", self.last_sim_time))
        if reply.get("ok"):
            return reply.get("result", {})
        err = reply.get("error") or {}
        raise from_code(str(err.get("code", "error")), str(err.get("message", "")))
