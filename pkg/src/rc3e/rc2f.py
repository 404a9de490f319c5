"""Per-device runtime: register spaces, FIFO streams, and core lifecycle.

Every device exposes one global constant space (gcs) and, per virtual FPGA,
a user constant space (ucs) plus an input/output FIFO pair.  Data written to
an input FIFO is consumed by the slot's core; results appear on the output
FIFO once the corresponding bytes have crossed the shared host link, which
the transfer engine models under contention.

Register accesses cost real time: gcs accesses at a flat rate, ucs accesses
scaled by how many virtual FPGAs the device currently hosts.  FIFO data ops
cost no command time; their time is the transfer itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional

from .errors import (
    EmptyQueueBeforePredicate,
    NotConfigured,
    OutOfRange,
    PermissionDenied,
    UnknownEndpoint,
)
from .fleet import Fleet, PhysicalFpga, ResourceVector, SlotState
from .kernels import make_kernel
from .simclock import LatencyTable, SimClock, charge_latency

if TYPE_CHECKING:
    from .hypervisor import Bitfile, Lease
    from .simclock import LinkScheduler, StreamSession

GCS_WORDS = 64
UCS_WORDS = 64
GCS_STATUS_WORDS = 16  # words 0..15 are computed, read-only
WORD_MASK = 0xFFFF_FFFF
DEFAULT_FIFO_DEPTH = 64 * 1024

GCS_MAGIC = 0x5243_3345  # "RC3E"

# Shell component costs, per build size (number of virtual FPGA regions).
PCIE_ENDPOINT_FOOTPRINT = ResourceVector(lut=3_268, ff=3_592, dsp=0, bram36=8)
CONTROLLER_FOOTPRINT = ResourceVector(lut=125, ff=255, dsp=0, bram36=1)
VFPGA_INTERFACE_FOOTPRINT = {
    1: ResourceVector(lut=3_689, ff=3_127, dsp=0, bram36=4),
    2: ResourceVector(lut=4_414, ff=3_790, dsp=0, bram36=8),
    4: ResourceVector(lut=5_139, ff=4_471, dsp=0, bram36=16),
}


def framework_footprint(vfpga_count: int) -> ResourceVector:
    """Shell fabric cost for a build hosting *vfpga_count* regions.

    Counts between measured build sizes step up to the next one.
    """
    count = max(1, vfpga_count)
    for size in sorted(VFPGA_INTERFACE_FOOTPRINT):
        if count <= size:
            return PCIE_ENDPOINT_FOOTPRINT + CONTROLLER_FOOTPRINT + VFPGA_INTERFACE_FOOTPRINT[size]
    raise OutOfRange(f"no shell build hosts {vfpga_count} regions")


def utilization_percent(model, vfpga_count: int) -> dict[str, float]:
    """Shell utilization of *model*'s fabric, in percent per resource class."""
    fp = framework_footprint(vfpga_count)
    cap = model.capacity
    return {
        "lut": 100.0 * fp.lut / cap.lut,
        "ff": 100.0 * fp.ff / cap.ff,
        "bram36": 100.0 * fp.bram36 / cap.bram36,
    }


class ControlSignal:
    FULL_RESET = "full_reset"
    USER_RESET = "user_reset"
    TEST_LOOPBACK = "test_loopback"

    ALL = (FULL_RESET, USER_RESET, TEST_LOOPBACK)
    _CODES = {FULL_RESET: 1, USER_RESET: 2, TEST_LOOPBACK: 3}


@dataclass(frozen=True)
class FifoEndpoint:
    """Addressable stream port of one virtual FPGA."""

    id: str
    lease_id: int
    direction: str  # "in" (host writes) | "out" (host reads)
    depth: int = DEFAULT_FIFO_DEPTH


@dataclass
class DeviceHandle:
    """Tenant-side view of an opened device or slot group."""

    user: str
    lease_id: int
    device_id: int
    slots: tuple[int, ...]
    is_full: bool
    endpoints: list[FifoEndpoint] = field(default_factory=list)

    def endpoint_names(self) -> list[str]:
        return [e.id for e in self.endpoints]


@dataclass
class KernelReport:
    """Snapshot of one core's stream progress."""

    state: str  # "idle" | "running" | "done"
    bytes_in: int
    bytes_out: int


def endpoint_name(device_id: int, slot: int, kind: str) -> str:
    if kind == "gcs":
        return f"fpga{device_id}/gcs"
    return f"fpga{device_id}/v{slot}/{kind}"


class _SlotRuntime:
    """Mutable per-region state: registers, buffers, core, stream session."""

    def __init__(self):
        self.ucs = [0] * UCS_WORDS
        self.design: Optional["Bitfile"] = None
        self.kernel = None
        self.running = False
        self.loopback = False
        self.in_written = 0    # cumulative bytes accepted by the input FIFO
        self.out_produced = 0  # cumulative bytes the core has emitted
        self.out_read = 0      # cumulative bytes handed back to the host
        self.pending = bytearray()    # input awaiting a started core
        self.out_store = bytearray()  # emitted bytes, in order
        self.session: Optional["StreamSession"] = None

    def demand(self) -> int:
        return max(self.in_written, self.out_produced)

    def cap(self) -> float:
        if self.loopback:
            return math.inf
        if self.design is not None and self.design.compute_rate is not None:
            return float(self.design.compute_rate)
        return math.inf

    def wipe(self, scheduler, *, keep_ucs: bool = False) -> None:
        """Forget all stream state; configuration (design) survives."""
        if self.session is not None:
            scheduler.close(self.session)
            self.session = None
        if not keep_ucs:
            self.ucs = [0] * UCS_WORDS
        self.kernel = None
        self.running = False
        self.loopback = False
        self.in_written = 0
        self.out_produced = 0
        self.out_read = 0
        self.pending.clear()
        self.out_store.clear()


class _DeviceRuntime:
    def __init__(self, slot_count: int):
        self.gcs_scratch = [0] * (GCS_WORDS - GCS_STATUS_WORDS)
        self.control_latch = 0
        self.slots = [_SlotRuntime() for _ in range(slot_count)]
        self.full = _SlotRuntime()  # backs whole-device designs


class Rc2fRuntime:
    """Executes register, control, and stream operations against the fleet."""

    def __init__(
        self,
        fleet: Fleet,
        clock: SimClock,
        latency: LatencyTable,
        scheduler: "LinkScheduler",
        lease_resolver: Callable[[int], "Lease"],
    ):
        self.fleet = fleet
        self.clock = clock
        self.latency = latency
        self.scheduler = scheduler
        self._resolve_lease = lease_resolver
        self._devices: dict[int, _DeviceRuntime] = {}

    # --- plumbing ----------------------------------------------------------

    def device_runtime(self, device_id: int) -> _DeviceRuntime:
        rt = self._devices.get(device_id)
        if rt is None:
            device = self.fleet.device(device_id)
            rt = _DeviceRuntime(device.model.slot_count)
            self._devices[device_id] = rt
        return rt

    def open_device(self, user: str, lease_id: int) -> DeviceHandle:
        lease = self._resolve_lease(lease_id)
        if lease.user != user:
            raise PermissionDenied(f"lease {lease_id} belongs to {lease.user!r}")
        from .hypervisor import ServiceModel  # runtime import avoids a cycle

        is_full = lease.model is ServiceModel.RSAAS
        slots = (0,) if is_full else tuple(lease.slot_indices)
        endpoints = []
        for s in slots:
            endpoints.append(
                FifoEndpoint(endpoint_name(lease.device_id, s, "in"), lease_id, "in")
            )
            endpoints.append(
                FifoEndpoint(endpoint_name(lease.device_id, s, "out"), lease_id, "out")
            )
        return DeviceHandle(
            user=user,
            lease_id=lease_id,
            device_id=lease.device_id,
            slots=slots,
            is_full=is_full,
            endpoints=endpoints,
        )

    def resolve_endpoint(self, handle: DeviceHandle, name: str) -> tuple[int, str]:
        """Map an endpoint name to (slot, kind), enforcing ownership."""
        if name == endpoint_name(handle.device_id, 0, "gcs"):
            if not handle.is_full:
                raise PermissionDenied("gcs is device-level; requires a full-access lease")
            return (0, "gcs")
        for slot in handle.slots:
            for kind in ("ucs", "in", "out"):
                if name == endpoint_name(handle.device_id, slot, kind):
                    return (slot, kind)
        raise UnknownEndpoint(f"not an endpoint of this handle: {name}")

    def _check_live(self, handle: DeviceHandle) -> None:
        # raises UnknownLease once the lease behind the handle is gone
        lease = self._resolve_lease(handle.lease_id)
        if lease.user != handle.user or lease.device_id != handle.device_id:
            raise PermissionDenied("handle no longer matches its lease")

    def _slot_rt(self, handle: DeviceHandle, slot: int) -> _SlotRuntime:
        self._check_live(handle)
        devrt = self.device_runtime(handle.device_id)
        if handle.is_full:
            if slot != 0:
                raise OutOfRange("full-access devices expose a single region, index 0")
            return devrt.full
        if slot not in handle.slots:
            raise PermissionDenied(f"slot {slot} is not part of lease {handle.lease_id}")
        return devrt.slots[slot]

    def _device(self, handle: DeviceHandle) -> PhysicalFpga:
        return self.fleet.device(handle.device_id)

    def _vfpga_count(self, device: PhysicalFpga) -> int:
        return max(1, device.non_free_count())

    def _charge_ucs(self, device: PhysicalFpga) -> int:
        return charge_latency(
            self.clock, self.latency, "ucs_access", "local", self._vfpga_count(device)
        )

    def _charge_gcs(self) -> int:
        return charge_latency(self.clock, self.latency, "gcs_access", "local")

    # --- register spaces --------------------------------------------------------

    def ucs_read(self, handle: DeviceHandle, slot: int, addr: int) -> int:
        rt = self._slot_rt(handle, slot)
        if not 0 <= addr < UCS_WORDS:
            raise OutOfRange(f"ucs address {addr} outside 0..{UCS_WORDS - 1}")
        self._charge_ucs(self._device(handle))
        return rt.ucs[addr]

    def ucs_write(self, handle: DeviceHandle, slot: int, addr: int, value: int) -> None:
        rt = self._slot_rt(handle, slot)
        if not 0 <= addr < UCS_WORDS:
            raise OutOfRange(f"ucs address {addr} outside 0..{UCS_WORDS - 1}")
        self._charge_ucs(self._device(handle))
        rt.ucs[addr] = int(value) & WORD_MASK

    def gcs_read(self, handle: DeviceHandle, addr: int) -> int:
        self._check_live(handle)
        if not handle.is_full:
            raise PermissionDenied("gcs requires a full-access lease")
        if not 0 <= addr < GCS_WORDS:
            raise OutOfRange(f"gcs address {addr} outside 0..{GCS_WORDS - 1}")
        self._charge_gcs()
        if addr < GCS_STATUS_WORDS:
            return self._gcs_status_word(self._device(handle), addr)
        return self.device_runtime(handle.device_id).gcs_scratch[addr - GCS_STATUS_WORDS]

    def gcs_write(self, handle: DeviceHandle, addr: int, value: int) -> None:
        self._check_live(handle)
        if not handle.is_full:
            raise PermissionDenied("gcs requires a full-access lease")
        if not 0 <= addr < GCS_WORDS:
            raise OutOfRange(f"gcs address {addr} outside 0..{GCS_WORDS - 1}")
        self._charge_gcs()
        if addr < GCS_STATUS_WORDS:
            raise PermissionDenied(f"gcs word {addr} is a read-only status word")
        devrt = self.device_runtime(handle.device_id)
        devrt.gcs_scratch[addr - GCS_STATUS_WORDS] = int(value) & WORD_MASK

    def _gcs_status_word(self, device: PhysicalFpga, addr: int) -> int:
        devrt = self.device_runtime(device.id)
        running = sum(1 for rt in devrt.slots if rt.running) + (1 if devrt.full.running else 0)
        words = {
            0: GCS_MAGIC,
            1: 1,  # register map revision
            2: device.model.slot_count,
            3: device.non_free_count(),
            4: {"unassigned": 0, "framework": 1, "full_access": 2}[device.mode.value],
            5: 0 if device.power.value == "clock_gated" else 1,
            6: running,
            7: devrt.control_latch,
            8: self.clock.now() & WORD_MASK,
            9: (self.clock.now() >> 32) & WORD_MASK,
        }
        return words.get(addr, 0)

    # --- control ------------------------------------------------------------------

    def control(self, handle: DeviceHandle, signal: str, slot: Optional[int] = None) -> None:
        if signal not in ControlSignal.ALL:
            raise OutOfRange(f"unknown control signal: {signal}")
        self._check_live(handle)
        device = self._device(handle)
        devrt = self.device_runtime(device.id)
        if signal == ControlSignal.FULL_RESET:
            if not handle.is_full:
                raise PermissionDenied("full_reset requires a full-access lease")
            self._charge_gcs()
            devrt.control_latch = ControlSignal._CODES[signal]
            for rt in devrt.slots:
                rt.wipe(self.scheduler)
            devrt.full.wipe(self.scheduler)
            devrt.gcs_scratch = [0] * (GCS_WORDS - GCS_STATUS_WORDS)
            return
        target = 0 if slot is None else slot
        rt = self._slot_rt(handle, target)
        self._charge_gcs()
        devrt.control_latch = ControlSignal._CODES[signal]
        if signal == ControlSignal.USER_RESET:
            was_design = rt.design
            rt.wipe(self.scheduler, keep_ucs=True)
            rt.design = was_design
            self._set_fleet_state(handle, target, running=False)
        elif signal == ControlSignal.TEST_LOOPBACK:
            rt.loopback = True
            if rt.session is not None and not rt.session.closed:
                self.scheduler.set_cap(rt.session, rt.cap())

    # --- FIFO data path ----------------------------------------------------------

    def fifo_write(self, handle: DeviceHandle, slot: int, data: bytes) -> int:
        """Queue bytes into the slot's input FIFO; returns the accepted count.

        Costs no command latency; arrival at the core is governed by the
        shared-link transfer engine.
        """
        rt = self._slot_rt(handle, slot)
        if not data:
            return 0
        rt.in_written += len(data)
        produced = b""
        if rt.loopback:
            produced = bytes(rt.pending) + bytes(data) if rt.pending else bytes(data)
            rt.pending.clear()
        elif rt.running and rt.kernel is not None:
            produced = rt.kernel.step(bytes(data))
        else:
            rt.pending.extend(data)
        if produced:
            rt.out_store.extend(produced)
            rt.out_produced += len(produced)
        self._update_session(handle, rt)
        return len(data)

    def fifo_read(self, handle: DeviceHandle, slot: int, n: int) -> bytes:
        """Take *n* bytes from the slot's output FIFO, waiting on the transfer.

        Raises if the stream can never produce that many bytes: with command
        processing serialized, no other writer can arrive while this waits.
        """
        rt = self._slot_rt(handle, slot)
        if n < 0:
            raise OutOfRange("read size must be non-negative")
        if n == 0:
            return b""
        target = rt.out_read + n
        if target > rt.out_produced:
            raise EmptyQueueBeforePredicate(
                f"output stream holds {rt.out_produced - rt.out_read} readable bytes; "
                f"asked for {n}"
            )
        arrived = self._arrived_out(rt)
        if arrived < target:
            # wait until enough of the session's demand has crossed the link
            threshold = rt.session.total_bytes * (target / rt.out_produced)
            self.scheduler.wait_for(rt.session, threshold)
        chunk = bytes(rt.out_store[rt.out_read : rt.out_read + n])
        rt.out_read += n
        return chunk

    def fifo_readable(self, handle: DeviceHandle, slot: int) -> int:
        """Bytes that have already arrived and not yet been read."""
        rt = self._slot_rt(handle, slot)
        return self._arrived_out(rt) - rt.out_read

    def _arrived_out(self, rt: _SlotRuntime) -> int:
        if rt.out_produced == 0 or rt.session is None:
            return 0
        demand = rt.session.total_bytes
        if demand <= 0:
            return 0
        frac = min(1.0, self.scheduler.progress(rt.session) / demand)
        return min(rt.out_produced, int(rt.out_produced * frac + 1e-6))

    def _update_session(self, handle: DeviceHandle, rt: _SlotRuntime) -> None:
        demand = float(rt.demand())
        if rt.session is None or rt.session.closed:
            if demand > 0:
                rt.session = self.scheduler.open_session(
                    handle.device_id,
                    compute_cap=rt.cap(),
                    label=f"lease{handle.lease_id}",
                    total_bytes=demand,
                )
            return
        if rt.session.compute_cap != rt.cap():
            self.scheduler.set_cap(rt.session, rt.cap())
        if demand > rt.session.total_bytes:
            self.scheduler.extend(rt.session, demand - rt.session.total_bytes)

    # --- core lifecycle --------------------------------------------------------------

    def kernel_start(self, handle: DeviceHandle, slot: int) -> None:
        rt = self._slot_rt(handle, slot)
        device = self._device(handle)
        if rt.design is None:
            raise NotConfigured("no design configured on this region")
        self._charge_ucs(device)
        if rt.running:
            return
        if rt.kernel is None:
            rt.kernel = make_kernel(rt.design.kernel)
        rt.running = True
        # the core publishes its geometry through its ucs port; costs nothing
        rt.ucs[0] = int(rt.design.kernel.params.get("n", 0)) & WORD_MASK
        self._set_fleet_state(handle, slot, running=True)
        if rt.pending:
            produced = rt.kernel.step(bytes(rt.pending))
            rt.pending.clear()
            if produced:
                rt.out_store.extend(produced)
                rt.out_produced += len(produced)
        self._update_session(handle, rt)

    def kernel_status(self, handle: DeviceHandle, slot: int) -> KernelReport:
        rt = self._slot_rt(handle, slot)
        self._charge_ucs(self._device(handle))
        demand = rt.demand()
        if demand == 0:
            state = "running" if rt.running else "idle"
            return KernelReport(state=state, bytes_in=0, bytes_out=0)
        done = self.scheduler.progress(rt.session) if rt.session is not None else 0.0
        frac = min(1.0, done / rt.session.total_bytes) if rt.session is not None else 0.0
        state = "done" if frac >= 1.0 else "running"
        return KernelReport(
            state=state,
            bytes_in=min(rt.in_written, int(rt.in_written * frac + 1e-6)),
            bytes_out=min(rt.out_produced, int(rt.out_produced * frac + 1e-6)),
        )

    def kernel_stop(self, handle: DeviceHandle, slot: int) -> None:
        rt = self._slot_rt(handle, slot)
        self._charge_ucs(self._device(handle))
        if rt.kernel is not None:
            rt.kernel.close()  # raises on a partial trailing frame; state keeps running
        rt.running = False
        self._set_fleet_state(handle, slot, running=False)

    def _set_fleet_state(self, handle: DeviceHandle, slot: int, running: bool) -> None:
        if handle.is_full:
            return  # whole-device designs track run state in the runtime only
        fleet_slot = self._device(handle).slots[slot]
        if running:
            if fleet_slot.state is SlotState.CONFIGURED:
                fleet_slot.state = SlotState.RUNNING
        else:
            if fleet_slot.state is SlotState.RUNNING:
                fleet_slot.state = SlotState.CONFIGURED

    # --- hypervisor hooks ------------------------------------------------------------

    def on_configured(self, device_id: int, slot_indices, bitfile: "Bitfile") -> None:
        """Reconfiguration wipes each region's runtime state; design installed."""
        devrt = self.device_runtime(device_id)
        for s in slot_indices:
            rt = devrt.slots[s]
            rt.wipe(self.scheduler)
            rt.design = bitfile

    def set_full_design(self, device_id: int, bitfile: "Bitfile") -> None:
        devrt = self.device_runtime(device_id)
        devrt.full.wipe(self.scheduler)
        devrt.full.design = bitfile

    def clear_slot(self, device_id: int, slot: int) -> None:
        devrt = self.device_runtime(device_id)
        devrt.slots[slot].wipe(self.scheduler)
        devrt.slots[slot].design = None

    def clear_full(self, device_id: int) -> None:
        devrt = self.device_runtime(device_id)
        devrt.full.wipe(self.scheduler)
        devrt.full.design = None
