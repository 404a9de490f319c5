"""Resource manager: leases, placement, reconfiguration, and batch jobs.

Three ways to consume a device:
  * full access: the whole board, tenant supplies a complete image;
  * slot leases: 1, 2, or 4 adjacent virtual FPGA regions under the shared
    shell, loaded over partial reconfiguration;
  * background services: provider-curated cores run on demand against
    caller-supplied payloads, placed like slot leases.

Placement consolidates: new slot leases go to the busiest already-powered
device that still has a contiguous free span, and clock-gated boards wake
only when nothing active fits.  A board with no remaining allocations gates
its clock again.
"""

from __future__ import annotations

import base64
import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

from .errors import (
    BadRequest,
    FootprintTooLarge,
    InvalidBitfile,
    ModelConflict,
    NoCapacity,
    Rc3eError,
    RegionMismatch,
    UnknownJob,
    UnknownKernelKind,
    UnknownLease,
    UnknownService,
    WrongServiceModel,
)
from .fleet import DeviceMode, Fleet, PhysicalFpga, PowerState, ResourceVector, SlotState
from .kernels import KernelBinding, loopback_binding, preset
from .rc2f import DeviceHandle, Rc2fRuntime
from .simclock import LatencyTable, LinkScheduler, SimClock, charge_latency

log = logging.getLogger(__name__)

VALID_SPANS = (1, 2, 4)


class ServiceModel(enum.Enum):
    RSAAS = "rsaas"  # whole reconfigurable silicon
    RAAAS = "raaas"  # leased virtual-FPGA regions
    BAAAS = "baaas"  # provider-run background acceleration


class BitfileKind(enum.Enum):
    FULL = "full"
    PARTIAL = "partial"


@dataclass(frozen=True)
class Bitfile:
    """Deployable design descriptor.

    ``region_span`` counts adjacent regions for partial images and is None
    for full-device images.  ``compute_rate`` (MB/s) caps how fast the design
    consumes its stream; None means it keeps up with the link.
    """

    name: str
    kind: BitfileKind
    target_model: str
    region_span: Optional[int]
    footprint: ResourceVector
    kernel: KernelBinding
    compute_rate: Optional[float] = None

    def __post_init__(self):
        if not self.name:
            raise InvalidBitfile("bitfile needs a name")
        if self.kind is BitfileKind.PARTIAL:
            if self.region_span not in VALID_SPANS:
                raise InvalidBitfile(
                    f"partial image span must be one of {VALID_SPANS}, got {self.region_span}"
                )
        elif self.region_span is not None:
            raise InvalidBitfile("full-device images take no region span")
        if self.compute_rate is not None and self.compute_rate <= 0:
            raise InvalidBitfile("compute_rate must be positive")

    def cap(self) -> float:
        return float("inf") if self.compute_rate is None else float(self.compute_rate)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "target_model": self.target_model,
            "region_span": self.region_span,
            "footprint": self.footprint.to_json(),
            "kernel": self.kernel.to_json(),
            "compute_rate_mbps": self.compute_rate,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Bitfile":
        try:
            kind = BitfileKind(doc["kind"])
            rate = doc.get("compute_rate_mbps")
            footprint = ResourceVector.from_json(doc.get("footprint", {}))
            kernel = KernelBinding.from_json(
                doc.get("kernel", {}),
                compute_rate=rate,
                footprint=footprint,
            )
            span = doc.get("region_span")
            return cls(
                name=str(doc["name"]),
                kind=kind,
                target_model=str(doc["target_model"]),
                region_span=None if span is None else int(span),
                footprint=footprint,
                kernel=kernel,
                compute_rate=None if rate is None else float(rate),
            )
        except UnknownKernelKind as exc:
            raise InvalidBitfile(str(exc)) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidBitfile(f"malformed bitfile descriptor: {exc}") from exc


def preset_bitfile(
    n: int,
    cores_hint: int = 1,
    target_model: str = "XC7VX485T",
    kind: BitfileKind = BitfileKind.PARTIAL,
    name: Optional[str] = None,
) -> Bitfile:
    """Bitfile wrapping a calibrated matrix-core build; span equals core count."""
    binding = preset(n, cores_hint)
    cores = int(binding.params["cores"])
    return Bitfile(
        name=name or f"mm{n}x{cores}",
        kind=kind,
        target_model=target_model,
        region_span=cores if kind is BitfileKind.PARTIAL else None,
        footprint=binding.footprint,
        kernel=binding,
        compute_rate=binding.compute_rate,
    )


def loopback_bitfile(
    target_model: str = "XC7VX485T",
    kind: BitfileKind = BitfileKind.PARTIAL,
    name: str = "loopback",
) -> Bitfile:
    binding = loopback_binding()
    return Bitfile(
        name=name,
        kind=kind,
        target_model=target_model,
        region_span=1 if kind is BitfileKind.PARTIAL else None,
        footprint=binding.footprint,
        kernel=binding,
        compute_rate=None,
    )


@dataclass(frozen=True)
class Lease:
    """A tenant's claim on a device: the whole board or a contiguous slot run."""

    id: int
    user: str
    model: ServiceModel
    device_id: int
    slot_indices: tuple[int, ...]
    created_at: int

    def to_json(self) -> dict:
        return {
            "lease_id": self.id,
            "user": self.user,
            "model": self.model.value,
            "device_id": self.device_id,
            "slot_indices": list(self.slot_indices),
            "created_at": self.created_at,
        }


class JobState(enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


@dataclass
class BatchJob:
    """A queued run: place, configure, stream the payload, collect, release."""

    id: int
    user: str
    model: ServiceModel
    slots: int
    bitfile: Bitfile
    input_ref: str
    payload: bytes = field(repr=False)
    state: JobState = JobState.QUEUED
    submitted_at: int = 0
    started_at: Optional[int] = None
    ended_at: Optional[int] = None
    lease_id: Optional[int] = None
    output: Optional[bytes] = field(default=None, repr=False)
    error: Optional[str] = None

    def to_json(self, with_output: bool = False) -> dict:
        doc = {
            "job_id": self.id,
            "user": self.user,
            "model": self.model.value,
            "slots": self.slots,
            "bitfile": self.bitfile.name,
            "input_ref": self.input_ref,
            "state": self.state.value,
            "submitted_at": self.submitted_at,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "error": self.error,
            "output_bytes": len(self.output) if self.output is not None else None,
        }
        if with_output and self.output is not None:
            doc["output_b64"] = base64.b64encode(self.output).decode("ascii")
        return doc


@dataclass(frozen=True)
class CompletionReceipt:
    """What a reconfiguration cost and when it finished."""

    duration_us: int
    completed_at: int
    pcie_link_restored: bool = False


@dataclass
class SlotStatus:
    index: int
    state: str
    lease_id: Optional[int]
    design: Optional[str]


@dataclass
class StatusReport:
    device_id: int
    node_id: int
    model: str
    mode: str
    power: str
    slots: list[SlotStatus]
    full_design: Optional[str]
    charged_us: int
    at_us: int

    def to_json(self) -> dict:
        return {
            "device_id": self.device_id,
            "node_id": self.node_id,
            "model": self.model,
            "mode": self.mode,
            "power": self.power,
            "slots": [vars(s) for s in self.slots],
            "full_design": self.full_design,
            "charged_us": self.charged_us,
            "at_us": self.at_us,
        }


@dataclass(frozen=True)
class ServiceDef:
    """A provider-curated background service: a core build plus its span."""

    name: str
    binding: KernelBinding
    span: int


class Hypervisor:
    """Owns the fleet's scheduling state and the virtual clock."""

    def __init__(
        self,
        fleet: Fleet,
        clock: Optional[SimClock] = None,
        latency: Optional[LatencyTable] = None,
        link_bandwidth: Optional[float] = None,
    ):
        self.fleet = fleet
        self.clock = clock if clock is not None else SimClock()
        self.latency = latency if latency is not None else LatencyTable()
        self._bandwidth_override = link_bandwidth
        self.scheduler = LinkScheduler(self.clock, self._device_bandwidth)
        self.runtime = Rc2fRuntime(fleet, self.clock, self.latency, self.scheduler, self.lease)
        self.leases: dict[int, Lease] = {}
        self.jobs: dict[int, BatchJob] = {}
        self.services: dict[str, ServiceDef] = {}
        self._queue: list[int] = []
        self._next_lease_id = 0
        self._next_job_id = 0
        self._scanning = False
        self._rescan = False
        self.register_service("matmul16", preset(16, 1), span=1)
        self.register_service("matmul32", preset(32, 1), span=1)
        self.register_service("loopback", loopback_binding(), span=1)

    def _device_bandwidth(self, device_id: int) -> float:
        if self._bandwidth_override is not None:
            return self._bandwidth_override
        return self.fleet.device(device_id).model.link_bandwidth

    # --- leases ----------------------------------------------------------------

    def lease(self, lease_id: int) -> Lease:
        try:
            return self.leases[lease_id]
        except KeyError:
            raise UnknownLease(f"no such lease: {lease_id}") from None

    def allocate(
        self,
        user: str,
        model: ServiceModel,
        slots: Optional[int] = None,
        target_model: Optional[str] = None,
    ) -> Lease:
        """Place a new lease; costs no command latency.

        Slot leases prefer the busiest active device with a contiguous free
        run (lowest id on ties) and wake a gated board only as a last resort.
        """
        if model is ServiceModel.RSAAS:
            if slots is not None:
                raise BadRequest("full-access leases take the whole device; omit slots")
            return self._allocate_full(user, target_model)
        if slots not in VALID_SPANS:
            raise BadRequest(f"slot leases span one of {VALID_SPANS}, got {slots}")
        return self._allocate_slots(user, model, slots, target_model)

    def _eligible_devices(self, target_model: Optional[str]) -> list[PhysicalFpga]:
        return [
            d
            for d in self.fleet.devices()
            if target_model is None or d.model.name == target_model
        ]

    def _allocate_slots(
        self, user: str, model: ServiceModel, span: int, target_model: Optional[str]
    ) -> Lease:
        candidates = []
        blocked_by_assignment = False
        for device in self._eligible_devices(target_model):
            if device.mode is DeviceMode.FULL_ACCESS:
                blocked_by_assignment = True  # structurally free but claimed whole
                continue
            if span > device.model.slot_count:
                continue
            start = device.contiguous_free_start(span)
            if start is not None:
                candidates.append((device, start))
        if not candidates:
            if blocked_by_assignment:
                raise ModelConflict(
                    f"no span of {span} regions outside full-access devices"
                )
            raise NoCapacity(f"no device has {span} adjacent free regions")
        active = [(d, s) for d, s in candidates if d.power is PowerState.ACTIVE]
        if active:
            device, start = min(active, key=lambda pair: (pair[0].free_slot_count(), pair[0].id))
        else:
            device, start = min(candidates, key=lambda pair: pair[0].id)
            device.power = PowerState.ACTIVE
            log.debug("waking device %d for a %d-slot lease", device.id, span)
        indices = tuple(range(start, start + span))
        lease = self._new_lease(user, model, device.id, indices)
        device.mode = DeviceMode.FRAMEWORK
        device.power = PowerState.ACTIVE
        for i in indices:
            slot = device.slots[i]
            slot.state = SlotState.ALLOCATED
            slot.lease_id = lease.id
        return lease

    def _allocate_full(self, user: str, target_model: Optional[str]) -> Lease:
        blocked_by_assignment = False
        for device in self._eligible_devices(target_model):
            if device.mode is DeviceMode.UNASSIGNED and not device.has_allocations():
                lease = self._new_lease(
                    user, ServiceModel.RSAAS, device.id, tuple(range(device.model.slot_count))
                )
                device.mode = DeviceMode.FULL_ACCESS
                device.full_lease_id = lease.id
                device.power = PowerState.ACTIVE
                return lease
            if device.mode is DeviceMode.FRAMEWORK:
                blocked_by_assignment = True  # carved into regions for other tenants
        if blocked_by_assignment:
            raise ModelConflict("every otherwise-free device is carved into leased regions")
        raise NoCapacity("no unassigned device available for full access")

    def _new_lease(
        self, user: str, model: ServiceModel, device_id: int, indices: tuple[int, ...]
    ) -> Lease:
        lease = Lease(
            id=self._next_lease_id,
            user=user,
            model=model,
            device_id=device_id,
            slot_indices=indices,
            created_at=self.clock.now(),
        )
        self._next_lease_id += 1
        self.leases[lease.id] = lease
        return lease

    def release(self, lease_id: int) -> None:
        """Return a lease's resources; gates the board if nothing remains."""
        lease = self.lease(lease_id)
        device = self.fleet.device(lease.device_id)
        if lease.model is ServiceModel.RSAAS:
            self.runtime.clear_full(device.id)
            device.full_lease_id = None
            device.mode = DeviceMode.UNASSIGNED
        else:
            for i in lease.slot_indices:
                slot = device.slots[i]
                slot.state = SlotState.FREE
                slot.lease_id = None
                slot.design = None
                self.runtime.clear_slot(device.id, i)
        del self.leases[lease_id]
        if not device.has_allocations():
            device.power = PowerState.CLOCK_GATED
            device.mode = DeviceMode.UNASSIGNED
        self._scan_queue()

    # --- configuration -----------------------------------------------------------

    def configure(self, lease_id: int, bitfile: Bitfile, local: bool = False) -> CompletionReceipt:
        """Load a design onto a lease; charges the reconfiguration latency."""
        lease = self.lease(lease_id)
        device = self.fleet.device(lease.device_id)
        if bitfile.target_model != device.model.name:
            raise RegionMismatch(
                f"image targets {bitfile.target_model}, device is {device.model.name}"
            )
        path = "local" if local else "remote"
        if bitfile.kind is BitfileKind.FULL:
            if lease.model is not ServiceModel.RSAAS:
                raise WrongServiceModel("full-device images need a full-access lease")
            if not device.model.capacity.covers(bitfile.footprint):
                raise FootprintTooLarge("image exceeds device fabric")
            charged = charge_latency(self.clock, self.latency, "config_full", path)
            self.runtime.set_full_design(device.id, bitfile)
            # a full flash reloads the PCIe endpoint, so the link came back up
            return CompletionReceipt(charged, self.clock.now(), pcie_link_restored=True)
        if lease.model is ServiceModel.RSAAS:
            raise WrongServiceModel("full-access leases take whole-device images")
        span = len(lease.slot_indices)
        if bitfile.region_span != span:
            raise RegionMismatch(
                f"image spans {bitfile.region_span} regions, lease holds {span}"
            )
        region_capacity = device.slots[lease.slot_indices[0]].capacity.scaled(span)
        if not region_capacity.covers(bitfile.footprint):
            raise FootprintTooLarge("image exceeds the leased regions' fabric")
        charged = charge_latency(self.clock, self.latency, "pr", path)
        for i in lease.slot_indices:
            device.slots[i].state = SlotState.CONFIGURED
            device.slots[i].design = bitfile
        self.runtime.on_configured(device.id, lease.slot_indices, bitfile)
        return CompletionReceipt(charged, self.clock.now(), pcie_link_restored=False)

    def device_status(self, lease_id: int, local: bool = False) -> StatusReport:
        """Read back a device's occupancy; charges the status latency."""
        lease = self.lease(lease_id)
        device = self.fleet.device(lease.device_id)
        charged = charge_latency(
            self.clock, self.latency, "status", "local" if local else "remote"
        )
        devrt = self.runtime.device_runtime(device.id)
        slots = []
        for slot in device.slots:
            state = slot.state
            if state is SlotState.CONFIGURED and devrt.slots[slot.index].running:
                state = SlotState.RUNNING
            slots.append(
                SlotStatus(
                    index=slot.index,
                    state=state.value,
                    lease_id=slot.lease_id,
                    design=slot.design.name if slot.design else None,
                )
            )
        full = devrt.full.design
        return StatusReport(
            device_id=device.id,
            node_id=device.node_id,
            model=device.model.name,
            mode=device.mode.value,
            power=device.power.value,
            slots=slots,
            full_design=full.name if full else None,
            charged_us=charged,
            at_us=self.clock.now(),
        )

    def open_device(self, user: str, lease_id: int) -> DeviceHandle:
        return self.runtime.open_device(user, lease_id)

    # --- background services ------------------------------------------------------

    def register_service(self, name: str, binding: KernelBinding, span: int = 1) -> None:
        if span not in VALID_SPANS:
            raise BadRequest(f"service span must be one of {VALID_SPANS}")
        self.services[name] = ServiceDef(name=name, binding=binding, span=span)

    def invoke_service(
        self, user: str, name: str, payload: bytes, local: bool = False
    ) -> tuple[bytes, int]:
        """Run a curated core over *payload*; returns (output, elapsed µs).

        The lease, configuration, and device handle stay provider-internal.
        """
        service = self.services.get(name)
        if service is None:
            raise UnknownService(f"no such service: {name}")
        started = self.clock.now()
        bitfile = self._service_bitfile(service)
        lease = self.allocate(
            user, ServiceModel.BAAAS, slots=service.span, target_model=bitfile.target_model
        )
        try:
            self.configure(lease.id, bitfile, local=local)
            handle = self.runtime.open_device(user, lease.id)
            anchor = handle.slots[0]
            self.runtime.kernel_start(handle, anchor)
            output = b""
            if payload:
                self.runtime.fifo_write(handle, anchor, payload)
                rt = self.runtime.device_runtime(lease.device_id).slots[anchor]
                self.scheduler.run_transfer(rt.session)
                produced = rt.out_produced - rt.out_read
                output = self.runtime.fifo_read(handle, anchor, produced)
            self.runtime.kernel_stop(handle, anchor)
        finally:
            self.release(lease.id)
        return output, self.clock.now() - started

    def _service_bitfile(self, service: ServiceDef) -> Bitfile:
        needed = service.binding.footprint
        for device in self.fleet.devices():
            per_slot = device.model.slot_capacity()
            if per_slot.scaled(service.span).covers(needed):
                return Bitfile(
                    name=f"svc-{service.name}",
                    kind=BitfileKind.PARTIAL,
                    target_model=device.model.name,
                    region_span=service.span,
                    footprint=needed,
                    kernel=service.binding,
                    compute_rate=service.binding.compute_rate,
                )
        raise NoCapacity(f"service {service.name} fits no device model in the fleet")

    # --- batch jobs -------------------------------------------------------------------

    def submit_job(
        self,
        user: str,
        model: ServiceModel,
        slots: int,
        bitfile: Bitfile,
        payload: bytes,
        input_ref: str = "",
    ) -> int:
        """Queue a run; placement happens as capacity appears, in FIFO order."""
        if model is ServiceModel.RSAAS:
            if bitfile.kind is not BitfileKind.FULL:
                raise InvalidBitfile("whole-device jobs need a full image")
        else:
            if bitfile.kind is not BitfileKind.PARTIAL:
                raise InvalidBitfile("slot jobs need a partial image")
            if slots != bitfile.region_span:
                raise InvalidBitfile(
                    f"job asks for {slots} regions but the image spans {bitfile.region_span}"
                )
        job = BatchJob(
            id=self._next_job_id,
            user=user,
            model=model,
            slots=slots,
            bitfile=bitfile,
            input_ref=input_ref,
            payload=bytes(payload),
            submitted_at=self.clock.now(),
        )
        self._next_job_id += 1
        self.jobs[job.id] = job
        if self._never_fits(job):
            job.state = JobState.FAILED
            job.ended_at = self.clock.now()
            job.error = "no device in the fleet can ever host this image"
            return job.id
        self._queue.append(job.id)
        self._scan_queue()
        return job.id

    def job(self, job_id: int) -> BatchJob:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise UnknownJob(f"no such job: {job_id}") from None

    def job_list(self) -> list[BatchJob]:
        return [self.jobs[k] for k in sorted(self.jobs)]

    def wait_for_jobs(self) -> int:
        """Advance virtual time until every job has finished or failed."""
        terminal = (JobState.DONE, JobState.FAILED)
        return self.clock.advance_until(
            lambda: all(j.state in terminal for j in self.jobs.values())
        )

    def _never_fits(self, job: BatchJob) -> bool:
        for device in self.fleet.devices():
            model = device.model
            if job.bitfile.target_model != model.name:
                continue
            if job.model is ServiceModel.RSAAS:
                if model.capacity.covers(job.bitfile.footprint):
                    return False
            else:
                if job.slots > model.slot_count:
                    continue
                if model.slot_capacity().scaled(job.slots).covers(job.bitfile.footprint):
                    return False
        return True

    def _scan_queue(self) -> None:
        """Start every queued job that can be placed right now, oldest first."""
        if self._scanning:
            self._rescan = True
            return
        self._scanning = True
        try:
            self._rescan = True
            while self._rescan:
                self._rescan = False
                for job_id in list(self._queue):
                    job = self.jobs[job_id]
                    if job.state is not JobState.QUEUED:
                        if job_id in self._queue:
                            self._queue.remove(job_id)
                        continue
                    try:
                        lease = self.allocate(
                            job.user,
                            job.model,
                            slots=None if job.model is ServiceModel.RSAAS else job.slots,
                            target_model=job.bitfile.target_model,
                        )
                    except (NoCapacity, ModelConflict):
                        continue  # stays queued; later jobs may still fit
                    self._queue.remove(job_id)
                    self._start_job(job, lease)
        finally:
            self._scanning = False

    def _start_job(self, job: BatchJob, lease: Lease) -> None:
        job.state = JobState.RUNNING
        job.started_at = self.clock.now()
        job.lease_id = lease.id
        log.debug("job %d starts on device %d slots %s", job.id, lease.device_id, lease.slot_indices)
        try:
            self.configure(lease.id, job.bitfile, local=False)
            handle = self.runtime.open_device(job.user, lease.id)
            anchor = handle.slots[0]
            self.runtime.kernel_start(handle, anchor)
            if not job.payload:
                self._finish_job(job, handle, anchor)
                return
            self.runtime.fifo_write(handle, anchor, job.payload)
            devrt = self.runtime.device_runtime(lease.device_id)
            rt = devrt.full if handle.is_full else devrt.slots[anchor]
            self.scheduler.watch(
                rt.session,
                rt.session.total_bytes,
                lambda _s, j=job, h=handle, a=anchor: self._finish_job(j, h, a),
            )
        except Rc3eError as exc:
            self._fail_job(job, str(exc))

    def _finish_job(self, job: BatchJob, handle: DeviceHandle, anchor: int) -> None:
        try:
            devrt = self.runtime.device_runtime(handle.device_id)
            rt = devrt.full if handle.is_full else devrt.slots[anchor]
            produced = rt.out_produced - rt.out_read
            output = self.runtime.fifo_read(handle, anchor, produced) if produced else b""
            self.runtime.kernel_stop(handle, anchor)  # trailing partial frame fails here
        except Rc3eError as exc:
            self._fail_job(job, str(exc))
            return
        job.output = output
        job.state = JobState.DONE
        job.ended_at = self.clock.now()
        self.release(job.lease_id)  # triggers the next scan

    def _fail_job(self, job: BatchJob, message: str) -> None:
        job.state = JobState.FAILED
        job.error = message
        job.ended_at = self.clock.now()
        if job.lease_id is not None and job.lease_id in self.leases:
            self.release(job.lease_id)
