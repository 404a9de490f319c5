"""Device database: cluster nodes, physical FPGAs, and their virtual slots.

A physical FPGA is either handed out whole (full access) or carved into up to
four equally sized virtual FPGA regions that are leased independently.  This
module owns the persistent inventory and its JSON round-trip; scheduling and
runtime behaviour live elsewhere.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional

from .errors import (
    DeviceDbIoError,
    DuplicateHostname,
    NodeFull,
    SchemaVersionMismatch,
    UnknownDevice,
    UnknownNode,
)

if TYPE_CHECKING:  # circular at runtime: hypervisor imports fleet
    from .hypervisor import Bitfile

SCHEMA_VERSION = 1
MAX_SLOTS_PER_FPGA = 4
MAX_FPGAS_PER_NODE = 2


@dataclass(frozen=True)
class ResourceVector:
    """Fabric resource counts: LUTs, flip-flops, DSP slices, 36 Kb BRAM blocks."""

    lut: int = 0
    ff: int = 0
    dsp: int = 0
    bram36: int = 0

    FIELDS = ("lut", "ff", "dsp", "bram36")

    def __post_init__(self):
        for name in self.FIELDS:
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{name} must be a non-negative int, got {v!r}")

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(*(getattr(self, f) + getattr(other, f) for f in self.FIELDS))

    def __sub__(self, other: "ResourceVector") -> "ResourceVector":
        # negative components are construction errors, so underflow raises
        return ResourceVector(*(getattr(self, f) - getattr(other, f) for f in self.FIELDS))

    def scaled(self, k: int) -> "ResourceVector":
        return ResourceVector(*(getattr(self, f) * k for f in self.FIELDS))

    def floor_div(self, k: int) -> "ResourceVector":
        return ResourceVector(*(getattr(self, f) // k for f in self.FIELDS))

    def covers(self, footprint: "ResourceVector") -> bool:
        """True iff *footprint* fits inside this capacity, componentwise."""
        return all(getattr(self, f) >= getattr(footprint, f) for f in self.FIELDS)

    def to_json(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}

    @classmethod
    def from_json(cls, doc: dict) -> "ResourceVector":
        return cls(**{f: int(doc.get(f, 0)) for f in cls.FIELDS})


ZERO_FOOTPRINT = ResourceVector()


@dataclass(frozen=True)
class FpgaModel:
    """Static description of a device type.

    ``link_bandwidth`` is the host link budget in MB/s (decimal: 10^6 bytes/s).
    ``static_overhead`` is fabric consumed by the always-present shell
    (PCIe endpoint + controller) and is excluded from slot capacities.
    """

    name: str
    capacity: ResourceVector
    slot_count: int
    link_bandwidth: float
    static_overhead: ResourceVector = ZERO_FOOTPRINT

    def __post_init__(self):
        if not 1 <= self.slot_count <= MAX_SLOTS_PER_FPGA:
            raise ValueError(f"slot_count must be 1..{MAX_SLOTS_PER_FPGA}")
        if self.link_bandwidth <= 0:
            raise ValueError("link_bandwidth must be positive")
        if not self.capacity.covers(self.static_overhead):
            raise ValueError("static overhead exceeds device capacity")

    def slot_capacity(self) -> ResourceVector:
        """Per-slot share: the post-shell fabric split equally across slots."""
        return (self.capacity - self.static_overhead).floor_div(self.slot_count)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "capacity": self.capacity.to_json(),
            "slot_count": self.slot_count,
            "link_bandwidth": self.link_bandwidth,
            "static_overhead": self.static_overhead.to_json(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FpgaModel":
        return cls(
            name=str(doc["name"]),
            capacity=ResourceVector.from_json(doc["capacity"]),
            slot_count=int(doc["slot_count"]),
            link_bandwidth=float(doc["link_bandwidth"]),
            static_overhead=ResourceVector.from_json(doc.get("static_overhead", {})),
        )


# VC707 board.  BRAM36 is calibrated so the shell utilization report matches
# the measured figures for 1/2/4-region builds to within 0.1 percentage point;
# the raw part figure (1030) misses the 4-region row.
XC7VX485T = FpgaModel(
    name="XC7VX485T",
    capacity=ResourceVector(lut=303_600, ff=607_200, dsp=2_800, bram36=1_048),
    slot_count=4,
    link_bandwidth=800.0,
    static_overhead=ResourceVector(lut=3_393, ff=3_847, dsp=0, bram36=9),
)

# ML605 board, nominal vendor capacities.  Representable but not measured;
# the default testbed uses VC707s only.
XC6VLX240T = FpgaModel(
    name="XC6VLX240T",
    capacity=ResourceVector(lut=150_720, ff=301_440, dsp=768, bram36=416),
    slot_count=4,
    link_bandwidth=800.0,
    static_overhead=ResourceVector(lut=3_393, ff=3_847, dsp=0, bram36=9),
)

MODEL_CATALOG = {m.name: m for m in (XC7VX485T, XC6VLX240T)}


class SlotState(enum.Enum):
    FREE = "free"
    ALLOCATED = "allocated"
    CONFIGURED = "configured"
    RUNNING = "running"


class DeviceMode(enum.Enum):
    UNASSIGNED = "unassigned"
    FRAMEWORK = "framework"      # carved into leased virtual slots
    FULL_ACCESS = "full_access"  # whole device handed to one tenant


class PowerState(enum.Enum):
    CLOCK_GATED = "clock_gated"
    ACTIVE = "active"


@dataclass
class VSlot:
    """One partial-reconfiguration region of a physical FPGA."""

    index: int
    capacity: ResourceVector
    state: SlotState = SlotState.FREE
    lease_id: Optional[int] = None
    design: Optional["Bitfile"] = None

    def is_free(self) -> bool:
        return self.state is SlotState.FREE

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "capacity": self.capacity.to_json(),
            "state": self.state.value,
            "lease_id": self.lease_id,
            "design": self.design.to_json() if self.design is not None else None,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "VSlot":
        design = None
        if doc.get("design") is not None:
            from .hypervisor import Bitfile  # circular at import time only

            design = Bitfile.from_json(doc["design"])
        return cls(
            index=int(doc["index"]),
            capacity=ResourceVector.from_json(doc["capacity"]),
            state=SlotState(doc["state"]),
            lease_id=doc.get("lease_id"),
            design=design,
        )


@dataclass
class PhysicalFpga:
    """A board in the fleet, with its mode, power state, and slot array."""

    id: int
    node_id: int
    model: FpgaModel
    mode: DeviceMode = DeviceMode.UNASSIGNED
    power: PowerState = PowerState.CLOCK_GATED
    full_lease_id: Optional[int] = None
    slots: list[VSlot] = field(default_factory=list)

    @classmethod
    def create(cls, fpga_id: int, node_id: int, model: FpgaModel) -> "PhysicalFpga":
        per_slot = model.slot_capacity()
        slots = [VSlot(index=i, capacity=per_slot) for i in range(model.slot_count)]
        return cls(id=fpga_id, node_id=node_id, model=model, slots=slots)

    def free_slot_count(self) -> int:
        return sum(1 for s in self.slots if s.is_free())

    def has_allocations(self) -> bool:
        return self.full_lease_id is not None or any(not s.is_free() for s in self.slots)

    def contiguous_free_start(self, span: int) -> Optional[int]:
        """Lowest start index of *span* adjacent free slots, or None."""
        run = 0
        for i, slot in enumerate(self.slots):
            run = run + 1 if slot.is_free() else 0
            if run >= span:
                return i - span + 1
        return None

    def non_free_count(self) -> int:
        return len(self.slots) - self.free_slot_count()

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "node_id": self.node_id,
            "model": self.model.to_json(),
            "mode": self.mode.value,
            "power": self.power.value,
            "full_lease_id": self.full_lease_id,
            "slots": [s.to_json() for s in self.slots],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PhysicalFpga":
        return cls(
            id=int(doc["id"]),
            node_id=int(doc["node_id"]),
            model=FpgaModel.from_json(doc["model"]),
            mode=DeviceMode(doc["mode"]),
            power=PowerState(doc["power"]),
            full_lease_id=doc.get("full_lease_id"),
            slots=[VSlot.from_json(s) for s in doc["slots"]],
        )


@dataclass
class Node:
    """A host machine carrying up to two boards."""

    id: int
    hostname: str
    fpga_ids: list[int] = field(default_factory=list)
    interconnect: str = "gigabit-ethernet"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "hostname": self.hostname,
            "fpga_ids": list(self.fpga_ids),
            "interconnect": self.interconnect,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Node":
        return cls(
            id=int(doc["id"]),
            hostname=str(doc["hostname"]),
            fpga_ids=[int(x) for x in doc["fpga_ids"]],
            interconnect=str(doc.get("interconnect", "gigabit-ethernet")),
        )


class Fleet:
    """In-memory inventory of nodes and devices, with JSON persistence."""

    def __init__(self):
        self.nodes: dict[int, Node] = {}
        self.fpgas: dict[int, PhysicalFpga] = {}
        self._next_node_id = 0
        self._next_fpga_id = 0

    # --- registration -----------------------------------------------------

    def register_node(self, hostname: str, interconnect: str = "gigabit-ethernet") -> int:
        if any(n.hostname == hostname for n in self.nodes.values()):
            raise DuplicateHostname(f"hostname already registered: {hostname}")
        node_id = self._next_node_id
        self._next_node_id += 1
        self.nodes[node_id] = Node(id=node_id, hostname=hostname, interconnect=interconnect)
        return node_id

    def register_fpga(self, node_id: int, model: FpgaModel | str) -> int:
        node = self.node(node_id)
        if len(node.fpga_ids) >= MAX_FPGAS_PER_NODE:
            raise NodeFull(f"node {node_id} already carries {MAX_FPGAS_PER_NODE} devices")
        if isinstance(model, str):
            try:
                model = MODEL_CATALOG[model]
            except KeyError:
                raise UnknownDevice(f"unknown device model: {model}") from None
        fpga_id = self._next_fpga_id
        self._next_fpga_id += 1
        device = PhysicalFpga.create(fpga_id, node_id, model)
        self.fpgas[fpga_id] = device
        node.fpga_ids.append(fpga_id)
        return fpga_id

    # --- access -------------------------------------------------------------

    def node(self, node_id: int) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"no such node: {node_id}") from None

    def device(self, fpga_id: int) -> PhysicalFpga:
        try:
            return self.fpgas[fpga_id]
        except KeyError:
            raise UnknownDevice(f"no such device: {fpga_id}") from None

    def devices(self) -> list[PhysicalFpga]:
        return [self.fpgas[k] for k in sorted(self.fpgas)]

    @staticmethod
    def capacity_check(target: VSlot | PhysicalFpga, footprint: ResourceVector) -> bool:
        """True iff *footprint* fits the slot's share or the whole device."""
        if isinstance(target, VSlot):
            return target.capacity.covers(footprint)
        return target.model.capacity.covers(footprint)

    # --- persistence -----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "nodes": [self.nodes[k].to_json() for k in sorted(self.nodes)],
            "fpgas": [self.fpgas[k].to_json() for k in sorted(self.fpgas)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Fleet":
        if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"expected schema_version {SCHEMA_VERSION}, got {doc.get('schema_version')!r}"
            )
        fleet = cls()
        try:
            for node_doc in doc["nodes"]:
                node = Node.from_json(node_doc)
                fleet.nodes[node.id] = node
            for dev_doc in doc["fpgas"]:
                device = PhysicalFpga.from_json(dev_doc)
                fleet.fpgas[device.id] = device
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaVersionMismatch(f"malformed device database: {exc}") from exc
        fleet._next_node_id = max(fleet.nodes, default=-1) + 1
        fleet._next_fpga_id = max(fleet.fpgas, default=-1) + 1
        try:
            fleet.check_invariants()
        except AssertionError as exc:
            raise SchemaVersionMismatch(f"inconsistent device database: {exc}") from exc
        return fleet

    def save(self, path: str) -> None:
        try:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(self.to_json(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError as exc:
            raise DeviceDbIoError(f"cannot write device database: {exc}") from exc

    @classmethod
    def load(cls, path: str) -> "Fleet":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise DeviceDbIoError(f"cannot read device database: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise SchemaVersionMismatch(f"device database is not valid JSON: {exc}") from exc
        return cls.from_json(doc)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Fleet):
            return NotImplemented
        return self.to_json() == other.to_json()

    # --- consistency --------------------------------------------------------------

    def check_invariants(self) -> None:
        """Raise AssertionError on any structural violation; used by tests."""
        for node in self.nodes.values():
            assert len(node.fpga_ids) <= MAX_FPGAS_PER_NODE, f"node {node.id} over device limit"
            for fid in node.fpga_ids:
                assert fid in self.fpgas, f"node {node.id} references missing device {fid}"
                assert self.fpgas[fid].node_id == node.id
        hostnames = [n.hostname for n in self.nodes.values()]
        assert len(hostnames) == len(set(hostnames)), "duplicate hostnames"
        for device in self.fpgas.values():
            assert device.node_id in self.nodes, f"device {device.id} on missing node"
            assert len(device.slots) == device.model.slot_count
            if device.mode is DeviceMode.FULL_ACCESS:
                assert device.full_lease_id is not None
                assert all(s.is_free() for s in device.slots), (
                    f"device {device.id}: full access requires all slots free"
                )
            else:
                assert device.full_lease_id is None
            gated = device.power is PowerState.CLOCK_GATED
            assert gated == (not device.has_allocations()), (
                f"device {device.id}: power state inconsistent with allocations"
            )
            for slot in device.slots:
                assert (slot.lease_id is None) == slot.is_free()
                if slot.design is not None:
                    assert slot.state in (SlotState.CONFIGURED, SlotState.RUNNING)
