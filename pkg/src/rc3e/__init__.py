"""Desk-scale FPGA cloud: simulated fleet, hypervisor, and streaming runtime.

The package models a provider that rents reconfigurable hardware three ways
(whole devices, virtual-FPGA slots, background acceleration services), with
measured command latencies and link-contention-faithful stream timing on a
single virtual microsecond clock.
"""

from . import errors
from .fleet import (
    MODEL_CATALOG,
    XC6VLX240T,
    XC7VX485T,
    DeviceMode,
    Fleet,
    FpgaModel,
    Node,
    PhysicalFpga,
    PowerState,
    ResourceVector,
    SlotState,
    VSlot,
)
from .hypervisor import (
    BatchJob,
    Bitfile,
    BitfileKind,
    CompletionReceipt,
    Hypervisor,
    JobState,
    Lease,
    ServiceModel,
    StatusReport,
    loopback_bitfile,
    preset_bitfile,
)
from .kernels import (
    KernelBinding,
    KernelType,
    MatrixBatch,
    frame_bytes,
    kernel_step,
    loopback_binding,
    make_kernel,
    matmul_oracle,
    preset,
)
from .middleware import (
    CommandService,
    Rc3eClient,
    ServerThread,
    ServiceConfig,
    build_hypervisor,
    default_fleet,
    make_server,
    parse_listen,
    state_digest,
)
from .rc2f import (
    ControlSignal,
    DeviceHandle,
    FifoEndpoint,
    KernelReport,
    Rc2fRuntime,
    framework_footprint,
    utilization_percent,
)
from .simclock import (
    LatencyTable,
    LinkScheduler,
    SimClock,
    SimEvent,
    StreamSession,
    charge_latency,
    contended_rates,
)

__version__ = "0.1.0"

__all__ = [
    "errors",
    "Fleet",
    "FpgaModel",
    "Node",
    "PhysicalFpga",
    "VSlot",
    "ResourceVector",
    "SlotState",
    "DeviceMode",
    "PowerState",
    "MODEL_CATALOG",
    "XC7VX485T",
    "XC6VLX240T",
    "Hypervisor",
    "ServiceModel",
    "Lease",
    "Bitfile",
    "BitfileKind",
    "BatchJob",
    "JobState",
    "CompletionReceipt",
    "StatusReport",
    "preset_bitfile",
    "loopback_bitfile",
    "KernelBinding",
    "KernelType",
    "MatrixBatch",
    "matmul_oracle",
    "make_kernel",
    "kernel_step",
    "preset",
    "loopback_binding",
    "frame_bytes",
    "SimClock",
    "SimEvent",
    "LatencyTable",
    "LinkScheduler",
    "StreamSession",
    "contended_rates",
    "charge_latency",
    "Rc2fRuntime",
    "DeviceHandle",
    "FifoEndpoint",
    "KernelReport",
    "ControlSignal",
    "framework_footprint",
    "utilization_percent",
    "CommandService",
    "Rc3eClient",
    "ServerThread",
    "ServiceConfig",
    "build_hypervisor",
    "default_fleet",
    "make_server",
    "parse_listen",
    "state_digest",
]
