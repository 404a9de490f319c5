"""Software stand-ins for user cores: loopback and a streaming matrix multiplier.

A core consumes its input FIFO in fixed-size frames and emits results on the
output FIFO.  The matrix core's frame is one operand pair (two n-by-n float32
matrices, row-major, little-endian); each frame yields one n-by-n product.
Calibrated presets carry the measured fabric footprint and sustained rate of
the hardware builds they stand in for.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, MalformedFrame, NoPreset, UnknownKernelKind
from .fleet import ResourceVector

FLOAT_BYTES = 4


def frame_bytes(n: int) -> int:
    """Input frame size for one operand pair of n-by-n float32 matrices."""
    return 2 * n * n * FLOAT_BYTES


def result_bytes(n: int) -> int:
    return n * n * FLOAT_BYTES


class KernelType(enum.Enum):
    LOOPBACK = "loopback"
    MATMUL_STREAM = "matmul_stream"


@dataclass(frozen=True)
class KernelBinding:
    """What runs behind a configured region: core type, shape, calibration.

    ``compute_rate`` is the core's sustained consumption ceiling in MB/s;
    ``None`` means the core keeps up with the host link.  ``footprint`` is the
    fabric cost of the whole build (all cores of a multi-core design).
    """

    type: KernelType
    params: Mapping[str, int]
    compute_rate: Optional[float]
    footprint: ResourceVector

    def cap(self) -> float:
        return float("inf") if self.compute_rate is None else float(self.compute_rate)

    def to_json(self) -> dict:
        return {"type": self.type.value, "params": dict(self.params)}

    @classmethod
    def from_json(
        cls,
        doc: dict,
        compute_rate: Optional[float] = None,
        footprint: ResourceVector = ResourceVector(),
    ) -> "KernelBinding":
        try:
            ktype = KernelType(doc["type"])
        except (KeyError, ValueError):
            raise UnknownKernelKind(f"unknown kernel type: {doc.get('type')!r}") from None
        return cls(
            type=ktype,
            params={str(k): int(v) for k, v in dict(doc.get("params", {})).items()},
            compute_rate=compute_rate,
            footprint=footprint,
        )


def matmul_oracle(a: Sequence[Sequence[float]], b: Sequence[Sequence[float]]) -> list[list[float]]:
    """Textbook triple-loop product, double-precision accumulation.

    Deliberately independent of the streaming core: no numpy, no blocking.
    """
    n = len(a)
    if n == 0 or any(len(row) != n for row in a):
        raise DimensionMismatch("left operand is not square")
    if len(b) != n or any(len(row) != n for row in b):
        raise DimensionMismatch("operand shapes differ")
    out = [[0.0] * n for _ in range(n)]
    for i in range(n):
        a_i = a[i]
        out_i = out[i]
        for k in range(n):
            a_ik = float(a_i[k])
            b_k = b[k]
            for j in range(n):
                out_i[j] += a_ik * float(b_k[j])
    return out


class LoopbackKernel:
    """Echoes input to output byte for byte; any framing is legal."""

    def __init__(self):
        self.bytes_seen = 0

    def step(self, data: bytes) -> bytes:
        self.bytes_seen += len(data)
        return bytes(data)

    def close(self) -> None:
        pass

    def reset(self) -> None:
        self.bytes_seen = 0


class MatmulStreamKernel:
    """Buffers the input stream into operand-pair frames and multiplies them."""

    def __init__(self, n: int):
        if n <= 0:
            raise DimensionMismatch(f"matrix size must be positive, got {n}")
        self.n = n
        self._buf = bytearray()

    def step(self, data: bytes) -> bytes:
        self._buf.extend(data)
        frame = frame_bytes(self.n)
        whole = len(self._buf) // frame
        if whole == 0:
            return b""
        raw = bytes(self._buf[: whole * frame])
        del self._buf[: whole * frame]
        pairs = np.frombuffer(raw, dtype="<f4").reshape(whole, 2, self.n, self.n)
        products = pairs[:, 0] @ pairs[:, 1]
        return products.astype("<f4").tobytes()

    def close(self) -> None:
        if self._buf:
            raise MalformedFrame(
                f"stream ended mid-frame: {len(self._buf)} of {frame_bytes(self.n)} bytes buffered"
            )

    def reset(self) -> None:
        self._buf.clear()


def make_kernel(binding: KernelBinding):
    if binding.type is KernelType.LOOPBACK:
        return LoopbackKernel()
    if binding.type is KernelType.MATMUL_STREAM:
        try:
            n = int(binding.params["n"])
        except KeyError:
            raise DimensionMismatch("matmul binding needs params['n']") from None
        return MatmulStreamKernel(n)
    raise UnknownKernelKind(f"unknown kernel type: {binding.type}")


def kernel_step(kernel, data: bytes) -> bytes:
    """Feed bytes through a core instance; returns whatever it produced."""
    return kernel.step(data)


# Calibrated matrix-core builds: (n, cores) -> (fabric footprint of the whole
# build, per-core sustained rate in MB/s).  Multi-core builds place one core
# per region, so a build's deployment span equals its core count.
_MATMUL_PRESETS: dict[tuple[int, int], tuple[ResourceVector, float]] = {
    (16, 1): (ResourceVector(lut=25_298, ff=41_654, dsp=80, bram36=14), 509.0),
    (16, 2): (ResourceVector(lut=44_408, ff=76_963, dsp=160, bram36=19), 509.0),
    (16, 4): (ResourceVector(lut=81_761, ff=146_974, dsp=320, bram36=28), 509.0),
    (32, 1): (ResourceVector(lut=64_711, ff=125_715, dsp=160, bram36=14), 279.0),
    (32, 2): (ResourceVector(lut=123_249, ff=245_103, dsp=320, bram36=19), 279.0),
}


def preset(n: int, cores_hint: int = 1) -> KernelBinding:
    """Calibrated matrix-core build for size *n* with at least *cores_hint* cores.

    The hint rounds up to the nearest available build; params carry the actual
    core count under ``"cores"``.
    """
    available = sorted(c for (size, c) in _MATMUL_PRESETS if size == n)
    if not available:
        raise NoPreset(f"no calibrated build for {n}x{n} matrices")
    for cores in available:
        if cores >= cores_hint:
            footprint, rate = _MATMUL_PRESETS[(n, cores)]
            return KernelBinding(
                type=KernelType.MATMUL_STREAM,
                params={"n": n, "cores": cores},
                compute_rate=rate,
                footprint=footprint,
            )
    raise NoPreset(f"no {n}x{n} build with {cores_hint} cores (largest is {available[-1]})")


def loopback_binding() -> KernelBinding:
    """Diagnostic echo core; consumes as fast as the link can feed it."""
    return KernelBinding(
        type=KernelType.LOOPBACK,
        params={},
        compute_rate=None,
        footprint=ResourceVector(),
    )


@dataclass(frozen=True)
class MatrixBatch:
    """A run of operand pairs packed back to back in wire order."""

    count: int
    payload: bytes

    @classmethod
    def generate(cls, n: int, count: int, seed: int) -> "MatrixBatch":
        rng = np.random.default_rng(seed)
        pairs = rng.uniform(-1.0, 1.0, size=(count, 2, n, n)).astype("<f4")
        return cls(count=count, payload=pairs.tobytes())

    @classmethod
    def from_payload(cls, payload: bytes, n: int) -> "MatrixBatch":
        frame = frame_bytes(n)
        if len(payload) % frame:
            raise MalformedFrame(
                f"payload length {len(payload)} is not a multiple of the {frame}-byte frame"
            )
        return cls(count=len(payload) // frame, payload=payload)

    def pairs(self, n: int):
        """Operand arrays shaped (count, n, n); returns (A, B)."""
        arr = np.frombuffer(self.payload, dtype="<f4").reshape(self.count, 2, n, n)
        return arr[:, 0], arr[:, 1]
