"""Reproduce the measured throughput table from the shared-link model.

N identical cores on one device split an 800 MB/s PCIe link max-min fairly;
each core is additionally capped by its own streaming rate (509 MB/s for the
16x16 core, 279 MB/s for the 32x32 one).  The uncapped loopback core shows
the raw 800/N ceiling.
"""

from rc3e import (
    ControlSignal,
    Hypervisor,
    MatrixBatch,
    ServiceModel,
    default_fleet,
    loopback_bitfile,
    preset_bitfile,
)


def run_streams(bitfile, cores, payload, touch=None):
    """Start identical streams on one device; per-core MB/s over the run."""
    hv = Hypervisor(default_fleet())
    handles = []
    for i in range(cores):
        lease = hv.allocate(f"u{i}", ServiceModel.RAAAS, slots=1)
        hv.configure(lease.id, bitfile, local=True)
        handles.append((hv.open_device(f"u{i}", lease.id), lease.slot_indices[0]))
    for handle, slot in handles:
        if touch:
            touch(hv, handle, slot)
        else:
            hv.runtime.kernel_start(handle, slot)
    start = hv.clock.now()
    for handle, slot in handles:
        hv.runtime.fifo_write(handle, slot, payload)
    rates = []
    for handle, slot in handles:
        hv.runtime.fifo_read(handle, slot, len(payload) if touch else len(payload) // 2)
        rates.append(len(payload) / (hv.clock.now() - start))
    return rates


def main():
    print("matmul cores on one shared link (measured values in parens):")
    rows = [
        (16, 1, "509"),
        (16, 2, "398"),
        (16, 4, "198"),
        (32, 1, "279"),
        (32, 2, "277"),
    ]
    for n, cores, measured in rows:
        payload = MatrixBatch.generate(n, 1000, seed=1).payload
        rates = run_streams(preset_bitfile(n), cores, payload)
        shown = ", ".join(f"{r:.1f}" for r in rates)
        print(f"  {cores} x mm{n}: {shown} MB/s per core  ({measured})")

    print("\nuncapped loopback ceiling (measured values in parens):")
    loop = loopback_bitfile()
    strobe = lambda hv, h, s: hv.runtime.control(h, ControlSignal.TEST_LOOPBACK, s)
    for cores, measured in ((1, "798"), (2, "397"), (4, "196")):
        rates = run_streams(loop, cores, bytes(1_600_000), touch=strobe)
        shown = ", ".join(f"{r:.1f}" for r in rates)
        print(f"  {cores} x loopback: {shown} MB/s per core  ({measured})")


if __name__ == "__main__":
    main()
