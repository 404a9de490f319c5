"""Fleet bookkeeping and the three ways to lease hardware.

Builds the default four-device fleet, walks through whole-device, slot, and
background leases, and shows how the allocator consolidates work onto already
powered devices so the rest of the fleet can stay clock gated.
"""

from rc3e import Hypervisor, ServiceModel, default_fleet, preset_bitfile


def show(hv, heading):
    print(f"\n== {heading}")
    for dev in hv.fleet.devices():
        host = hv.fleet.node(dev.node_id).hostname
        slots = "/".join(s.state.value for s in dev.slots)
        print(f"  fpga{dev.id} on {host}: mode={dev.mode.value} power={dev.power.value} [{slots}]")


def main():
    hv = Hypervisor(default_fleet())
    show(hv, "fresh fleet: everything unassigned and clock gated")

    # slot leases pack onto one device before a second one wakes
    a = hv.allocate("alice", ServiceModel.RAAAS, slots=1)
    b = hv.allocate("bob", ServiceModel.RAAAS, slots=2)
    print(f"\nalice -> device {a.device_id} slots {a.slot_indices}")
    print(f"bob   -> device {b.device_id} slots {b.slot_indices}")
    show(hv, "two tenants share fpga0; three devices still sleep")

    # a whole-device lease gets its own empty board
    root = hv.allocate("carol", ServiceModel.RSAAS)
    print(f"\ncarol -> whole device {root.device_id}")
    show(hv, "full-access lease woke the next empty device")

    # loading a design charges reconfiguration time on the virtual clock
    before = hv.clock.now()
    hv.configure(a.id, preset_bitfile(16), local=True)
    print(f"\nconfigure charged {hv.clock.now() - before} us of virtual time")

    report = hv.device_status(a.id, local=True)
    print(f"status: slot0 state={report.slots[0].state} design={report.slots[0].design}")

    for lease in (a, b, root):
        hv.release(lease.id)
    show(hv, "everything released: the fleet gates itself again")


if __name__ == "__main__":
    main()
