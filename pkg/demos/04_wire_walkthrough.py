"""The full client story over the wire protocol, with the clock arithmetic.

Runs an in-process server, then drives it exactly like the ``rc3e`` command
line would: allocate, configure, stream a workload through the register and
FIFO interfaces, and release.  Every reply carries the virtual clock, so the
charges can be checked against the latency table by hand.
"""

import base64
import math

from rc3e import (
    CommandService,
    Hypervisor,
    MatrixBatch,
    Rc3eClient,
    ServerThread,
    default_fleet,
)


def main():
    service = CommandService(Hypervisor(default_fleet()))
    batch = MatrixBatch.generate(16, 100, seed=8)
    payload_b64 = base64.b64encode(batch.payload).decode("ascii")

    with ServerThread(service) as server:
        print(f"server listening on {server.address}")
        with Rc3eClient(address=server.address, user="demo") as client:
            lease = client.request("ALLOC", {"model": "raaas", "slots": 1})
            print(
                f"ALLOC     -> lease {lease['lease_id']} on device {lease['device_id']}"
                f" slots {lease['slot_indices']} (clock {client.last_sim_time} us)"
            )

            cfg = client.request(
                "CONFIGURE", {"lease_id": lease["lease_id"], "bitfile": "mm16"}
            )
            print(
                f"CONFIGURE -> charged {cfg['charged_us']} us"
                f" (remote partial reconfiguration; clock {client.last_sim_time} us)"
            )

            result = client.request(
                "EXEC",
                {
                    "lease_id": lease["lease_id"],
                    "ops": [
                        {"op": "kernel_start"},
                        {"op": "put", "data_b64": payload_b64},
                        {"op": "get", "n": 100 * 1024},
                        {"op": "kernel_stop"},
                    ],
                },
            )
            predicted = 208 + math.ceil(len(batch.payload) / 509) + 208
            print(
                f"EXEC      -> {len(result['results'])} ops in {result['elapsed_us']} us"
                f" (predicted {predicted}: start 208 + stream"
                f" {math.ceil(len(batch.payload) / 509)} + stop 208)"
            )
            output = base64.b64decode(result["outputs_b64"][0])
            print(f"             {len(output)} result bytes back")

            client.request("RELEASE", {"lease_id": lease["lease_id"]})
            listing = client.request("LIST", {})
            powers = {d["power"] for d in listing["devices"]}
            print(f"RELEASE   -> device powers now {sorted(powers)}")
            print(f"final virtual clock: {client.last_sim_time} us")


if __name__ == "__main__":
    main()
