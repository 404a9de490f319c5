"""Background acceleration end to end: submit work, get verified results.

Two paths to the same hardware: the synchronous service call (the provider
allocates, configures, streams, and releases behind one function) and the
batch queue, where jobs wait for capacity in FIFO order.
"""

import numpy as np

from rc3e import (
    Hypervisor,
    JobState,
    MatrixBatch,
    ServiceModel,
    default_fleet,
    matmul_oracle,
    preset_bitfile,
)


def main():
    hv = Hypervisor(default_fleet())

    # one-call service: the lease never escapes the provider
    batch = MatrixBatch.generate(16, 64, seed=9)
    out, elapsed = hv.invoke_service("you", "matmul16", batch.payload)
    got = np.frombuffer(out, dtype="<f4").reshape(64, 16, 16)
    lhs, rhs = batch.pairs(16)
    want = np.array(matmul_oracle(lhs[0].tolist(), rhs[0].tolist()))
    worst = float(np.abs(got[0] - want).max())
    print(f"matmul16 service: 64 pairs in {elapsed} us of virtual time")
    print(f"  first product vs brute-force oracle: worst delta {worst:.2e}")

    # batch queue: three jobs race for the same fleet
    ids = []
    for i in range(3):
        payload = MatrixBatch.generate(16, 500, seed=10 + i).payload
        ids.append(
            hv.submit_job(f"lab{i}", ServiceModel.BAAAS, 1, preset_bitfile(16), payload)
        )
    print(f"\nsubmitted jobs {ids}; advancing virtual time until they settle")
    hv.wait_for_jobs()
    for job_id in ids:
        job = hv.job(job_id)
        assert job.state is JobState.DONE
        span = job.ended_at - job.started_at
        print(
            f"  job {job.id}: started {job.started_at} us, "
            f"ran {span} us, {len(job.output)} output bytes"
        )
    gated = all(d.power.value == "clock_gated" for d in hv.fleet.devices())
    print(f"\nfleet fully clock gated afterwards: {gated}")


if __name__ == "__main__":
    main()
