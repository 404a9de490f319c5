import math
import random

import numpy as np
import pytest

from oracles import waterlevel
from rc3e import LatencyTable, SimClock, charge_latency, contended_rates
from rc3e.errors import EmptyQueueBeforePredicate, UnknownLatencyKind


def test_clock_starts_at_zero_and_advances():
    clock = SimClock()
    assert clock.now() == 0
    assert clock.advance_by(250) == 250
    assert clock.now() == 250


def test_events_fire_in_time_then_insertion_order():
    clock = SimClock()
    seen = []
    clock.schedule(10, lambda: seen.append("b"))
    clock.schedule(5, lambda: seen.append("a"))
    clock.schedule(10, lambda: seen.append("c"))
    clock.advance_by(10)
    assert seen == ["a", "b", "c"]


def test_event_actions_can_schedule_and_advance():
    clock = SimClock()
    seen = []

    def outer():
        seen.append(("outer", clock.now()))
        clock.schedule(5, lambda: seen.append(("inner", clock.now())))
        clock.advance_by(20)  # nested charge inside an event action

    clock.schedule(10, outer)
    clock.advance_by(100)
    assert seen == [("outer", 10), ("inner", 15)]
    assert clock.now() == 100


def test_advance_until_errors_on_drained_queue():
    clock = SimClock()
    clock.schedule(3, lambda: None)
    with pytest.raises(EmptyQueueBeforePredicate):
        clock.advance_until(lambda: False)


def test_advance_until_checks_between_events():
    clock = SimClock()
    flag = []
    clock.schedule(3, lambda: flag.append(1))
    clock.schedule(9, lambda: flag.append(2))
    assert clock.advance_until(lambda: bool(flag)) == 3
    assert clock.pending() == 1


def test_schedule_rejects_negative_delay():
    clock = SimClock()
    with pytest.raises(ValueError):
        clock.schedule(-1, lambda: None)
    with pytest.raises(ValueError):
        clock.advance_to(-5)


def test_latency_defaults():
    t = LatencyTable()
    assert t.duration_us("status", "local") == 11_000
    assert t.duration_us("status", "remote") == 80_000
    assert t.duration_us("config_full", "local") == 28_370_000
    assert t.duration_us("config_full", "remote") == 29_513_000
    assert t.duration_us("pr", "local") == 732_000
    assert t.duration_us("pr", "remote") == 912_000
    assert t.duration_us("gcs_access") == 198


@pytest.mark.parametrize(
    "count,cost", [(0, 208), (1, 208), (2, 221), (3, 273), (4, 273), (9, 273)]
)
def test_ucs_cost_steps_up_between_measured_counts(count, cost):
    t = LatencyTable()
    assert t.duration_us("ucs_access", vfpga_count=count) == cost


def test_latency_unknown_kind_and_path():
    t = LatencyTable()
    with pytest.raises(UnknownLatencyKind):
        t.duration_us("warp_drive")
    with pytest.raises(UnknownLatencyKind):
        t.duration_us("status", path="sideways")


def test_latency_json_round_trip():
    t = LatencyTable()
    again = LatencyTable.from_json(t.to_json())
    assert again == t
    partial = LatencyTable.from_json({"pr_remote_us": 900_000})
    assert partial.pr_remote_us == 900_000
    assert partial.status_local_us == 11_000


def test_charge_latency_advances_clock():
    clock = SimClock()
    table = LatencyTable()
    cost = charge_latency(clock, table, "pr", "remote")
    assert cost == 912_000
    assert clock.now() == 912_000


def test_contended_rates_uncapped_split_evenly():
    for n, each in [(1, 800.0), (2, 400.0), (4, 200.0)]:
        rates = contended_rates([math.inf] * n, 800.0)
        assert rates == [each] * n


def test_contended_rates_caps_bind_and_slack_redistributes():
    # one slow consumer frees bandwidth for the others
    rates = contended_rates([100.0, math.inf, math.inf], 800.0)
    assert rates == [100.0, 350.0, 350.0]
    # all capped below fair share: link is underused
    rates = contended_rates([200.0, 100.0], 800.0)
    assert rates == [200.0, 100.0]


def test_contended_rates_rejects_bad_input():
    with pytest.raises(ValueError):
        contended_rates([0.0], 800.0)
    with pytest.raises(ValueError):
        contended_rates([100.0], 0.0)


def test_contended_rates_matches_waterlevel_oracle():
    rng = random.Random(42)
    for _ in range(300):
        n = rng.randint(1, 8)
        caps = [rng.uniform(10, 1200) for _ in range(n)]
        bandwidth = rng.uniform(100, 1000)
        got = contended_rates(caps, bandwidth)
        want = waterlevel(
            np.array(caps), np.ones(n, dtype=np.bool_), float(bandwidth)
        )
        assert got == pytest.approx(list(want), rel=1e-9)
        # feasibility: caps respected, link never oversubscribed
        assert all(r <= c + 1e-9 for r, c in zip(got, caps))
        assert sum(got) <= bandwidth + 1e-6
