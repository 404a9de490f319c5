"""Virtual time, command latency accounting, and the shared-link transfer engine.

Time is a single integer microsecond counter.  Command latencies are charged
by advancing the clock, which also drives any in-flight transfers forward:
a long reconfiguration and a running stream overlap naturally.

Transfers are fluid: each active session progresses at a piecewise-constant
rate that only changes when the set of sessions sharing a device link changes
(or a cap changes), so the engine recomputes rates at those instants instead
of ticking.  1 MB/s is 10^6 bytes/s, i.e. exactly one byte per microsecond.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field, fields as dataclass_fields
from typing import Callable, Mapping, Sequence

from .errors import EmptyQueueBeforePredicate, UnknownLatencyKind

US_PER_MS = 1_000
US_PER_S = 1_000_000

# bytes-done comparisons; totals stay far below the float64 precision limit
_BYTE_EPS = 1e-6


@dataclass(frozen=True)
class SimEvent:
    time_us: int
    seq: int
    action: Callable[[], None]

    def __lt__(self, other: "SimEvent") -> bool:
        return (self.time_us, self.seq) < (other.time_us, other.seq)


class SimClock:
    """Discrete-event clock.  Events fire in (time, insertion order)."""

    def __init__(self, start_us: int = 0):
        self._now = start_us
        self._heap: list[SimEvent] = []
        self._seq = itertools.count()

    def now(self) -> int:
        return self._now

    def pending(self) -> int:
        return len(self._heap)

    def schedule(self, delay_us: int, action: Callable[[], None]) -> SimEvent:
        if delay_us < 0:
            raise ValueError("cannot schedule into the past")
        event = SimEvent(self._now + int(delay_us), next(self._seq), action)
        heapq.heappush(self._heap, event)
        return event

    def advance_to(self, target_us: int) -> int:
        """Run every event due by *target_us*, then set the clock there.

        Re-entrant: an event action may itself charge time or schedule more
        events; due events land on the same heap and run in order.
        """
        if target_us < self._now:
            raise ValueError("cannot advance backwards")
        while self._heap and self._heap[0].time_us <= target_us:
            event = heapq.heappop(self._heap)
            if event.time_us > self._now:
                self._now = event.time_us
            event.action()
        if target_us > self._now:
            self._now = target_us
        return self._now

    def advance_by(self, duration_us: int) -> int:
        return self.advance_to(self._now + int(duration_us))

    def advance_until(self, predicate: Callable[[], bool]) -> int:
        """Run events until *predicate* holds; error if the queue drains first."""
        if predicate():
            return self._now
        while self._heap:
            event = heapq.heappop(self._heap)
            if event.time_us > self._now:
                self._now = event.time_us
            event.action()
            if predicate():
                return self._now
        raise EmptyQueueBeforePredicate("event queue drained before condition held")

    def drain(self) -> int:
        """Run every remaining event; returns the final time."""
        while self._heap:
            event = heapq.heappop(self._heap)
            if event.time_us > self._now:
                self._now = event.time_us
            event.action()
        return self._now


def _freeze_ucs(mapping: Mapping[int, int]) -> tuple[tuple[int, int], ...]:
    return tuple(sorted((int(k), int(v)) for k, v in mapping.items()))


@dataclass(frozen=True)
class LatencyTable:
    """Measured command costs in microseconds, split by invocation path.

    The remote path adds network hops between tenant tooling and the node
    that holds the device; the local path is same-host.  ucs access scales
    with how many virtual FPGAs the device currently hosts, stepping to the
    next measured count when in between.
    """

    status_local_us: int = 11_000
    status_remote_us: int = 80_000
    config_full_local_us: int = 28_370_000
    config_full_remote_us: int = 29_513_000
    pr_local_us: int = 732_000
    pr_remote_us: int = 912_000
    gcs_access_us: int = 198
    ucs_access_us: tuple[tuple[int, int], ...] = ((1, 208), (2, 221), (4, 273))

    def __post_init__(self):
        pairs = [
            (self.status_local_us, self.status_remote_us),
            (self.config_full_local_us, self.config_full_remote_us),
            (self.pr_local_us, self.pr_remote_us),
        ]
        for local, remote in pairs:
            if local <= 0 or remote < local:
                raise ValueError("latency pairs must be positive with remote >= local")
        if self.gcs_access_us <= 0 or not self.ucs_access_us:
            raise ValueError("access latencies must be positive")

    def ucs_cost_us(self, vfpga_count: int) -> int:
        """Cost of one ucs access on a device hosting *vfpga_count* regions."""
        count = max(1, vfpga_count)
        for threshold, cost in self.ucs_access_us:
            if count <= threshold:
                return cost
        return self.ucs_access_us[-1][1]

    def duration_us(self, kind: str, path: str = "remote", vfpga_count: int = 1) -> int:
        if path not in ("local", "remote"):
            raise UnknownLatencyKind(f"unknown path: {path}")
        remote = path == "remote"
        if kind == "status":
            return self.status_remote_us if remote else self.status_local_us
        if kind == "config_full":
            return self.config_full_remote_us if remote else self.config_full_local_us
        if kind == "pr":
            return self.pr_remote_us if remote else self.pr_local_us
        if kind == "gcs_access":
            return self.gcs_access_us
        if kind == "ucs_access":
            return self.ucs_cost_us(vfpga_count)
        raise UnknownLatencyKind(f"unknown latency kind: {kind}")

    def to_json(self) -> dict:
        doc = {
            f.name: getattr(self, f.name)
            for f in dataclass_fields(self)
            if f.name != "ucs_access_us"
        }
        doc["ucs_access_us"] = {str(k): v for k, v in self.ucs_access_us}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "LatencyTable":
        kwargs = dict(doc)
        if "ucs_access_us" in kwargs:
            kwargs["ucs_access_us"] = _freeze_ucs(kwargs["ucs_access_us"])
        return cls(**kwargs)


def charge_latency(
    clock: SimClock, table: LatencyTable, kind: str, path: str = "remote", vfpga_count: int = 1
) -> int:
    """Advance the clock by the cost of one command; returns the charge in µs."""
    cost = table.duration_us(kind, path, vfpga_count)
    clock.advance_by(cost)
    return cost


def contended_rates(caps: Sequence[float], bandwidth: float) -> list[float]:
    """Max-min fair split of *bandwidth* across sessions with per-session caps.

    Progressive filling: everyone's rate rises together; a session freezes at
    its own cap and the slack is re-split among the rest.  Uncapped sessions
    pass ``math.inf``.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    for cap in caps:
        if cap <= 0:
            raise ValueError("session caps must be positive")
    rates = [0.0] * len(caps)
    unsat = list(range(len(caps)))
    remaining = float(bandwidth)
    while unsat:
        share = remaining / len(unsat)
        capped = [i for i in unsat if caps[i] <= share]
        if not capped:
            for i in unsat:
                rates[i] = share
            break
        for i in capped:
            rates[i] = float(caps[i])
        remaining = max(0.0, remaining - sum(caps[i] for i in capped))
        unsat = [i for i in unsat if caps[i] > share]
    return rates


@dataclass
class StreamSession:
    """One device-link flow with a demand that may keep growing.

    ``total_bytes`` is cumulative demand; ``bytes_done`` trails it at the
    contended rate.  A session whose demand is met goes idle and reactivates
    when the demand grows.
    """

    id: int
    device_id: int
    label: str = ""
    compute_cap: float = math.inf  # MB/s ceiling from the consuming core
    total_bytes: float = 0.0
    bytes_done: float = 0.0
    rate_now: float = 0.0  # MB/s == bytes/µs
    active: bool = False
    closed: bool = False
    _last_us: int = 0
    _epoch: int = 0
    _watchers: list = field(default_factory=list)  # heap of (threshold, seq, cb)

    def remaining(self) -> float:
        return max(0.0, self.total_bytes - self.bytes_done)


class LinkScheduler:
    """Shares each device's host link across that device's active sessions.

    Rates follow max-min fairness with per-session compute caps.  All timing
    is event-driven: on any membership or demand change the scheduler settles
    progress at the old rates, fires due watchers, recomputes rates, and
    schedules the next boundary event per session.
    """

    def __init__(self, clock: SimClock, bandwidth_for: Callable[[int], float]):
        self._clock = clock
        self._bandwidth_for = bandwidth_for
        self._active: dict[int, list[StreamSession]] = {}
        self._ids = itertools.count()
        self._watch_seq = itertools.count()

    # --- session lifecycle -------------------------------------------------

    def open_session(
        self,
        device_id: int,
        *,
        compute_cap: float = math.inf,
        label: str = "",
        total_bytes: float = 0.0,
    ) -> StreamSession:
        session = StreamSession(
            id=next(self._ids),
            device_id=device_id,
            label=label,
            compute_cap=compute_cap,
            total_bytes=float(total_bytes),
            _last_us=self._clock.now(),
        )
        if session.remaining() > _BYTE_EPS:
            self._activate(session)
        return session

    def extend(self, session: StreamSession, added_bytes: float) -> None:
        """Grow the session's demand; reactivates an idle session."""
        if session.closed:
            raise ValueError("session is closed")
        if added_bytes < 0:
            raise ValueError("demand only grows")
        self._sync(session.device_id)
        session.total_bytes += float(added_bytes)
        if not session.active and session.remaining() > _BYTE_EPS:
            self._activate(session)
        else:
            self._touch(session.device_id)

    def set_cap(self, session: StreamSession, compute_cap: float) -> None:
        if compute_cap <= 0:
            raise ValueError("cap must be positive")
        self._sync(session.device_id)
        session.compute_cap = compute_cap
        self._touch(session.device_id)

    def close(self, session: StreamSession) -> None:
        """Drop the session immediately; pending watchers never fire."""
        if session.closed:
            return
        session.closed = True
        session._watchers.clear()
        session._epoch += 1
        if session.active:
            session.active = False
            self._sync(session.device_id)
            self._active[session.device_id].remove(session)
            self._touch(session.device_id)

    # --- observation ----------------------------------------------------------

    def progress(self, session: StreamSession) -> float:
        """Bytes transferred as of now (settles the device first)."""
        if session.active:
            self._touch(session.device_id)
        return session.bytes_done

    def watch(self, session: StreamSession, threshold_bytes: float, callback) -> None:
        """Invoke *callback(session)* at the instant bytes_done reaches the threshold."""
        if session.closed:
            raise ValueError("session is closed")
        if session.bytes_done + _BYTE_EPS >= threshold_bytes:
            callback(session)
            return
        heapq.heappush(session._watchers, (float(threshold_bytes), next(self._watch_seq), callback))
        if session.active:
            self._touch(session.device_id)

    def wait_for(self, session: StreamSession, threshold_bytes: float) -> int:
        """Advance the clock until the session has moved *threshold_bytes*."""
        fired = []
        self.watch(session, threshold_bytes, lambda _s: fired.append(self._clock.now()))
        if not fired:
            self._clock.advance_until(lambda: bool(fired))
        return fired[0]

    def run_transfer(self, session: StreamSession) -> int:
        """Advance the clock until the session's current demand is fully moved."""
        return self.wait_for(session, session.total_bytes)

    def active_sessions(self, device_id: int) -> list[StreamSession]:
        return list(self._active.get(device_id, ()))

    # --- internals ---------------------------------------------------------------

    def _activate(self, session: StreamSession) -> None:
        session.active = True
        session._last_us = self._clock.now()
        self._active.setdefault(session.device_id, []).append(session)
        self._touch(session.device_id)

    def _sync(self, device_id: int) -> None:
        """Advance bytes_done to the current instant at the standing rates."""
        now = self._clock.now()
        for session in self._active.get(device_id, ()):
            dt = now - session._last_us
            if dt > 0:
                session.bytes_done = min(
                    session.total_bytes, session.bytes_done + session.rate_now * dt
                )
            session._last_us = now

    def _touch(self, device_id: int) -> None:
        """Settle, retire satisfied sessions, recompute rates, fire callbacks."""
        self._sync(device_id)
        sessions = self._active.get(device_id, [])
        due = []
        for session in list(sessions):
            while session._watchers and session._watchers[0][0] <= session.bytes_done + _BYTE_EPS:
                _thr, _seq, callback = heapq.heappop(session._watchers)
                due.append((callback, session))
            if session.remaining() <= _BYTE_EPS:
                session.bytes_done = session.total_bytes
                session.active = False
                sessions.remove(session)
        self._retime(device_id)
        for callback, session in due:
            callback(session)

    def _retime(self, device_id: int) -> None:
        sessions = self._active.get(device_id, [])
        for session in sessions:
            session._epoch += 1
        if not sessions:
            return
        bandwidth = self._bandwidth_for(device_id)
        rates = contended_rates([s.compute_cap for s in sessions], bandwidth)
        now = self._clock.now()
        for session, rate in zip(sessions, rates):
            session.rate_now = rate
            session._last_us = now
            target = session.total_bytes
            if session._watchers and session._watchers[0][0] < target:
                target = session._watchers[0][0]
            gap = max(0.0, target - session.bytes_done)
            # shave float noise, then never undershoot a whole microsecond
            dt = max(1, math.ceil((gap / rate) * (1.0 - 1e-12) - 1e-9))
            epoch = session._epoch
            self._clock.schedule(dt, lambda s=session, e=epoch: self._on_timer(s, e))

    def _on_timer(self, session: StreamSession, epoch: int) -> None:
        if session.closed or not session.active or session._epoch != epoch:
            return  # superseded by a later reschedule
        self._touch(session.device_id)
