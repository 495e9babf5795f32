"""Userspace UDP impairment proxy modelling a constrained cellular uplink.

The link is a single FIFO bottleneck: random loss on arrival, tail drop
when the byte queue is full, serialization at the link capacity, then a
propagation delay of ``max(0, Normal(base_latency, jitter))``. Delivery
times never decrease, so the link does not reorder.

Jitter is drawn once per coherence slot (``jitter_coherence_ms``) rather
than once per packet. With a fresh draw per packet, the no-reordering rule
turns into a running maximum over closely spaced packets and inflates the
median delay well above ``base_latency``. A slot-wise draw keeps the
per-packet marginal at ``Normal(base, jitter)`` and keeps the inflation
small. Set the coherence to 0 for per-packet draws.

:class:`LinkModel` is the clock-agnostic core. :class:`Proxy` drives it in
real time between two UDP sockets, one model per direction.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import select
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

log = logging.getLogger(__name__)

MTU = 1400
SATURATION_MS = 100.0


@dataclass(frozen=True)
class LinkProfile:
    capacity: float  # bit/s
    base_latency_ms: float = 0.0
    jitter_stddev_ms: float = 0.0
    loss_rate: float = 0.0
    queue_limit: int = 64 * MTU  # bytes
    jitter_coherence_ms: float = 150.0
    name: str = "custom"

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must lie in [0, 1]")
        if self.queue_limit < 2 * MTU:
            raise ValueError(f"queue_limit must be at least {2 * MTU} bytes")
        if self.base_latency_ms < 0 or self.jitter_stddev_ms < 0 or self.jitter_coherence_ms < 0:
            raise ValueError("latency, jitter and coherence must be non-negative")

    def serialization_s(self, nbytes: int) -> float:
        return nbytes * 8 / self.capacity

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "LinkProfile":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown link profile fields: {sorted(unknown)}")
        return cls(**doc)


def _cellular(name: str, capacity_kbit: float) -> LinkProfile:
    cap = capacity_kbit * 1000.0
    # eight seconds of buffering: deep enough for the sweep's 5 s cutoff
    return LinkProfile(
        capacity=cap, base_latency_ms=82.0, jitter_stddev_ms=32.0, loss_rate=0.005,
        queue_limit=int(cap), jitter_coherence_ms=150.0, name=name,
    )


NAMED_PROFILES: Dict[str, LinkProfile] = {
    "poor_4g": _cellular("poor_4g", 600),
    "medium_4g": _cellular("medium_4g", 2000),
}


def load_profile(profile: Union[str, Path, LinkProfile]) -> LinkProfile:
    """A named profile, or a JSON file holding LinkProfile fields."""
    if isinstance(profile, LinkProfile):
        return profile
    if str(profile) in NAMED_PROFILES:
        return NAMED_PROFILES[str(profile)]
    path = Path(profile)
    if not path.exists():
        raise ValueError(f"unknown profile {profile!r}: not a named profile or a JSON file")
    with open(path) as fh:
        doc = json.load(fh)
    doc.setdefault("name", path.stem)
    return LinkProfile.from_dict(doc)


# -- link core ---------------------------------------------------------------

DELIVERED, LOST, DROPPED = "delivered", "lost", "dropped"

# Linear interpolation between independent knots averages their variance
# down to 2/3; widening the knots by sqrt(3/2) restores the profile's stddev.
_KNOT_SCALE = math.sqrt(1.5)


@dataclass
class Outcome:
    fate: str
    arrival: float
    delivery: Optional[float] = None
    queue_delay: float = 0.0
    queue_bytes: int = 0  # bytes in the bottleneck after this arrival

    @property
    def one_way(self) -> Optional[float]:
        return None if self.delivery is None else self.delivery - self.arrival


class LinkModel:
    """Deterministic (given the seed) per-packet link behaviour.

    Arrival times passed to :meth:`offer` must be non-decreasing; they are
    seconds on any clock whose origin is the start of the link.
    """

    def __init__(self, profile: LinkProfile, seed: int = 0):
        self.profile = profile
        loss_ss, jitter_ss = np.random.SeedSequence(seed).spawn(2)
        self._loss_rng = np.random.default_rng(loss_ss)
        self._jitter_rng = np.random.default_rng(jitter_ss)
        self._inflight: Deque[Tuple[float, int]] = deque()  # (service end, size)
        self._queued = 0
        self._busy_until = 0.0
        self._last_delivery = 0.0
        self._knots: Deque[float] = deque()
        self._knot_slot = -1  # slot index of the newest knot
        self.packets_in = 0
        self.delivered = 0
        self.lost_random = 0
        self.dropped_queue = 0

    def _knot(self, slot: int) -> float:
        # one draw per slot, in slot order, so the jitter depends only on the seed
        p = self.profile
        while self._knot_slot < slot:
            self._knots.append(self._jitter_rng.normal(p.base_latency_ms, p.jitter_stddev_ms * _KNOT_SCALE))
            self._knot_slot += 1
            if len(self._knots) > 2:
                self._knots.popleft()
        return self._knots[slot - self._knot_slot - 1]

    def _propagation(self, t: float) -> float:
        """One-way propagation delay (s) for a packet leaving the bottleneck at ``t``.

        With a coherence time the delay is piecewise linear between per-slot
        knots, so it drifts instead of jumping and rarely outruns the clock
        (which would force a hold-back to keep FIFO order).
        """
        p = self.profile
        if p.jitter_stddev_ms == 0:
            return p.base_latency_ms / 1000.0
        if p.jitter_coherence_ms > 0:
            pos = t * 1000.0 / p.jitter_coherence_ms
            k = math.floor(pos)
            a, b = self._knot(k), self._knot(k + 1)
            d = a + (b - a) * (pos - k)
        else:
            d = self._jitter_rng.normal(p.base_latency_ms, p.jitter_stddev_ms)
        return max(0.0, d) / 1000.0

    def queue_bytes(self, t: float) -> int:
        """Bytes still waiting for or in serialization at time ``t``."""
        while self._inflight and self._inflight[0][0] <= t:
            self._queued -= self._inflight.popleft()[1]
        return self._queued

    def offer(self, t: float, size: int) -> Outcome:
        p = self.profile
        self.packets_in += 1
        queued = self.queue_bytes(t)
        if p.loss_rate > 0 and self._loss_rng.random() < p.loss_rate:
            self.lost_random += 1
            return Outcome(LOST, t, queue_bytes=queued)
        if queued + size > p.queue_limit:
            self.dropped_queue += 1
            return Outcome(DROPPED, t, queue_bytes=queued)
        start = max(t, self._busy_until)
        end = start + p.serialization_s(size)
        self._busy_until = end
        self._inflight.append((end, size))
        self._queued += size
        delivery = max(self._last_delivery, end + self._propagation(end))
        self._last_delivery = delivery
        self.delivered += 1
        return Outcome(DELIVERED, t, delivery, start - t, self._queued)

    def counters(self) -> dict:
        return {
            "packets_in": self.packets_in,
            "packets_delivered": self.delivered,
            "packets_lost_random": self.lost_random,
            "packets_dropped_queue": self.dropped_queue,
        }


def simulate(profile: LinkProfile, arrivals: Sequence[float], sizes, seed: int = 0) -> List[Outcome]:
    """Run a packet trace through a fresh :class:`LinkModel` in virtual time."""
    sizes = np.broadcast_to(np.asarray(sizes), (len(arrivals),))
    model = LinkModel(profile, seed)
    return [model.offer(float(t), int(s)) for t, s in zip(arrivals, sizes)]


def constant_rate_trace(rate_bps: float, size: int, duration_s: float, start: float = 0.0) -> np.ndarray:
    n = int(duration_s * rate_bps / (size * 8))
    return start + np.arange(n) * (size * 8 / rate_bps)


# -- real-time proxy ---------------------------------------------------------

@dataclass
class _Second:
    delivered_bytes: int = 0
    delays_ms: List[float] = field(default_factory=list)
    queue_bytes: int = 0
    losses: int = 0


class _Direction:
    def __init__(self, model: LinkModel):
        self.model = model
        self.pending: Deque[Tuple[float, bytes, float]] = deque()  # (due, data, arrival)
        self.delays_ms: List[float] = []
        self.queue_delays_ms: List[float] = []


class ProxyError(Exception):
    pass


class Proxy:
    """Relays datagrams from ``listen`` to ``forward`` through a :class:`LinkModel`.

    Replies coming back from ``forward`` go to the most recent client through
    a second, independently seeded model with the same profile. Everything
    runs on one thread; the delivery queues are FIFO because delivery times
    are monotone.
    """

    def __init__(self, listen: Tuple[str, int], forward: Tuple[str, int],
                 profile: Union[str, LinkProfile], seed: int = 0):
        self.profile = profile = load_profile(profile)
        try:
            self.forward = socket.getaddrinfo(forward[0], forward[1], socket.AF_INET,
                                              socket.SOCK_DGRAM)[0][4]
        except socket.gaierror as exc:
            raise ProxyError(f"cannot resolve forward address {forward}: {exc}") from exc
        self.front = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.back = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        for s in (self.front, self.back):
            s.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
            s.setblocking(False)
        try:
            self.front.bind(listen)
            self.back.bind((listen[0], 0))
        except OSError as exc:
            self.front.close()
            self.back.close()
            raise ProxyError(f"cannot bind {listen}: {exc}") from exc
        self.up = _Direction(LinkModel(profile, seed))
        self.down = _Direction(LinkModel(profile, seed + 1_000_003))
        self.client: Optional[Tuple[str, int]] = None
        self.discarded_on_stop = 0
        self.send_errors = 0
        self._seconds: Dict[int, _Second] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._drain = True
        self._thread = threading.Thread(target=self._run, name="segjpeg-netsim", daemon=True)
        self.t0 = time.monotonic()

    @property
    def address(self) -> Tuple[str, int]:
        return self.front.getsockname()

    def start(self) -> "Proxy":
        self.t0 = time.monotonic()
        self._thread.start()
        return self

    def _second(self, t: float) -> _Second:
        k = int(t)
        sec = self._seconds.get(k)
        if sec is None:
            sec = self._seconds[k] = _Second()
        return sec

    def _ingest(self, sock, direction: _Direction, t: float):
        while True:
            try:
                data, peer = sock.recvfrom(65535)
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                # ICMP errors from an earlier send surface here; ignore
                return
            if sock is self.front:
                self.client = peer
            with self._lock:
                out = direction.model.offer(t, len(data))
                sec = self._second(t)
                if out.fate == DELIVERED:
                    direction.pending.append((out.delivery, data, t))
                    direction.queue_delays_ms.append(out.queue_delay * 1000)
                else:
                    sec.losses += 1
                sec.queue_bytes = max(sec.queue_bytes, out.queue_bytes)

    def _flush(self, now: float):
        for direction, sock, dest in ((self.up, self.back, self.forward),
                                      (self.down, self.front, self.client)):
            while direction.pending and direction.pending[0][0] <= now:
                due, data, arrival = direction.pending.popleft()
                if dest is not None:
                    try:
                        sock.sendto(data, dest)
                    except OSError:
                        self.send_errors += 1
                t = time.monotonic() - self.t0
                with self._lock:
                    direction.delays_ms.append((t - arrival) * 1000)
                    if direction is self.up:
                        sec = self._second(t)
                        sec.delivered_bytes += len(data)
                        sec.delays_ms.append((t - arrival) * 1000)

    def _next_due(self) -> Optional[float]:
        dues = [d.pending[0][0] for d in (self.up, self.down) if d.pending]
        return min(dues) if dues else None

    def _run(self):
        socks = [self.front, self.back]
        while True:
            now = time.monotonic() - self.t0
            if self._stop.is_set():
                if not self._drain or self._next_due() is None:
                    break
            due = self._next_due()
            timeout = 0.05 if due is None else min(0.05, max(0.0, due - now))
            try:
                ready, _, _ = select.select(socks, [], [], timeout)
            except (OSError, ValueError):
                break
            t = time.monotonic() - self.t0
            for s in ready:
                self._ingest(s, self.up if s is self.front else self.down, t)
            self._flush(time.monotonic() - self.t0)

    def stop(self, drain: bool = True, timeout: float = 15.0):
        """Stop relaying; with ``drain`` wait for queued packets to be delivered first."""
        self._drain = drain
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(timeout=timeout)
        with self._lock:
            for d in (self.up, self.down):
                self.discarded_on_stop += len(d.pending)
                d.pending.clear()
        self.front.close()
        self.back.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop(drain=False)

    def snapshot(self) -> dict:
        with self._lock:
            up = self.up
            delays = list(up.delays_ms)
            qd = list(up.queue_delays_ms)
            snap = up.model.counters()
            snap.update(
                downstream=self.down.model.counters(),
                in_flight=len(up.pending),
                discarded_on_stop=self.discarded_on_stop,
                median_delay_ms=float(np.median(delays)) if delays else None,
                p95_delay_ms=float(np.percentile(delays, 95)) if delays else None,
                p95_queue_delay_ms=float(np.percentile(qd, 95)) if qd else None,
            )
        return snap

    def upstream_delays_ms(self) -> List[float]:
        with self._lock:
            return list(self.up.delays_ms)

    def upstream_queue_delays_ms(self) -> List[float]:
        with self._lock:
            return list(self.up.queue_delays_ms)

    def stats_rows(self) -> List[dict]:
        """Per-second upstream statistics, oldest first."""
        with self._lock:
            items = sorted(self._seconds.items())
            return [
                {
                    "t_s": k,
                    "delivered_bytes": s.delivered_bytes,
                    "median_delay_ms": round(float(np.median(s.delays_ms)), 3) if s.delays_ms else "",
                    "queue_bytes": s.queue_bytes,
                    "losses": s.losses,
                }
                for k, s in items
            ]

    def stats_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=STATS_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.stats_rows())
        return buf.getvalue()


STATS_COLUMNS = ["t_s", "delivered_bytes", "median_delay_ms", "queue_bytes", "losses"]


def run_proxy(listen: Tuple[str, int], forward: Tuple[str, int],
              profile: Union[str, LinkProfile], seed: int = 0) -> Proxy:
    """Start a proxy thread and return its handle."""
    return Proxy(listen, forward, profile, seed).start()


# -- saturation sweep ---------------------------------------------------------

_PROBE = struct.Struct(">IIQ")  # step, seq, send time (ns since sweep start)


@dataclass
class SweepStep:
    rate_kbit: float
    sent: int = 0
    received: int = 0
    median_ms: Optional[float] = None  # over delivered probes
    p95_ms: Optional[float] = None
    # median over all sent probes, undelivered ones counted as infinitely late
    effective_median_ms: Optional[float] = None


def effective_median(latencies: Sequence[float], sent: int) -> float:
    """Median of ``sent`` samples where the undelivered ones are +inf."""
    if sent <= 0:
        return math.inf
    lat = sorted(latencies)
    k = (sent + 1) // 2  # 1-based rank of the (lower) median
    return lat[k - 1] if k <= len(lat) else math.inf


@dataclass
class SweepReport:
    profile: str
    rate_step_kbit: float
    dwell_s: float
    saturation_threshold_ms: float
    latency_cutoff_ms: float
    steps: List[SweepStep] = field(default_factory=list)
    saturation_kbit: Optional[float] = None
    stopped_by: str = ""

    def summary(self) -> str:
        if self.saturation_kbit is None:
            top = self.steps[-1].rate_kbit if self.steps else 0
            return f"{self.profile}: no saturation found up to {top:g} kbit/s"
        return f"{self.profile}: saturation at {self.saturation_kbit:g} kbit/s"

    def to_dict(self) -> dict:
        d = asdict(self)
        for step in d["steps"]:
            if step["effective_median_ms"] is not None and math.isinf(step["effective_median_ms"]):
                step["effective_median_ms"] = None
        d["summary"] = self.summary()
        return d

    def to_csv(self) -> str:
        def fmt(v):
            return "" if v is None else ("inf" if math.isinf(v) else round(v, 3))

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rate_kbit", "sent", "received", "median_ms", "p95_ms", "effective_median_ms"])
        for st in self.steps:
            w.writerow([st.rate_kbit, st.sent, st.received, fmt(st.median_ms),
                        fmt(st.p95_ms), fmt(st.effective_median_ms)])
        return buf.getvalue()


class _ProbeSink:
    def __init__(self, bind: Tuple[str, int]):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
        self.sock.bind(bind)
        self.sock.settimeout(0.05)
        self.latencies: Dict[int, List[float]] = {}
        self.lock = threading.Lock()
        self.t0_ns = time.monotonic_ns()
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self._run, name="segjpeg-probe-sink", daemon=True)

    def _run(self):
        while not self._stop.is_set():
            try:
                data = self.sock.recv(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            t = time.monotonic_ns() - self.t0_ns
            if len(data) < _PROBE.size:
                continue
            step, _seq, sent = _PROBE.unpack_from(data)
            with self.lock:
                self.latencies.setdefault(step, []).append((t - sent) / 1e6)

    def step_latencies(self, step: int) -> List[float]:
        with self.lock:
            return list(self.latencies.get(step, ()))

    def stop(self):
        self._stop.set()
        self.thread.join(timeout=2)
        self.sock.close()


def _send_probe_step(sock, dest, step: int, rate_bps: float, size: int,
                     dwell_s: float, t0_ns: int) -> int:
    interval = size * 8 / rate_bps
    pad = bytes(max(0, size - _PROBE.size))
    start = time.monotonic()
    n = int(round(dwell_s / interval))
    for seq in range(n):
        due = start + seq * interval
        now = time.monotonic()
        if due > now:
            time.sleep(due - now)
        try:
            sock.sendto(_PROBE.pack(step, seq, time.monotonic_ns() - t0_ns) + pad, dest)
        except OSError as exc:
            raise ProxyError(f"probe send to {dest} failed: {exc}") from exc
    return n


def saturation_sweep(
    profile: Union[str, LinkProfile],
    rate_step_kbit: float = 100.0,
    latency_cutoff_ms: float = 5000.0,
    dwell_s: float = 10.0,
    start_kbit: Optional[float] = None,
    max_kbit: Optional[float] = None,
    probe_size: int = 300,
    saturation_ms: float = SATURATION_MS,
    seed: int = 0,
    via: Optional[Tuple[Tuple[str, int], Tuple[str, int]]] = None,
) -> SweepReport:
    """Step a constant-rate probe stream up until the link saturates.

    The probe rate starts at ``start_kbit`` (default: one step) and rises by
    ``rate_step_kbit`` every ``dwell_s`` seconds without pausing, so a queue
    built at one step carries into the next. The saturation point is the
    first rate whose median one-way latency exceeds ``saturation_ms``. The
    sweep ends once a step's median passes ``latency_cutoff_ms`` or the rate
    would exceed ``max_kbit``.

    By default a private proxy with ``profile`` is started on loopback. Pass
    ``via=(proxy_listen, sink_bind)`` to probe an already running proxy that
    forwards to ``sink_bind``.
    """
    if rate_step_kbit <= 0:
        raise ValueError("rate step must be positive")
    prof = load_profile(profile)
    if via is None:
        sink = _ProbeSink(("127.0.0.1", 0))
        proxy = Proxy(("127.0.0.1", 0), sink.sock.getsockname(), prof, seed).start()
        target = proxy.address
    else:
        target, sink_bind = via
        sink = _ProbeSink(sink_bind)
        proxy = None
    sink.thread.start()
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    report = SweepReport(prof.name, rate_step_kbit, dwell_s, saturation_ms, latency_cutoff_ms)
    cutoff_s = latency_cutoff_ms / 1000.0
    ends: List[float] = []
    settled = 0

    def evaluate(i: int):
        st = report.steps[i]
        lat = sink.step_latencies(i)
        st.received = len(lat)
        if lat:
            st.median_ms = float(np.median(lat))
            st.p95_ms = float(np.percentile(lat, 95))
        st.effective_median_ms = effective_median(lat, st.sent)

    def settle(now: float) -> bool:
        # a step is judged once every probe of it has had the full cutoff to arrive;
        # anything still missing then is later than the cutoff
        nonlocal settled
        while settled < len(ends) and ends[settled] + cutoff_s <= now:
            evaluate(settled)
            st = report.steps[settled]
            log.info("step %g kbit/s: %d/%d probes, median %s ms", st.rate_kbit,
                     st.received, st.sent, st.effective_median_ms)
            settled += 1
            if st.effective_median_ms > latency_cutoff_ms:
                return True
        return False

    rate = start_kbit if start_kbit is not None else rate_step_kbit
    try:
        i = 0
        while True:
            if max_kbit is not None and rate > max_kbit + 1e-9:
                report.stopped_by = "max_rate"
                break
            report.steps.append(SweepStep(rate))
            report.steps[i].sent = _send_probe_step(
                sock, target, i, rate * 1000.0, probe_size, dwell_s, sink.t0_ns)
            ends.append(time.monotonic())
            if i == 0 and not sink.step_latencies(0):
                time.sleep(min(2.0, (prof.base_latency_ms + 4 * prof.jitter_stddev_ms) / 1000 + 0.5))
                if not sink.step_latencies(0):
                    raise ProxyError(f"no probe packets came back through {target}")
            if settle(time.monotonic()):
                report.stopped_by = "latency_cutoff"
                break
            i += 1
            rate += rate_step_kbit
        if report.stopped_by == "max_rate" and settled < len(ends):
            time.sleep(max(0.0, ends[-1] + cutoff_s - time.monotonic()))
            settle(math.inf)
        # steps sent after the one that tripped the cutoff are not reported
        del report.steps[settled:]
    finally:
        sock.close()
        if proxy is not None:
            proxy.stop(drain=False)
        sink.stop()
    for st in report.steps:
        if st.effective_median_ms > saturation_ms:
            report.saturation_kbit = st.rate_kbit
            break
    return report
