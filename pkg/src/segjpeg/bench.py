"""Glass-to-glass latency harness.

Sender, link proxy and receiver run as threads of one process, so every
timestamp comes from the same monotonic clock. The measured endpoint is
"decoded and ready to display"; camera exposure and monitor scan-out are
not part of it.
"""

from __future__ import annotations

import csv
import io
import logging
import queue
import socket
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .codec import BudgetUnattainable, RateBudget, decode, encode
from .frame import ShadePalette, default_palette
from .netsim import LinkProfile, Proxy, load_profile
from .sources import MaskSourceConfig, make_source
from .transport import DEFAULT_MTU, Pacer, Receiver, fragment, now_us

log = logging.getLogger(__name__)

SAMPLE_COLUMNS = [
    "frame_id", "capture_ts_us", "encode_done_ts_us", "first_packet_ts_us",
    "assembled_ts_us", "decoded_ts_us", "detect_done_ts_us",
]
STAGES = ("detect", "encode", "network", "decode")
MIN_BREAKDOWN_SAMPLES = 30
ENDPOINT_NOTE = (
    "G2G here runs from frame capture to decoded-and-ready-to-display on one host "
    "and one clock; camera and display hardware latency are not included."
)


class BenchError(Exception):
    pass


class RunFailed(BenchError):
    def __init__(self, message: str, transport_stats: Optional[dict] = None):
        super().__init__(message)
        self.transport_stats = transport_stats or {}


class InsufficientSamples(BenchError):
    pass


@dataclass
class G2GSample:
    frame_id: int
    capture_ts_us: int
    encode_done_ts_us: int
    first_packet_ts_us: int
    assembled_ts_us: int
    decoded_ts_us: int
    detect_done_ts_us: Optional[int] = None

    def __post_init__(self):
        order = [self.capture_ts_us, self.detect_done_ts_us, self.encode_done_ts_us,
                 self.first_packet_ts_us, self.assembled_ts_us, self.decoded_ts_us]
        order = [t for t in order if t is not None]
        if any(b < a for a, b in zip(order, order[1:])):
            raise ValueError(f"frame {self.frame_id}: timestamps out of pipeline order")

    @property
    def g2g_us(self) -> int:
        return self.decoded_ts_us - self.capture_ts_us

    def stage_us(self) -> Dict[str, int]:
        detect_done = self.capture_ts_us if self.detect_done_ts_us is None else self.detect_done_ts_us
        return {
            "detect": detect_done - self.capture_ts_us,
            "encode": self.encode_done_ts_us - detect_done,
            "network": self.assembled_ts_us - self.encode_done_ts_us,
            "decode": self.decoded_ts_us - self.assembled_ts_us,
        }


@dataclass
class StageStats:
    median_ms: float
    variance_ms2: float


@dataclass
class StageBreakdown:
    stages: Dict[str, StageStats]
    max_variance_stage: str


def stage_breakdown(samples: Sequence[G2GSample]) -> StageBreakdown:
    """Per-stage median and variance; flags the stage that varies most."""
    if len(samples) < MIN_BREAKDOWN_SAMPLES:
        raise InsufficientSamples(
            f"need at least {MIN_BREAKDOWN_SAMPLES} samples, got {len(samples)}"
        )
    per = {name: np.array([s.stage_us()[name] for s in samples], dtype=float) / 1000.0
           for name in STAGES}
    stats = {
        name: StageStats(float(np.median(v)), float(np.var(v)))
        for name, v in per.items()
    }
    worst = max(STAGES, key=lambda n: stats[n].variance_ms2)
    return StageBreakdown(stats, worst)


@dataclass
class LatencyReport:
    count: int
    median_ms: float
    mean_ms: float
    stddev_ms: float
    p5_ms: float
    p95_ms: float
    stages: Dict[str, StageStats] = field(default_factory=dict)
    max_variance_stage: Optional[str] = None
    frames_dropped: int = 0
    frames_sent: int = 0
    config: dict = field(default_factory=dict)
    transport: dict = field(default_factory=dict)
    note: str = ENDPOINT_NOTE

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        lines = [
            f"frames: {self.count} delivered, {self.frames_dropped} dropped, {self.frames_sent} sent",
            f"G2G median {self.median_ms:.1f} ms  mean {self.mean_ms:.1f}  sd {self.stddev_ms:.1f}"
            f"  p5 {self.p5_ms:.1f}  p95 {self.p95_ms:.1f}",
        ]
        for name, st in self.stages.items():
            flag = "  <- most variable" if name == self.max_variance_stage else ""
            lines.append(f"  {name:8s} median {st.median_ms:7.1f} ms  var {st.variance_ms2:9.1f} ms^2{flag}")
        lines.append(self.note)
        return "\n".join(lines)


def build_report(samples: Sequence[G2GSample], frames_sent: int = 0, frames_dropped: int = 0,
                 config: Optional[dict] = None, transport: Optional[dict] = None) -> LatencyReport:
    if not samples:
        raise RunFailed("no frames completed", transport)
    g = np.array([s.g2g_us for s in samples], dtype=float) / 1000.0
    stages, worst = {}, None
    if len(samples) >= MIN_BREAKDOWN_SAMPLES:
        bd = stage_breakdown(samples)
        stages, worst = bd.stages, bd.max_variance_stage
    return LatencyReport(
        count=len(samples),
        median_ms=float(np.median(g)),
        mean_ms=float(g.mean()),
        stddev_ms=float(g.std()),
        p5_ms=float(np.percentile(g, 5)),
        p95_ms=float(np.percentile(g, 95)),
        stages=stages,
        max_variance_stage=worst,
        frames_dropped=frames_dropped,
        frames_sent=frames_sent,
        config=config or {},
        transport=transport or {},
    )


def write_samples_csv(samples: Sequence[G2GSample], path_or_buf) -> None:
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_COLUMNS)
        for s in samples:
            w.writerow(["" if getattr(s, c) is None else getattr(s, c) for c in SAMPLE_COLUMNS])
    finally:
        if own:
            fh.close()


def read_samples_csv(path_or_buf) -> List[G2GSample]:
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, newline="") if own else path_or_buf
    try:
        rows = list(csv.DictReader(fh))
    finally:
        if own:
            fh.close()
    return [
        G2GSample(**{k: (int(v) if v != "" else None) for k, v in row.items() if k in SAMPLE_COLUMNS})
        for row in rows
    ]


# -- pipeline ------------------------------------------------------------------

@dataclass
class CodecConfig:
    bitrate_kbit: float = 500.0
    fps: float = 10.0
    mtu: int = DEFAULT_MTU
    palette: ShadePalette = field(default_factory=default_palette)
    # spread packets at bitrate_kbit; off sends each frame back to back
    pace: bool = True

    @property
    def budget(self) -> RateBudget:
        return RateBudget.from_kbit(self.bitrate_kbit, self.fps)


class _Pipeline:
    """Capture/encode thread -> paced sender thread -> [proxy] -> receiver thread."""

    def __init__(self, source_config: MaskSourceConfig, codec: CodecConfig,
                 profile: Optional[LinkProfile], seed: int):
        self.source = make_source(source_config)
        self.codec = codec
        self.seed = seed
        self.samples: List[G2GSample] = []
        self.capture_log: Dict[int, tuple] = {}
        self.packet_sent_us: Dict[tuple, int] = {}
        self.packet_latency_ms: List[float] = []
        self.frames_sent = 0
        self.bytes_sent = 0
        self.encode_failures = 0
        self.lock = threading.Lock()
        self.outbox: "queue.Queue" = queue.Queue(maxsize=4)
        self.stop = threading.Event()
        self.receiver = Receiver(("127.0.0.1", 0), on_frame=self._on_frame,
                                 on_packet=self._on_packet)
        self.proxy = None
        dest = self.receiver.address
        if profile is not None:
            self.proxy = Proxy(("127.0.0.1", 0), dest, profile, seed)
            dest = self.proxy.address
        self.dest = dest
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    # receiver side
    def _on_packet(self, pkt, t_us):
        with self.lock:
            sent = self.packet_sent_us.pop((pkt.frame_id, pkt.frag_index), None)
            if sent is not None:
                self.packet_latency_ms.append((t_us - sent) / 1000.0)

    def _on_frame(self, frame, first_us, assembled_us):
        try:
            decode(frame.jpeg_bytes, self.codec.palette)
        except Exception as exc:  # noqa: BLE001 - count and carry on
            log.warning("frame %d failed to decode: %s", frame.frame_id, exc)
            return
        decoded = now_us()
        with self.lock:
            cap = self.capture_log.get(frame.frame_id)
        if cap is None:
            return
        capture, detect_done, encode_done = cap
        self.samples.append(G2GSample(
            frame.frame_id, capture, encode_done, max(first_us, encode_done),
            assembled_us, decoded, detect_done,
        ))

    # sender side
    def _capture_loop(self, duration_s: float):
        interval = 1.0 / self.codec.fps
        budget = self.codec.budget
        n = int(round(duration_s * self.codec.fps))
        start = time.monotonic()
        for k in range(n):
            due = start + k * interval
            delay = due - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            if self.stop.is_set():
                break
            capture = now_us()
            sf = self.source.next_semantic_frame(capture_ts=capture)
            detect_done = now_us()
            try:
                enc = encode(sf, self.codec.palette, budget)
            except BudgetUnattainable as exc:
                self.encode_failures += 1
                log.warning("frame %d skipped: %s", sf.frame_id, exc)
                continue
            enc_done = now_us()
            with self.lock:
                self.capture_log[enc.frame_id] = (capture, detect_done, enc_done)
            self.outbox.put(enc)
        self.outbox.put(None)

    def _send_loop(self):
        pacer = Pacer(self.codec.budget.target_bitrate) if self.codec.pace else None
        while True:
            enc = self.outbox.get()
            if enc is None:
                return
            for pkt in fragment(enc, self.codec.mtu):
                data = pkt.pack()
                if pacer:
                    pacer.wait(len(data))
                t = now_us()
                with self.lock:
                    self.packet_sent_us[(pkt.frame_id, pkt.frag_index)] = t
                try:
                    self.sock.sendto(data, self.dest)
                except OSError as exc:
                    log.warning("send failed: %s", exc)
                    break
                self.bytes_sent += len(data)
            else:
                self.frames_sent += 1

    def run(self, duration_s: float, settle_s: float = 1.0):
        old_switch = sys.getswitchinterval()
        sys.setswitchinterval(0.0005)
        self.receiver.start()
        if self.proxy:
            self.proxy.start()
        sender = threading.Thread(target=self._send_loop, name="segjpeg-g2g-send", daemon=True)
        sender.start()
        try:
            self._capture_loop(duration_s)
            sender.join()
            time.sleep(settle_s)
        finally:
            self.stop.set()
            if self.proxy:
                self.proxy.stop(drain=False)
            self.receiver.stop()
            self.sock.close()
            sys.setswitchinterval(old_switch)

    def transport_stats(self) -> dict:
        stats = {"receiver": self.receiver.snapshot(), "frames_sent": self.frames_sent,
                 "encode_failures": self.encode_failures}
        if self.proxy:
            stats["link"] = self.proxy.snapshot()
        return stats


def run_g2g(
    source: Optional[MaskSourceConfig] = None,
    codec: Optional[CodecConfig] = None,
    profile: Union[None, str, LinkProfile] = "medium_4g",
    duration_s: float = 60.0,
    seed: int = 0,
    samples_csv: Union[None, str, Path] = None,
) -> LatencyReport:
    """Run source -> encode -> send -> link -> reassemble -> decode for ``duration_s``.

    ``profile=None`` sends straight to the receiver over loopback.
    """
    if duration_s <= 0:
        raise RunFailed("duration must be positive; nothing was run")
    source = source or MaskSourceConfig(seed=seed)
    codec = codec or CodecConfig()
    prof = load_profile(profile) if profile is not None else None
    pipe = _Pipeline(source, codec, prof, seed)
    pipe.run(duration_s)
    stats = pipe.transport_stats()
    rx = stats["receiver"]
    config = {
        "source": asdict(source),
        "bitrate_kbit": codec.bitrate_kbit, "fps": codec.fps, "mtu": codec.mtu, "pace": codec.pace,
        "profile": prof.to_dict() if prof else None,
        "duration_s": duration_s, "seed": seed,
    }
    samples = sorted(pipe.samples, key=lambda s: s.frame_id)
    if not samples:
        raise RunFailed("zero frames completed", stats)
    if samples_csv is not None:
        write_samples_csv(samples, samples_csv)
    return build_report(
        samples,
        frames_sent=pipe.frames_sent,
        frames_dropped=pipe.frames_sent - len(samples),
        config=config,
        transport={**stats, "incomplete_frames": rx["frames_dropped_incomplete"]},
    )


# -- throughput/latency curve ---------------------------------------------------

CURVE_COLUMNS = ["rate_kbit", "median_ms", "p95_ms", "sent_kbit"]


@dataclass
class CurvePoint:
    rate_kbit: float
    median_ms: Optional[float]
    p95_ms: Optional[float]
    packets: int = 0
    # wire rate actually offered; below rate_kbit once frames fit the budget at top quality
    sent_kbit: float = 0.0


def throughput_latency_curve(
    profile: Union[str, LinkProfile],
    rates_kbit: Sequence[float],
    duration_s: float = 10.0,
    fps: float = 10.0,
    seed: int = 0,
    source: Optional[MaskSourceConfig] = None,
    out_csv: Union[None, str, Path] = None,
) -> List[CurvePoint]:
    """Median one-way packet latency of real SEG-JPEG streams at each bitrate.

    Each rate gets a fresh link with the same seed. The link's jitter depends
    only on the seed, so every point sees the same delay process and the
    differences between points come from load alone.
    """
    rates = list(rates_kbit)
    if rates != sorted(rates):
        raise ValueError("rates must be sorted ascending")
    prof = load_profile(profile)
    points = []
    for rate in rates:
        codec = CodecConfig(bitrate_kbit=rate, fps=fps)
        src = source or MaskSourceConfig(seed=seed, scenario="street")
        pipe = _Pipeline(src, codec, prof, seed)
        pipe.run(duration_s, settle_s=min(5.0, 1.0 + duration_s / 2))
        lat = pipe.packet_latency_ms
        points.append(CurvePoint(
            rate,
            float(np.median(lat)) if lat else None,
            float(np.percentile(lat, 95)) if lat else None,
            len(lat),
            pipe.bytes_sent * 8 / duration_s / 1000.0,
        ))
    if out_csv is not None:
        Path(out_csv).write_text(curve_csv(points))
    return points


def curve_csv(points: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for p in points:
        w.writerow([p.rate_kbit,
                    "" if p.median_ms is None else round(p.median_ms, 3),
                    "" if p.p95_ms is None else round(p.p95_ms, 3),
                    round(p.sent_kbit, 1)])
    return buf.getvalue()
