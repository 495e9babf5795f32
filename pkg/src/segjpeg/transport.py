"""UDP framing for SEG-JPEG imagery and a JSON echo control channel.

Wire packet layout (big-endian, 20-byte header)::

    offset size field
         0    2 magic          b"SJ"
         2    1 version        1
         3    1 channel        0 imagery, 1 control
         4    4 frame_id       u32
         8    2 frag_index     u16
        10    2 frag_count     u16
        12    6 capture_ts_us  u48
        18    2 payload_len    u16
        20    - payload

Receivers keep only the newest frame: an incomplete frame is abandoned as
soon as a fragment of a later frame shows up. Nothing is retransmitted.
"""

from __future__ import annotations

import json
import logging
import math
import socket
import struct
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from .codec import EncodedFrame, RateBudget

log = logging.getLogger(__name__)

MAGIC = b"SJ"
VERSION = 1
HEADER_SIZE = 20
DEFAULT_MTU = 1400
MIN_MTU = 256
MAX_FRAGMENTS = 0xFFFF
MAX_TS = (1 << 48) - 1
CHANNEL_IMAGERY = 0
CHANNEL_CONTROL = 1
DEFAULT_IMAGERY_PORT = 47001
DEFAULT_CONTROL_PORT = 47002

_HEADER = struct.Struct(">2sBBIHHHIH")
assert _HEADER.size == HEADER_SIZE


def now_us() -> int:
    return time.monotonic_ns() // 1000


class MalformedPacket(ValueError):
    pass


class OversizeFrame(ValueError):
    pass


@dataclass(frozen=True)
class WirePacket:
    frame_id: int
    frag_index: int
    frag_count: int
    capture_ts_us: int
    payload: bytes
    channel: int = CHANNEL_IMAGERY
    version: int = VERSION

    def pack(self) -> bytes:
        if not 0 <= self.frag_index < self.frag_count:
            raise ValueError(f"frag_index {self.frag_index} not in [0, {self.frag_count})")
        if not 0 <= self.capture_ts_us <= MAX_TS:
            raise ValueError("capture timestamp does not fit in 48 bits")
        ts_hi, ts_lo = self.capture_ts_us >> 32, self.capture_ts_us & 0xFFFFFFFF
        header = _HEADER.pack(
            MAGIC, self.version, self.channel, self.frame_id & 0xFFFFFFFF,
            self.frag_index, self.frag_count, ts_hi, ts_lo, len(self.payload),
        )
        return header + bytes(self.payload)

    @classmethod
    def unpack(cls, data: bytes) -> "WirePacket":
        if len(data) < HEADER_SIZE:
            raise MalformedPacket(f"datagram of {len(data)} bytes is shorter than the header")
        magic, version, channel, fid, idx, count, ts_hi, ts_lo, plen = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise MalformedPacket(f"bad magic {magic!r}")
        if version != VERSION:
            raise MalformedPacket(f"unsupported version {version}")
        if count < 1 or idx >= count:
            raise MalformedPacket(f"fragment {idx} of {count} is out of range")
        payload = data[HEADER_SIZE:]
        if len(payload) < plen:
            raise MalformedPacket(f"payload truncated: {len(payload)} of {plen} bytes")
        return cls(fid, idx, count, (ts_hi << 32) | ts_lo, bytes(payload[:plen]), channel, version)

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + len(self.payload)


def fragment_count(nbytes: int, mtu: int = DEFAULT_MTU) -> int:
    return max(1, math.ceil(nbytes / (mtu - HEADER_SIZE)))


def fragment(frame: EncodedFrame, mtu: int = DEFAULT_MTU, channel: int = CHANNEL_IMAGERY) -> List[WirePacket]:
    """Split a frame into packets of at most ``mtu`` bytes each, header included."""
    if mtu < MIN_MTU:
        raise ValueError(f"MTU payload limit {mtu} is below {MIN_MTU}")
    data = frame.jpeg_bytes
    chunk = mtu - HEADER_SIZE
    count = fragment_count(len(data), mtu)
    if count > MAX_FRAGMENTS:
        raise OversizeFrame(f"{len(data)} bytes needs {count} fragments (max {MAX_FRAGMENTS})")
    return [
        WirePacket(frame.frame_id, i, count, frame.capture_ts, data[i * chunk:(i + 1) * chunk], channel)
        for i in range(count)
    ]


@dataclass
class ReassemblyStats:
    frames_completed: int = 0
    frames_dropped_incomplete: int = 0
    stale_fragments: int = 0
    duplicate_fragments: int = 0
    malformed_packets: int = 0
    packets_received: int = 0
    bytes_received: int = 0


class Reassembler:
    """Latest-frame-wins reassembly.

    One frame is assembled at a time. Fragments of older frames are
    discarded, a fragment of a newer frame abandons the frame in progress.
    """

    def __init__(self):
        self.current_frame_id: Optional[int] = None
        self._count = 0
        self._ts = 0
        self._parts: Dict[int, bytes] = {}
        self._done = False
        self.first_packet_us: Optional[int] = None
        self.stats = ReassemblyStats()
        self._lock = threading.Lock()

    @property
    def buffered_frames(self) -> int:
        return 1 if self._parts and not self._done else 0

    def _start(self, pkt: WirePacket, t_us: int):
        if self._parts and not self._done:
            self.stats.frames_dropped_incomplete += 1
        self.current_frame_id = pkt.frame_id
        self._count = pkt.frag_count
        self._ts = pkt.capture_ts_us
        self._parts = {}
        self._done = False
        self.first_packet_us = t_us

    def ingest(self, pkt: WirePacket, t_us: Optional[int] = None) -> Optional[EncodedFrame]:
        with self._lock:
            return self._ingest(pkt, now_us() if t_us is None else t_us)

    def _ingest(self, pkt: WirePacket, t_us: int) -> Optional[EncodedFrame]:
        self.stats.packets_received += 1
        self.stats.bytes_received += pkt.wire_size
        cur = self.current_frame_id
        if cur is not None and pkt.frame_id < cur:
            self.stats.stale_fragments += 1
            return None
        if cur is None or pkt.frame_id > cur:
            self._start(pkt, t_us)
        if self._done or pkt.frag_index in self._parts:
            self.stats.duplicate_fragments += 1
            return None
        if pkt.frag_count != self._count:
            self.stats.malformed_packets += 1
            return None
        self._parts[pkt.frag_index] = pkt.payload
        if len(self._parts) < self._count:
            return None
        data = b"".join(self._parts[i] for i in range(self._count))
        self._parts = {}
        self._done = True
        self.stats.frames_completed += 1
        return EncodedFrame(data, pkt.frame_id, self._ts)

    def ingest_datagram(self, data: bytes, t_us: Optional[int] = None) -> Optional[EncodedFrame]:
        """Parse and ingest; malformed datagrams are counted and ignored."""
        try:
            pkt = WirePacket.unpack(data)
        except MalformedPacket as exc:
            with self._lock:
                self.stats.malformed_packets += 1
            log.debug("dropping malformed datagram: %s", exc)
            return None
        return self.ingest(pkt, t_us)

    def snapshot(self) -> dict:
        with self._lock:
            return asdict(self.stats)


# -- sending ----------------------------------------------------------------

@dataclass
class SendStats:
    frames_sent: int = 0
    frames_failed: int = 0
    packets_sent: int = 0
    bytes_sent: int = 0
    duration_s: float = 0.0

    @property
    def effective_bitrate(self) -> float:
        return self.bytes_sent * 8 / self.duration_s if self.duration_s > 0 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["effective_bitrate"] = self.effective_bitrate
        return d


class Pacer:
    """Spaces packets so the long-run rate never exceeds ``bitrate``.

    Idle time does not build up credit, so any window of length T carries at
    most ``bitrate * T`` bits plus one packet.
    """

    def __init__(self, bitrate: float, clock=time.monotonic, sleep=time.sleep):
        self.bitrate = float(bitrate)
        self.clock = clock
        self.sleep = sleep
        self._next: Optional[float] = None

    def wait(self, nbytes: int) -> float:
        now = self.clock()
        if self._next is None or self._next < now:
            self._next = now
        delay = self._next - now
        if delay > 0:
            self.sleep(delay)
        send_at = self._next
        self._next += nbytes * 8 / self.bitrate
        return send_at


def send_stream(
    frames: Iterable[EncodedFrame],
    dest: Tuple[str, int],
    pacing: Optional[RateBudget] = None,
    mtu: int = DEFAULT_MTU,
    sock: Optional[socket.socket] = None,
    on_packet: Optional[Callable[[WirePacket, float], None]] = None,
    stop: Optional[threading.Event] = None,
) -> SendStats:
    """Fragment and transmit frames to ``dest`` over UDP, fire-and-forget.

    With ``pacing`` set, packets leave no faster than its target bitrate
    (header bytes included). A send error abandons the rest of that frame.
    """
    own = sock is None
    if own:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    pacer = Pacer(pacing.target_bitrate) if pacing else None
    stats = SendStats()
    t0 = time.monotonic()
    last = t0
    try:
        for frame in frames:
            if stop is not None and stop.is_set():
                break
            ok = True
            for pkt in fragment(frame, mtu):
                data = pkt.pack()
                if pacer:
                    pacer.wait(len(data))
                try:
                    sock.sendto(data, dest)
                except OSError as exc:
                    log.warning("send of frame %d failed: %s", frame.frame_id, exc)
                    ok = False
                    break
                last = time.monotonic()
                stats.packets_sent += 1
                stats.bytes_sent += len(data)
                if on_packet:
                    on_packet(pkt, last)
            if ok:
                stats.frames_sent += 1
            else:
                stats.frames_failed += 1
        if pacer and pacer._next is not None:
            # the last packet occupies the link until its slot ends
            last = max(last, pacer._next)
    finally:
        if own:
            sock.close()
    stats.duration_s = last - t0
    return stats


# -- receiving --------------------------------------------------------------

FrameCallback = Callable[[EncodedFrame, int, int], None]


class Receiver:
    """Background UDP reader feeding a :class:`Reassembler`.

    ``on_frame(frame, first_packet_us, assembled_us)`` runs on the reader
    thread for every completed frame.
    """

    def __init__(self, bind: Tuple[str, int] = ("127.0.0.1", 0),
                 on_frame: Optional[FrameCallback] = None,
                 on_packet: Optional[Callable[[WirePacket, int], None]] = None):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
        self.sock.bind(bind)
        self.sock.settimeout(0.05)
        self.reassembler = Reassembler()
        self.on_frame = on_frame
        self.on_packet = on_packet
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="segjpeg-recv", daemon=True)

    @property
    def address(self) -> Tuple[str, int]:
        return self.sock.getsockname()

    def start(self) -> "Receiver":
        self._thread.start()
        return self

    def _run(self):
        while not self._stop.is_set():
            try:
                data = self.sock.recv(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            t = now_us()
            if self.on_packet:
                try:
                    self.on_packet(WirePacket.unpack(data), t)
                except MalformedPacket:
                    pass
            first = self.reassembler.first_packet_us
            frame = self.reassembler.ingest_datagram(data, t)
            if frame is not None and self.on_frame:
                first = self.reassembler.first_packet_us or first or t
                self.on_frame(frame, first, now_us())

    def snapshot(self) -> dict:
        return self.reassembler.snapshot()

    def stop(self):
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(timeout=2)
        self.sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


# -- control echo -----------------------------------------------------------

DEFAULT_ECHO_TIMEOUT_MS = 5000.0


def control_message(seq: int, sent_ts_us: int, kind: str = "echo_request") -> bytes:
    if kind not in ("echo_request", "echo_reply"):
        raise ValueError(f"unknown control message kind {kind!r}")
    return json.dumps({"seq": seq, "sent_ts_us": sent_ts_us, "kind": kind}).encode()


def parse_control(data: bytes) -> dict:
    try:
        msg = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPacket(f"control message is not JSON: {exc}") from exc
    if not isinstance(msg, dict) or msg.get("kind") not in ("echo_request", "echo_reply"):
        raise MalformedPacket(f"unexpected control message {msg!r}")
    if not isinstance(msg.get("seq"), int) or not isinstance(msg.get("sent_ts_us"), int):
        raise MalformedPacket("control message needs integer seq and sent_ts_us")
    return msg


class EchoResponder:
    """Answers every echo_request with an echo_reply carrying the same seq and timestamp."""

    def __init__(self, bind: Tuple[str, int] = ("127.0.0.1", 0)):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind)
        self.sock.settimeout(0.05)
        self.replies = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="segjpeg-echo", daemon=True)

    @property
    def address(self) -> Tuple[str, int]:
        return self.sock.getsockname()

    def start(self) -> "EchoResponder":
        self._thread.start()
        return self

    def _run(self):
        while not self._stop.is_set():
            try:
                data, peer = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                msg = parse_control(data)
            except MalformedPacket:
                continue
            if msg["kind"] == "echo_request":
                self.sock.sendto(control_message(msg["seq"], msg["sent_ts_us"], "echo_reply"), peer)
                self.replies += 1

    def stop(self):
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(timeout=2)
        self.sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


@dataclass
class RttSample:
    seq: int
    sent_ts_us: int
    rtt_ms: Optional[float] = None  # None: no reply within the timeout

    @property
    def one_way_ms(self) -> Optional[float]:
        return None if self.rtt_ms is None else self.rtt_ms / 2


@dataclass
class EchoReport:
    samples: List[RttSample] = field(default_factory=list)

    @property
    def rtts(self) -> List[float]:
        return [s.rtt_ms for s in self.samples if s.rtt_ms is not None]

    @property
    def loss_fraction(self) -> float:
        if not self.samples:
            return 0.0
        return sum(s.rtt_ms is None for s in self.samples) / len(self.samples)

    @property
    def median_rtt_ms(self) -> Optional[float]:
        r = sorted(self.rtts)
        if not r:
            return None
        mid = len(r) // 2
        return r[mid] if len(r) % 2 else (r[mid - 1] + r[mid]) / 2


def control_echo(
    target: Tuple[str, int],
    count: int = 50,
    interval_s: float = 0.1,
    timeout_ms: float = DEFAULT_ECHO_TIMEOUT_MS,
) -> EchoReport:
    """Send ``count`` echo requests at a fixed cadence and time the replies."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind(("0.0.0.0" if target[0] not in ("127.0.0.1", "localhost") else "127.0.0.1", 0))
    sock.settimeout(0.02)
    samples: Dict[int, RttSample] = {}
    seq = 0
    next_send = time.monotonic()
    last_sent = next_send
    try:
        while True:
            now = time.monotonic()
            if seq < count and now >= next_send:
                ts = now_us()
                try:
                    sock.sendto(control_message(seq, ts), target)
                except OSError as exc:
                    log.debug("echo request %d not sent: %s", seq, exc)
                samples[seq] = RttSample(seq, ts)
                seq += 1
                last_sent = now
                next_send += interval_s
            if seq >= count and (now - last_sent) * 1000 >= timeout_ms:
                break
            if seq >= count and all(s.rtt_ms is not None for s in samples.values()):
                break
            try:
                data = sock.recv(65535)
            except socket.timeout:
                continue
            except OSError:
                # e.g. ICMP port unreachable surfaced as ECONNREFUSED
                time.sleep(0.005)
                continue
            t = now_us()
            try:
                msg = parse_control(data)
            except MalformedPacket:
                continue
            s = samples.get(msg["seq"])
            if msg["kind"] == "echo_reply" and s is not None and s.rtt_ms is None:
                rtt = (t - msg["sent_ts_us"]) / 1000.0
                if rtt <= timeout_ms:
                    s.rtt_ms = rtt
    finally:
        sock.close()
    return EchoReport([samples[k] for k in sorted(samples)])
