"""``segjpeg`` command line.

Exit codes: 0 success, 1 usage error, 2 bad input, 3 runtime failure.
Set ``SEGJPEG_LOG`` (e.g. ``DEBUG``) for more log output on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from . import bench, codec, netsim, sources, transport
from .frame import PaletteError, SemanticFrame, default_palette, load_palette
from .imageio import ImageFileError, read_bytes, read_grey, read_label_map, write_label_map, write_rgb

log = logging.getLogger("segjpeg")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _hostport(text: str) -> Tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return (host or "127.0.0.1", int(port))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}") from None


def _ports(text: str) -> Tuple[int, int]:
    try:
        img, ctl = (int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected IMG,CTL port pair, got {text!r}") from None
    return img, ctl


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _delay(text: str) -> Optional[sources.InferenceDelay]:
    if text.lower() in ("none", "0", ""):
        return None
    vals = _floats(text)
    return sources.InferenceDelay(vals[0], vals[1] if len(vals) > 1 else 0.0)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; flags override it")
    common.add_argument("--seed", type=int, default=0)

    rate = _Parser(add_help=False)
    rate.add_argument("--bitrate", type=float, default=500.0, help="target bitrate, kbit/s")
    rate.add_argument("--fps", type=float, default=10.0)
    rate.add_argument("--mtu", type=int, default=transport.DEFAULT_MTU)
    rate.add_argument("--palette", help="palette JSON file")

    link = _Parser(add_help=False)
    link.add_argument("--profile", default="medium_4g", help="poor_4g, medium_4g or a JSON file")

    ports = _Parser(add_help=False)
    ports.add_argument("--ports", type=_ports,
                       default=(transport.DEFAULT_IMAGERY_PORT, transport.DEFAULT_CONTROL_PORT),
                       help="imagery,control UDP ports")

    p = _Parser(prog="segjpeg", description="SEG-JPEG semantic imagery toolkit")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("encode", parents=[common, rate], help="frame PNG + label map -> SEG-JPEG")
    s.add_argument("frame")
    s.add_argument("mask")
    s.add_argument("-o", "--output", default="out.jpg")

    s = sub.add_parser("decode", parents=[common], help="SEG-JPEG -> recoloured PNG + label map")
    s.add_argument("input")
    s.add_argument("--palette")
    s.add_argument("-o", "--output", default="out.png")
    s.add_argument("--mask-output", help="recovered label map PNG (default: <output>_mask.png)")

    s = sub.add_parser("send", parents=[common, rate, ports], help="stream SEG-JPEG frames over UDP")
    s.add_argument("--dest", default="127.0.0.1")
    s.add_argument("--source", default="mock", help="'mock' or a frame/mask PNG directory")
    s.add_argument("--scenario", default="street", choices=sources.SCENARIOS)
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--inference-delay", type=_delay, default=None, help="MEAN,SD in ms")

    s = sub.add_parser("recv", parents=[common, ports], help="receive, reassemble and decode frames")
    s.add_argument("--bind", default="0.0.0.0")
    s.add_argument("--palette")
    s.add_argument("--duration", type=float, default=0.0, help="seconds; 0 runs until interrupted")
    s.add_argument("--out", help="directory for decoded frames")
    s.add_argument("--every", type=int, default=10, help="write every Nth decoded frame")

    s = sub.add_parser("netsim", parents=[common, link], help="run the link impairment proxy")
    s.add_argument("--listen", type=_hostport, required=True)
    s.add_argument("--forward", type=_hostport, required=True)
    s.add_argument("--duration", type=float, default=0.0, help="seconds; 0 runs until interrupted")
    s.add_argument("--stats", help="per-second stats CSV path")

    s = sub.add_parser("g2g", parents=[common, rate, link], help="glass-to-glass latency benchmark")
    s.add_argument("--duration", type=float, default=60.0)
    s.add_argument("--no-proxy", action="store_true", help="loopback without link impairment")
    s.add_argument("--no-pacing", action="store_true", help="send each frame back to back")
    s.add_argument("--inference-delay", type=_delay, default=sources.InferenceDelay(*sources.YOLO_X_DELAY),
                   help="MEAN,SD in ms, or 'none'")
    s.add_argument("--out", help="directory for report.json and samples.csv")

    s = sub.add_parser("sweep", parents=[common, link], help="find the link saturation point")
    s.add_argument("--step", type=float, default=100.0, help="rate step, kbit/s")
    s.add_argument("--start", type=float, default=None, help="first rate, kbit/s")
    s.add_argument("--max", type=float, default=None, help="highest rate, kbit/s")
    s.add_argument("--dwell", type=float, default=10.0, help="seconds per step")
    s.add_argument("--cutoff", type=float, default=5000.0, help="stop once median latency passes this, ms")
    s.add_argument("--via", type=_hostport, nargs=2, metavar=("PROXY", "SINK"),
                   help="probe an external proxy that forwards to SINK")
    s.add_argument("--out", help="directory for sweep.json and sweep.csv")

    s = sub.add_parser("curve", parents=[common, link], help="latency vs SEG-JPEG stream bitrate")
    s.add_argument("--rates", type=_floats, default=[300, 400, 500, 600, 700, 800, 900],
                   help="comma-separated kbit/s, ascending")
    s.add_argument("--duration", type=float, default=10.0, help="seconds per rate")
    s.add_argument("--fps", type=float, default=10.0)
    s.add_argument("--out", help="CSV output path (default: stdout)")

    s = sub.add_parser("echo", parents=[common], help="control-channel round-trip times")
    s.add_argument("--target", type=_hostport, required=True)
    s.add_argument("--count", type=int, default=50)
    s.add_argument("--interval", type=float, default=0.1, help="seconds between requests")
    s.add_argument("--timeout", type=float, default=transport.DEFAULT_ECHO_TIMEOUT_MS, help="ms")
    return p


def _jsonable(obj):
    if is_dataclass(obj):
        return asdict(obj)
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, default=_jsonable) + "\n")


def _palette(args):
    return load_palette(args.palette) if getattr(args, "palette", None) else default_palette()


def _budget(args) -> codec.RateBudget:
    try:
        return codec.RateBudget.from_kbit(args.bitrate, args.fps)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _profile(args) -> netsim.LinkProfile:
    try:
        return netsim.load_profile(args.profile)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"bad link profile: {exc}") from exc


def _source_config(args) -> sources.MaskSourceConfig:
    if args.source == "mock":
        return sources.MaskSourceConfig(kind="mock", seed=args.seed, scenario=args.scenario,
                                        fps=args.fps, inference_delay=args.inference_delay)
    return sources.MaskSourceConfig(kind="files", path=args.source, seed=args.seed, fps=args.fps,
                                    inference_delay=args.inference_delay)


class _Interrupt:
    """Turns SIGINT/SIGTERM into an event so long runs can flush their stats."""

    def __init__(self):
        self.event = threading.Event()

    def __enter__(self):
        self._old = {}
        if threading.current_thread() is threading.main_thread():
            for sig in (signal.SIGINT, signal.SIGTERM):
                self._old[sig] = signal.signal(sig, lambda *_: self.event.set())
        return self.event

    def __exit__(self, *exc):
        for sig, handler in self._old.items():
            signal.signal(sig, handler)

    @staticmethod
    def wait(event: threading.Event, duration: float):
        if duration > 0:
            event.wait(duration)
        else:
            while not event.wait(0.5):
                pass


# -- subcommands -------------------------------------------------------------

def cmd_encode(args) -> int:
    palette = _palette(args)
    budget = _budget(args)
    frame = read_grey(args.frame)
    masks, shape = read_label_map(args.mask)
    if shape != frame.shape:
        raise InputError(f"dimension mismatch: frame {frame.shape}, mask {shape}")
    enc = codec.encode(SemanticFrame(frame, tuple(masks)), palette, budget)
    Path(args.output).write_bytes(enc.jpeg_bytes)
    _emit({"output": args.output, "bytes": len(enc), "quality_used": enc.quality_used,
           "budget_bytes": budget.max_bytes_per_frame})
    return EXIT_OK


def cmd_decode(args) -> int:
    palette = _palette(args)
    view = codec.decode(read_bytes(args.input), palette)
    out = Path(args.output)
    mask_out = Path(args.mask_output) if args.mask_output else out.with_name(out.stem + "_mask.png")
    write_rgb(view.rgb, out)
    write_label_map(view.recovered_masks, view.grey.shape, mask_out)
    _emit({
        "output": str(out), "mask_output": str(mask_out),
        "width": int(view.grey.shape[1]), "height": int(view.grey.shape[0]),
        "class_pixels": {m.class_id.name.lower(): m.area for m in view.recovered_masks},
    })
    return EXIT_OK


def cmd_send(args) -> int:
    palette = _palette(args)
    budget = _budget(args)
    src = sources.make_source(_source_config(args))
    dest = (args.dest, args.ports[0])
    interval = 1.0 / args.fps

    def frames(stop):
        start = time.monotonic()
        for k in range(args.frames):
            if stop.is_set():
                return
            due = start + k * interval
            if due > time.monotonic():
                time.sleep(due - time.monotonic())
            try:
                sf = src.next_semantic_frame(capture_ts=transport.now_us())
            except sources.EndOfSequence:
                return
            try:
                yield codec.encode(sf, palette, budget)
            except codec.BudgetUnattainable as exc:
                log.warning("frame %d skipped: %s", sf.frame_id, exc)

    with _Interrupt() as stop:
        stats = transport.send_stream(frames(stop), dest, budget, mtu=args.mtu, stop=stop)
    _emit(stats.to_dict())
    return EXIT_OK


def cmd_recv(args) -> int:
    palette = _palette(args)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    decoded = {"count": 0, "errors": 0}

    def on_frame(frame, first_us, assembled_us):
        try:
            view = codec.decode(frame.jpeg_bytes, palette)
        except codec.CodecError as exc:
            decoded["errors"] += 1
            log.warning("frame %d: %s", frame.frame_id, exc)
            return
        decoded["count"] += 1
        if out and args.every > 0 and (decoded["count"] - 1) % args.every == 0:
            write_rgb(view.rgb, out / f"decoded_{frame.frame_id:06d}.png")

    rx = transport.Receiver((args.bind, args.ports[0]), on_frame=on_frame)
    echo = transport.EchoResponder((args.bind, args.ports[1]))
    with _Interrupt() as stop, rx, echo:
        _Interrupt.wait(stop, args.duration)
        snap = rx.snapshot()
    _emit({"reassembly": snap, "decoded": decoded["count"], "decode_errors": decoded["errors"],
           "echo_replies": echo.replies})
    return EXIT_OK


def cmd_netsim(args) -> int:
    profile = _profile(args)
    proxy = netsim.run_proxy(args.listen, args.forward, profile, seed=args.seed)
    log.info("relaying %s -> %s with %s", proxy.address, args.forward, profile.name)
    with _Interrupt() as stop:
        _Interrupt.wait(stop, args.duration)
    proxy.stop(drain=False)
    if args.stats:
        Path(args.stats).write_text(proxy.stats_csv())
    else:
        sys.stderr.write(proxy.stats_csv())
    _emit(proxy.snapshot())
    return EXIT_OK


def cmd_g2g(args) -> int:
    profile = None if args.no_proxy else _profile(args)
    src = sources.MaskSourceConfig(seed=args.seed, fps=args.fps, inference_delay=args.inference_delay)
    cfg = bench.CodecConfig(bitrate_kbit=args.bitrate, fps=args.fps, mtu=args.mtu,
                            palette=_palette(args), pace=not args.no_pacing)
    _budget(args)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    report = bench.run_g2g(src, cfg, profile, duration_s=args.duration, seed=args.seed,
                           samples_csv=out / "samples.csv" if out else None)
    doc = report.to_dict()
    if out:
        (out / "report.json").write_text(json.dumps(doc, indent=2, default=_jsonable))
    sys.stderr.write(report.summary() + "\n")
    _emit(doc)
    return EXIT_OK


def cmd_sweep(args) -> int:
    profile = _profile(args)
    via = tuple(args.via) if args.via else None
    report = netsim.saturation_sweep(profile, rate_step_kbit=args.step, latency_cutoff_ms=args.cutoff,
                                     dwell_s=args.dwell, start_kbit=args.start, max_kbit=args.max,
                                     seed=args.seed, via=via)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(report.to_csv())
        (out / "sweep.json").write_text(json.dumps(report.to_dict(), indent=2))
    sys.stderr.write(report.summary() + "\n")
    _emit(report.to_dict())
    return EXIT_OK


def cmd_curve(args) -> int:
    profile = _profile(args)
    if list(args.rates) != sorted(args.rates):
        raise InputError("--rates must be ascending")
    points = bench.throughput_latency_curve(profile, args.rates, duration_s=args.duration,
                                            fps=args.fps, seed=args.seed, out_csv=args.out)
    if not args.out:
        sys.stdout.write(bench.curve_csv(points))
    return EXIT_OK


def cmd_echo(args) -> int:
    report = transport.control_echo(args.target, args.count, args.interval, args.timeout)
    _emit({"sent": len(report.samples), "loss_fraction": report.loss_fraction,
           "median_rtt_ms": report.median_rtt_ms, "rtts_ms": report.rtts})
    return EXIT_OK


COMMANDS = {
    "encode": cmd_encode, "decode": cmd_decode, "send": cmd_send, "recv": cmd_recv,
    "netsim": cmd_netsim, "g2g": cmd_g2g, "sweep": cmd_sweep, "curve": cmd_curve,
    "echo": cmd_echo,
}


def _resolve(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config) as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from exc
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in subparser._actions}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise InputError(f"config key {key!r} is not an option of {args.command}")
        action = known[dest]
        if isinstance(value, str) and action.type is not None:
            value = action.type(value)
        subparser.set_defaults(**{dest: value})
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=os.environ.get("SEGJPEG_LOG", "INFO").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _resolve(parser, argv)
        resolved = {k: _jsonable(v) for k, v in vars(args).items()}
        log.info("config %s", json.dumps(resolved, default=_jsonable, sort_keys=True))
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (InputError, FileNotFoundError, ImageFileError, PaletteError, codec.BudgetUnattainable,
            codec.JpegDecodeError, codec.JpegFormatError, sources.MaskSourceError,
            argparse.ArgumentTypeError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (netsim.ProxyError, bench.BenchError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
