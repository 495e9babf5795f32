import json
import logging
import os
import signal
import subprocess
import sys
import time

import numpy as np
import pytest
from PIL import Image

from segjpeg.cli import EXIT_INPUT, EXIT_OK, EXIT_USAGE, main
from segjpeg.frame import ClassId
from segjpeg.imageio import write_grey, write_label_map
from segjpeg.sources import MockSource


def run(*argv):
    return subprocess.run([sys.executable, "-m", "segjpeg", *argv], capture_output=True, text=True,
                          timeout=120)


@pytest.fixture
def scene(tmp_path):
    sf = MockSource(seed=3).next_semantic_frame()
    write_grey(sf.frame, tmp_path / "frame.png")
    write_label_map(sf.masks, sf.frame.shape, tmp_path / "mask.png")
    return sf, tmp_path


def test_encode_decode_round_trip(scene, capsys):
    sf, d = scene
    assert main(["encode", str(d / "frame.png"), str(d / "mask.png"), "-o", str(d / "o.jpg"),
                 "--bitrate", "500", "--fps", "10"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["bytes"] == (d / "o.jpg").stat().st_size <= 6250
    assert out["budget_bytes"] == 6250 and 10 <= out["quality_used"] <= 95

    assert main(["decode", str(d / "o.jpg"), "-o", str(d / "view.png")]) == EXIT_OK
    rgb = np.asarray(Image.open(d / "view.png"))
    person = sf.mask_for(ClassId.PERSON).bitmap
    red = (rgb[..., 0] == 255) & (rgb[..., 1] == 0) & (rgb[..., 2] == 0)
    assert (red & person).sum() / person.sum() > 0.95
    labels = np.asarray(Image.open(d / "view_mask.png"))
    assert set(np.unique(labels)) <= {0, 1, 2, 3}


def test_decode_plain_greyscale_jpeg(tmp_path):
    Image.fromarray(np.tile(np.arange(0, 120, dtype=np.uint8), (30, 1))).save(tmp_path / "g.jpg")
    assert main(["decode", str(tmp_path / "g.jpg"), "-o", str(tmp_path / "g.png")]) == EXIT_OK
    rgb = np.asarray(Image.open(tmp_path / "g.png")).astype(int)
    assert np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2])


def test_encode_missing_mask(scene, caplog):
    _, d = scene
    assert main(["encode", str(d / "frame.png"), str(d / "nope.png")]) == EXIT_INPUT
    assert "nope.png" in caplog.text


def test_encode_corrupt_png(scene):
    _, d = scene
    (d / "bad.png").write_bytes(b"\x89PNG\r\n\x1a\n" + os.urandom(64))
    assert main(["encode", str(d / "bad.png"), str(d / "mask.png")]) == EXIT_INPUT


def test_encode_dimension_mismatch(scene):
    _, d = scene
    Image.new("L", (10, 10)).save(d / "small.png")
    assert main(["encode", str(d / "frame.png"), str(d / "small.png")]) == EXIT_INPUT


def test_encode_unattainable_budget(tmp_path):
    noise = np.random.default_rng(0).integers(0, 256, (1080, 1920), dtype=np.uint8)
    Image.fromarray(noise).save(tmp_path / "n.png")
    Image.fromarray(np.zeros((1080, 1920), np.uint8)).save(tmp_path / "m.png")
    assert main(["encode", str(tmp_path / "n.png"), str(tmp_path / "m.png"),
                 "--bitrate", "8", "--fps", "1", "-o", str(tmp_path / "x.jpg")]) == EXIT_INPUT


def test_decode_truncated_jpeg(scene, caplog):
    _, d = scene
    main(["encode", str(d / "frame.png"), str(d / "mask.png"), "-o", str(d / "o.jpg")])
    data = (d / "o.jpg").read_bytes()
    (d / "t.jpg").write_bytes(data[: len(data) // 3])
    assert main(["decode", str(d / "t.jpg"), "-o", str(d / "t.png")]) == EXIT_INPUT
    assert "malformed" in caplog.text.lower()


def test_unknown_subcommand_prints_usage():
    r = run("teleport")
    assert r.returncode == EXIT_USAGE
    assert "usage:" in r.stderr


def test_missing_argument_is_usage_error():
    assert run("encode").returncode == EXIT_USAGE


def test_help_lists_subcommands():
    r = run("--help")
    assert r.returncode == 0
    for cmd in ("encode", "decode", "send", "recv", "netsim", "g2g", "sweep", "curve", "echo"):
        assert cmd in r.stdout


def test_config_file_merges_and_flags_win(scene, caplog):
    caplog.set_level(logging.INFO, logger="segjpeg")
    _, d = scene
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"bitrate": 400, "fps": 5, "output": str(d / "c.jpg")}))
    assert main(["encode", str(d / "frame.png"), str(d / "mask.png"), "--config", str(cfg),
                 "--fps", "10"]) == EXIT_OK
    resolved = json.loads(caplog.text.split("config ", 1)[1].splitlines()[0])
    assert resolved["bitrate"] == 400 and resolved["fps"] == 10.0
    assert (d / "c.jpg").stat().st_size <= 5000


def test_config_file_unknown_key(scene):
    _, d = scene
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"speed": 3}))
    assert main(["encode", str(d / "frame.png"), str(d / "mask.png"), "--config", str(cfg)]) == EXIT_INPUT


def test_resolved_config_goes_to_stderr(scene):
    _, d = scene
    r = run("encode", str(d / "frame.png"), str(d / "mask.png"), "-o", str(d / "s.jpg"))
    assert r.returncode == 0
    assert '"command": "encode"' in r.stderr
    assert json.loads(r.stdout)["bytes"] > 0


def test_log_level_from_environment(scene):
    _, d = scene
    env = {**os.environ, "SEGJPEG_LOG": "ERROR"}
    r = subprocess.run([sys.executable, "-m", "segjpeg", "encode", str(d / "frame.png"),
                        str(d / "mask.png"), "-o", str(d / "q.jpg")],
                       capture_output=True, text=True, env=env, timeout=60)
    assert r.returncode == 0 and r.stderr == ""


def test_bad_profile(capsys):
    assert main(["sweep", "--profile", "great_5g"]) == EXIT_INPUT


def test_custom_profile_sweep(tmp_path, capsys):
    prof = tmp_path / "lab.json"
    prof.write_text(json.dumps({"capacity": 10e6, "base_latency_ms": 5, "queue_limit": 100000}))
    assert main(["sweep", "--profile", str(prof), "--step", "500", "--max", "1000", "--dwell", "0.5",
                 "--cutoff", "300", "--out", str(tmp_path / "sw")]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["saturation_kbit"] is None and doc["profile"] == "lab"
    assert (tmp_path / "sw" / "sweep.csv").exists()


def test_g2g_loopback_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["g2g", "--no-proxy", "--no-pacing", "--duration", "3", "--inference-delay", "none",
                 "--out", str(out)]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["count"] > 0
    assert json.loads((out / "report.json").read_text())["median_ms"] == doc["median_ms"]
    assert (out / "samples.csv").read_text().startswith("frame_id,capture_ts_us,")


def test_curve_to_stdout(capsys):
    assert main(["curve", "--profile", "medium_4g", "--rates", "200", "--duration", "2"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "rate_kbit,median_ms,p95_ms,sent_kbit"
    assert len(lines) == 2


def test_curve_unsorted_rates():
    assert main(["curve", "--rates", "500,300"]) == EXIT_INPUT


def test_send_netsim_recv_pipeline(tmp_path):
    rx = subprocess.Popen([sys.executable, "-m", "segjpeg", "recv", "--ports", "47101,47102",
                           "--bind", "127.0.0.1", "--duration", "8", "--out", str(tmp_path / "rx"),
                           "--every", "5"], stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    ns = subprocess.Popen([sys.executable, "-m", "segjpeg", "netsim", "--listen", "127.0.0.1:47111",
                           "--forward", "127.0.0.1:47101", "--profile", "medium_4g", "--duration", "6",
                           "--stats", str(tmp_path / "ns.csv")],
                          stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    time.sleep(1.5)
    tx = run("send", "--dest", "127.0.0.1", "--ports", "47111,47102", "--frames", "20")
    echo = run("echo", "--target", "127.0.0.1:47102", "--count", "5", "--interval", "0.02")
    rx_out, _ = rx.communicate(timeout=30)
    ns_out, _ = ns.communicate(timeout=30)
    assert tx.returncode == 0 and rx.returncode == 0 and ns.returncode == 0
    sent = json.loads(tx.stdout)
    got = json.loads(rx_out)
    link = json.loads(ns_out)
    assert sent["frames_sent"] == 20
    assert got["decoded"] >= 15
    assert got["reassembly"]["frames_completed"] + got["reassembly"]["frames_dropped_incomplete"] <= 20
    assert link["packets_in"] == sent["packets_sent"]
    assert json.loads(echo.stdout)["loss_fraction"] == 0.0
    assert len(list((tmp_path / "rx").glob("decoded_*.png"))) >= 3
    assert (tmp_path / "ns.csv").read_text().startswith("t_s,delivered_bytes,")


def test_recv_flushes_stats_on_sigint():
    p = subprocess.Popen([sys.executable, "-m", "segjpeg", "recv", "--ports", "47121,47122",
                          "--bind", "127.0.0.1"], stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    time.sleep(1.5)
    p.send_signal(signal.SIGINT)
    out, _ = p.communicate(timeout=15)
    assert p.returncode == 0
    assert json.loads(out)["reassembly"]["frames_completed"] == 0


def test_port_pair_parsing():
    assert run("recv", "--ports", "1,2,3").returncode == EXIT_USAGE


def test_decode_rejects_png_input(scene):
    _, d = scene
    r = run("decode", str(d / "frame.png"), "-o", str(d / "z.png"))
    assert r.returncode == EXIT_INPUT
    assert r.stdout == ""
