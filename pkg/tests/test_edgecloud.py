"""Wire protocol round trips, the offloading simulator, and the live loop."""

import io
import socket
import struct
import threading
import zlib

import numpy as np
import pytest

from edgeyolo.edgecloud import live, protocol, sim
from edgeyolo.edgecloud.protocol import (ACK, DETECT_REQUEST, DETECT_RESULT,
                                         FRAME_UPLOAD, WEIGHT_PUSH,
                                         BadMagicError, ChecksumError,
                                         Message, ProtocolError,
                                         TruncatedFrameError,
                                         UnknownTypeError, decode_message,
                                         encode_message, read_message)


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------

def test_round_trip_1000_random_messages(rng):
    types = [FRAME_UPLOAD, DETECT_REQUEST, DETECT_RESULT, WEIGHT_PUSH, ACK]
    for trial in range(1000):
        msg = Message(types[int(rng.integers(0, 5))],
                      int(rng.integers(0, 2**32)),
                      rng.bytes(int(rng.integers(0, 200))))
        back = decode_message(encode_message(msg))
        assert back == msg, trial


def test_empty_payload_frame_is_18_bytes():
    assert len(encode_message(Message(ACK, 0))) == 18


def test_stream_reader_round_trip(rng):
    msgs = [Message(FRAME_UPLOAD, i, rng.bytes(int(rng.integers(0, 64))))
            for i in range(20)]
    stream = io.BytesIO(b"".join(encode_message(m) for m in msgs))
    got = []
    while (m := read_message(stream)) is not None:
        got.append(m)
    assert got == msgs


def test_read_message_none_at_clean_eof():
    assert read_message(io.BytesIO(b"")) is None


def test_bad_magic():
    buf = bytearray(encode_message(Message(ACK, 1)))
    buf[:4] = b"NOPE"
    with pytest.raises(BadMagicError):
        decode_message(bytes(buf))


def test_corrupt_payload_crc():
    buf = bytearray(encode_message(Message(FRAME_UPLOAD, 1, b"hello world")))
    buf[16] ^= 0xFF      # inside the payload; the 14-byte header ends before it
    with pytest.raises(ChecksumError):
        decode_message(bytes(buf))


def test_truncated_frame():
    whole = encode_message(Message(FRAME_UPLOAD, 1, b"payload bytes"))
    with pytest.raises(TruncatedFrameError):
        decode_message(whole[:-3])
    with pytest.raises(TruncatedFrameError):
        decode_message(whole[:6])


def test_trailing_garbage_rejected():
    whole = encode_message(Message(ACK, 1))
    with pytest.raises(ProtocolError):
        decode_message(whole + b"x")


def test_unknown_type_rejected():
    with pytest.raises(UnknownTypeError):
        Message(99, 0)
    # and on the wire: patch the type byte of a valid frame, fix no crc
    buf = bytearray(encode_message(Message(ACK, 1)))
    buf[4] = 99
    with pytest.raises(UnknownTypeError):
        decode_message(bytes(buf))


def test_error_types_are_distinct_protocol_errors():
    kinds = (BadMagicError, ChecksumError, TruncatedFrameError, UnknownTypeError)
    for k in kinds:
        assert issubclass(k, ProtocolError)
    assert len(set(kinds)) == 4


def test_stream_mid_frame_eof():
    whole = encode_message(Message(FRAME_UPLOAD, 1, b"abcdef"))
    with pytest.raises(TruncatedFrameError):
        read_message(io.BytesIO(whole[:9]))


# ---------------------------------------------------------------------------
# simulator
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pair_300():
    cloud = sim.run_sim(sim.Scenario(path="cloud", n_frames=300, seed=0))
    ecc = sim.run_sim(sim.Scenario(path="ecc", n_frames=300, seed=0))
    return cloud, ecc


def test_cloud_mean_delay_strictly_increasing(pair_300):
    cloud, _ = pair_300
    means = cloud.prefix_mean_delays()
    assert all(b > a for a, b in zip(means, means[1:]))


def test_ecc_delay_constant_within_1e9(pair_300):
    _, ecc = pair_300
    assert max(ecc.delays) - min(ecc.delays) <= 1e-9
    assert ecc.delays[0] == pytest.approx(sim.XAVIER_INFER_S, abs=1e-9)


def test_ecc_nano_constant_at_profile_latency():
    r = sim.run_sim(sim.Scenario(path="ecc", n_frames=100,
                                 edge_infer_s=sim.NANO_INFER_S))
    assert max(r.delays) - min(r.delays) <= 1e-9
    assert r.delays[0] == pytest.approx(sim.NANO_INFER_S, abs=1e-9)


def test_crossover_exists_for_both_profiles(pair_300):
    cloud, ecc = pair_300
    n = sim.crossover_frame(cloud, ecc)
    assert n is not None and n >= 1

    nano = sim.run_sim(sim.Scenario(path="ecc", n_frames=300,
                                    edge_infer_s=sim.NANO_INFER_S))
    n2 = sim.crossover_frame(cloud, nano)
    assert n2 is not None and n2 >= n   # slower edge tolerates more uploads


def test_crossover_none_when_ecc_never_beaten(pair_300):
    cloud, _ = pair_300
    slow = sim.run_sim(sim.Scenario(path="ecc", n_frames=300,
                                    edge_infer_s=60.0))
    assert sim.crossover_frame(cloud, slow) is None


def test_identical_seeds_bitwise_identical_traces():
    a = sim.run_sim(sim.Scenario(path="cloud", n_frames=200, seed=42,
                                 net=sim.NetworkModel(jitter_max_s=0.01,
                                                      loss_rate=0.05)))
    b = sim.run_sim(sim.Scenario(path="cloud", n_frames=200, seed=42,
                                 net=sim.NetworkModel(jitter_max_s=0.01,
                                                      loss_rate=0.05)))
    assert a.to_csv() == b.to_csv()
    assert a.delays == b.delays


def test_different_seed_changes_jittered_trace():
    mk = lambda s: sim.run_sim(sim.Scenario(path="cloud", n_frames=100, seed=s,
                                            net=sim.NetworkModel(
                                                jitter_max_s=0.01)))
    assert mk(1).delays != mk(2).delays


def test_ecc_model_version_increments(pair_300):
    _, ecc = pair_300
    assert ecc.final_model_version > 1
    swaps = [e for e in ecc.events if e.event == "model_swap"]
    assert len(swaps) == ecc.final_model_version - 1
    # every swap is preceded by a completed retrain
    retrains = [e for e in ecc.events if e.event == "retrain_end"]
    assert len(retrains) >= len(swaps)


def test_cloud_uploads_every_frame(pair_300):
    cloud, ecc = pair_300
    assert cloud.uploaded_frames == 300
    # ECC defers uploads to idle windows but drains the whole queue eventually
    assert ecc.uploaded_frames == 300
    active_len = 1.0 * 0.8     # Scenario defaults: duty_period_s=1.0, active_frac=0.8
    starts = [e.time_s for e in ecc.events
              if e.node == "edge" and e.event == "upload_start"]
    assert starts
    assert all(t % 1.0 >= active_len - 1e-9 for t in starts)


def test_ten_thousand_frames_under_five_seconds():
    import time
    t0 = time.time()
    r = sim.run_sim(sim.Scenario(path="cloud", n_frames=10_000))
    took = time.time() - t0
    assert len(r.delays) == 10_000
    assert took < 5.0, took


def test_delays_positive_and_cloud_above_rtt(pair_300):
    cloud, ecc = pair_300
    assert all(d > 0 for d in cloud.delays)
    assert all(d > 0 for d in ecc.delays)
    # every cloud delay includes at least propagation plus serialization
    floor = sim.Scenario().net.rtt_s
    assert all(d > floor for d in cloud.delays)


def test_scenario_validation():
    with pytest.raises(ValueError):
        sim.Scenario(path="fog")
    with pytest.raises(ValueError):
        sim.Scenario(n_frames=0)
    with pytest.raises(ValueError):
        sim.NetworkModel(loss_rate=1.0)
    with pytest.raises(ValueError):
        sim.NetworkModel(uplink_bps=0)


def test_csv_trace_shape(pair_300, tmp_path):
    cloud, _ = pair_300
    p = tmp_path / "trace.csv"
    cloud.write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "time_s,node,event,frame_id,delay_s"
    assert len(lines) > 300


# ---------------------------------------------------------------------------
# live loopback
# ---------------------------------------------------------------------------

def test_frame_payload_round_trip(rng):
    from edgeyolo.postprocess import Box
    img = rng.uniform(0, 1, size=(3, 32, 32)).astype(np.float32)
    gts = [(Box(10.0, 12.0, 8.0, 6.0), 1), (Box(20.0, 20.0, 5.0, 7.0), 0)]
    blob = live.pack_frame(img, gts)
    back_img, back_gts = live.unpack_frame(blob)
    assert back_img.shape == img.shape
    # u8 quantization: within half a step
    assert np.max(np.abs(back_img - img)) <= 0.5 / 255 + 1e-6
    assert [cls for _, cls in back_gts] == [1, 0]
    for (gb, _), (wb, _) in zip(back_gts, gts):
        # box fields travel as float32
        assert (gb.cx, gb.cy, gb.w, gb.h) == \
            pytest.approx((wb.cx, wb.cy, wb.w, wb.h), abs=1e-5)


def test_loopback_session_pushes_weights():
    edge, cloud, detections = live.run_loopback(n_frames=10, seed=0,
                                                retrain_every=5,
                                                retrain_steps=2)
    assert len(detections) == 10
    assert cloud.version == edge.version
    assert edge.version >= 2            # at least one push applied
    # pushed weights landed: edge and cloud agree bitwise on every tensor
    for pe, pc in zip(edge.graph.params, cloud.graph.params):
        if pe is None:
            assert pc is None
            continue
        for k in pe:
            assert np.array_equal(pe[k], pc[k]), k


def _weights_blob(graph):
    from edgeyolo.netdef import save_weights
    buf = io.BytesIO()
    save_weights(graph, buf)
    return buf.getvalue()


def test_corrupted_push_keeps_prior_weights():
    graph, _ = live.demo_setup(seed=0)
    edge = live.EdgeNode(graph)
    snap = [{k: v.copy() for k, v in p.items()} if p is not None else None
            for p in edge.graph.params]
    version_before = edge.version

    good = _weights_blob(edge.graph)
    broken_magic = bytearray(good)
    broken_magic[0] ^= 0xFF
    truncated = good[:-100]
    for bad in (bytes(broken_magic), truncated):
        applied = edge.handle_push(Message(WEIGHT_PUSH, version_before + 1, bad))
        assert applied is False
        assert edge.version == version_before
    assert any("rejected push" in line for line in edge.log)
    for p, s in zip(edge.graph.params, snap):
        if p is None:
            continue
        for k in p:
            assert np.array_equal(p[k], s[k]), k


def test_stale_push_rejected():
    graph, _ = live.demo_setup(seed=0)
    other, _ = live.demo_setup(seed=0)
    edge = live.EdgeNode(graph)
    good = _weights_blob(other)
    applied = edge.handle_push(Message(WEIGHT_PUSH, edge.version, good))
    assert applied is False             # same version: not newer, rejected
    applied = edge.handle_push(Message(WEIGHT_PUSH, edge.version + 1, good))
    assert applied is True
    assert edge.version == 2
