"""Live edge/cloud cooperation over a byte stream.

Each side is a single-threaded state machine owning all of its mutable
state; the transport is a strict request/reply alternation. The edge
detects its frames locally, uploads each one, and gets back either an ACK
or a WEIGHT_PUSH carrying a full weight blob. The cloud buffers uploads and
fine-tunes after every `retrain_every` frames, bumping its model version.

FRAME_UPLOAD payload: u16 height, u16 width, u8 channels, u16 gt count,
then h*w*c bytes of u8 pixels, then per gt (u32 class, 4 x f32 box),
little-endian. Demo frames carry their programmatic labels with them.
"""

from __future__ import annotations

import io
import json
import socket
import struct

import numpy as np

from .. import netdef, nn
from ..anchors import kmeans_anchors
from ..netdef import NetGraph, WeightsError, load_weights, save_weights
from ..postprocess import Box, Detection
from ..training import (OptimizerConfig, ToyScenario, assign_targets,
                        backward_and_step, detect_image, generate_toy_dataset,
                        toy_config)
from . import protocol
from .protocol import Message

_FRAME_HEAD = struct.Struct("<HHBH")
_GT = struct.Struct("<ffffI")   # cx, cy, w, h, class


def pack_frame(img: np.ndarray, gts: list[tuple[Box, int]]) -> bytes:
    """img is float CHW in [0,1]; quantized to u8 for the wire."""
    c, h, w = img.shape
    u8 = np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8)
    parts = [_FRAME_HEAD.pack(h, w, c, len(gts)), u8.tobytes()]
    parts += [_GT.pack(b.cx, b.cy, b.w, b.h, cls) for b, cls in gts]
    return b"".join(parts)


def unpack_frame(payload: bytes) -> tuple[np.ndarray, list[tuple[Box, int]]]:
    h, w, c, n_gt = _FRAME_HEAD.unpack_from(payload, 0)
    off = _FRAME_HEAD.size
    pixels = np.frombuffer(payload, dtype=np.uint8, count=h * w * c, offset=off)
    img = pixels.reshape(c, h, w).astype(np.float32) / 255.0
    off += h * w * c
    gts = []
    for _ in range(n_gt):
        cx, cy, bw, bh, cls = _GT.unpack_from(payload, off)
        off += _GT.size
        gts.append((Box(cx, cy, bw, bh), int(cls)))
    return img, gts


def detections_to_json(dets: list[Detection]) -> bytes:
    rows = [{"class": d.class_id, "score": d.score, "cx": d.box.cx,
             "cy": d.box.cy, "w": d.box.w, "h": d.box.h} for d in dets]
    return json.dumps(rows).encode("utf-8")


class Transport:
    """Framed messages over a connected socket (or socket-like pair)."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._reader = sock.makefile("rb")

    def send(self, msg: Message) -> None:
        self._sock.sendall(protocol.encode_message(msg))

    def recv(self) -> Message | None:
        return protocol.read_message(self._reader)

    def close(self) -> None:
        self._reader.close()
        self._sock.close()


class EdgeNode:
    """Runs local detection, uploads frames, applies pushed weights."""

    def __init__(self, graph: NetGraph, version: int = 1,
                 score_floor: float = 0.05):
        self.graph = graph
        self.version = version
        self.score_floor = score_floor
        self.log: list[str] = []

    def handle_push(self, msg: Message) -> bool:
        """Validate and atomically apply a WEIGHT_PUSH; reject regressions."""
        if msg.version <= self.version:
            self.log.append(f"rejected push: version {msg.version} "
                            f"<= current {self.version}")
            return False
        fresh = netdef.parse_config(self.graph.canonical_text())
        try:
            load_weights(fresh, msg.payload)
        except WeightsError as err:
            self.log.append(f"rejected push: {err}")
            return False
        self.graph.params = fresh.params     # swap is a single reference move
        self.version = msg.version
        self.log.append(f"applied push: now at version {self.version}")
        return True

    def run_session(self, transport: Transport,
                    frames: list[tuple[np.ndarray, list[tuple[Box, int]]]]
                    ) -> list[list[Detection]]:
        """Detect and upload every frame; returns the local detections."""
        results = []
        for img, gts in frames:
            results.append(detect_image(self.graph, img, self.score_floor))
            transport.send(Message(protocol.FRAME_UPLOAD, self.version,
                                   pack_frame(img, gts)))
            reply = transport.recv()
            if reply is None:
                self.log.append("cloud hung up mid-session")
                break
            if reply.msg_type == protocol.WEIGHT_PUSH:
                self.handle_push(reply)
            elif reply.msg_type != protocol.ACK:
                self.log.append(f"unexpected reply type {reply.msg_type}")
        return results


class CloudNode:
    """Buffers uploads, periodically fine-tunes, answers detect requests."""

    def __init__(self, graph: NetGraph, version: int = 1, retrain_every: int = 5,
                 retrain_steps: int = 3, eta: float = 5e-4,
                 score_floor: float = 0.05):
        self.graph = graph
        self.version = version
        self.retrain_every = retrain_every
        self.retrain_steps = retrain_steps
        self.opt = OptimizerConfig(eta=eta)
        self.score_floor = score_floor
        self.buffer: list[tuple[np.ndarray, list[tuple[Box, int]]]] = []
        self.log: list[str] = []

    def _retrain(self) -> None:
        w, h, _ = self.graph.input_shape
        grids = self.graph.head_grids()
        recent = self.buffer[-self.retrain_every:]
        usable = [(img, gts) for img, gts in recent if gts]
        if not usable:
            return
        imgs = np.stack([img for img, _ in usable])
        targets = [assign_targets(gts, self.graph.anchors, grids, (w, h),
                                  self.graph.num_classes)
                   for _, gts in usable]
        for _ in range(self.retrain_steps):
            backward_and_step(self.graph, nn.Tensor(imgs), targets, self.opt)
        self.version += 1
        self.log.append(f"retrained on {len(usable)} frames -> "
                        f"version {self.version}")

    def handle(self, msg: Message) -> Message:
        if msg.msg_type == protocol.FRAME_UPLOAD:
            self.buffer.append(unpack_frame(msg.payload))
            if len(self.buffer) % self.retrain_every == 0:
                before = self.version
                self._retrain()
                if self.version != before:
                    blob = io.BytesIO()
                    save_weights(self.graph, blob)
                    return Message(protocol.WEIGHT_PUSH, self.version,
                                   blob.getvalue())
            return Message(protocol.ACK, self.version)
        if msg.msg_type == protocol.DETECT_REQUEST:
            img, _ = unpack_frame(msg.payload)
            dets = detect_image(self.graph, img, self.score_floor)
            return Message(protocol.DETECT_RESULT, self.version,
                           detections_to_json(dets))
        self.log.append(f"ignoring message type {msg.msg_type}")
        return Message(protocol.ACK, self.version)

    def serve(self, transport: Transport) -> None:
        while True:
            try:
                msg = transport.recv()
            except protocol.ProtocolError as err:
                self.log.append(f"dropping bad frame: {err}")
                continue
            if msg is None:
                return
            transport.send(self.handle(msg))


def demo_setup(seed: int = 0, num_classes: int = 3,
               img_size: int = 64) -> tuple[NetGraph, ToyScenario]:
    """A deterministic slim graph both roles can reconstruct from the seed."""
    sc = ToyScenario(seed=seed, num_classes=num_classes, img_size=img_size)
    sample = generate_toy_dataset(seed * 1000 + 1, 64, img_size, num_classes)
    wh = [(b.w, b.h) for _, gts in sample for b, _ in gts]
    anchors = kmeans_anchors(wh, k=3 * sc.anchors_per_scale, seed=seed,
                             input_size=img_size)
    g = netdef.parse_config(toy_config(num_classes, sc.anchors_per_scale,
                                       sc.width, img_size))
    g.attach_detection_meta(num_classes, anchors, sc.anchors_per_scale)
    g.init_random(seed)
    return g, sc


def run_loopback(n_frames: int = 10, seed: int = 0, retrain_every: int = 5,
                 retrain_steps: int = 2) -> tuple[EdgeNode, CloudNode, list]:
    """Wire an edge and a cloud through an in-process socket pair."""
    import threading

    edge_graph, sc = demo_setup(seed)
    cloud_graph, _ = demo_setup(seed)
    edge = EdgeNode(edge_graph)
    cloud = CloudNode(cloud_graph, retrain_every=retrain_every,
                      retrain_steps=retrain_steps)
    frames = generate_toy_dataset(seed * 1000 + 5, n_frames, sc.img_size,
                                  sc.num_classes)
    a, b = socket.socketpair()
    edge_t, cloud_t = Transport(a), Transport(b)
    server = threading.Thread(target=cloud.serve, args=(cloud_t,), daemon=True)
    server.start()
    try:
        detections = edge.run_session(edge_t, frames)
    finally:
        edge_t.close()
        server.join(timeout=30)
        cloud_t.close()
    return edge, cloud, detections
