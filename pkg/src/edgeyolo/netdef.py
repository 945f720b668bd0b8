"""Network graphs: text-config parsing, shape inference, forward, weights IO.

A graph is a flat list of layers; every layer implicitly consumes the
previous layer's output except `route`, which references earlier layers by
index. `head` layers mark their input tensor as a detection output.

Config grammar (one layer per line, `#` starts a comment):

    net <W> <H> <C_in>
    conv <K>x<K>/<s> <filters> [linear]
    max <K>x<K>/<s>
    route <i> [<j> ...] [split <0|1>]
    upsample
    head <scale_index>

`conv` layers carry batch norm and a leaky-relu activation unless marked
`linear` (bias only, identity activation).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from . import nn
from .nn import ShapeError, Tensor

WEIGHTS_MAGIC = b"EYWT"
WEIGHTS_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")  # magic, format version, layer count, graph signature

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class ConfigError(ValueError):
    """Malformed network config; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None, layer: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if layer is not None:
            where.append(f"layer {layer}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.layer = layer


class WeightsError(ValueError):
    """Base class for weight blob problems."""


class BadMagicError(WeightsError):
    pass


class VersionMismatchError(WeightsError):
    pass


class SignatureMismatchError(WeightsError):
    pass


class TruncatedWeightsError(WeightsError):
    pass


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class LayerSpec:
    """Static description of one layer; weights live in NetGraph.params."""

    index: int
    kind: str                     # conv | max | route | upsample | yolo_head
    size: int = 0                 # kernel size for conv/max
    stride: int = 1
    filters: int = 0              # conv output channels
    route_refs: tuple[int, ...] = ()
    split: int | None = None      # channel half for split routes
    batch_norm: bool = False
    activation: str = "linear"
    scale_index: int = -1         # yolo_head only

    def render(self) -> str:
        if self.kind == "conv":
            line = f"conv {self.size}x{self.size}/{self.stride} {self.filters}"
            if not self.batch_norm:
                line += " linear"
            return line
        if self.kind == "max":
            return f"max {self.size}x{self.size}/{self.stride}"
        if self.kind == "route":
            line = "route " + " ".join(str(r) for r in self.route_refs)
            if self.split is not None:
                line += f" split {self.split}"
            return line
        if self.kind == "upsample":
            return "upsample"
        if self.kind == "yolo_head":
            return f"head {self.scale_index}"
        raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class HeadOutput:
    """Raw prediction tensor of one detection scale (grid is scale x scale)."""

    scale_index: int
    scale: int
    raw: Tensor


class NetGraph:
    """A parsed layer graph plus (optionally) its weights and detection meta."""

    def __init__(self, input_shape: tuple[int, int, int], layers: list[LayerSpec]):
        self.input_shape = input_shape          # (w, h, c_in)
        self.layers = layers
        self.out_shapes: list[tuple[int, int, int]] = []   # (c, h, w) per layer
        self.params: list[dict | None] = [None] * len(layers)
        self.num_classes: int | None = None
        self.anchors = None                     # AnchorSet, attached separately
        self.anchors_per_scale: int | None = None
        self._infer_shapes()

    # -- static structure ---------------------------------------------------

    def _infer_shapes(self) -> None:
        w, h, c = self.input_shape
        if min(self.input_shape) < 1:
            raise ConfigError(f"input dimensions must be >= 1, got {self.input_shape}")
        shapes: list[tuple[int, int, int]] = []
        scale_seen: set[int] = set()
        for sp in self.layers:
            prev = shapes[sp.index - 1] if sp.index > 0 else (c, h, w)
            if sp.kind == "conv":
                oh = nn.conv_out_size(prev[1], sp.size, sp.stride)
                ow = nn.conv_out_size(prev[2], sp.size, sp.stride)
                shapes.append((sp.filters, oh, ow))
            elif sp.kind == "max":
                oh = nn.pool_out_size(prev[1], sp.size, sp.stride)
                ow = nn.pool_out_size(prev[2], sp.size, sp.stride)
                if oh < 1 or ow < 1:
                    raise ConfigError(f"pool does not fit {prev[1]}x{prev[2]} input",
                                      layer=sp.index)
                shapes.append((prev[0], oh, ow))
            elif sp.kind == "route":
                for r in sp.route_refs:
                    if not 0 <= r < sp.index:
                        raise ConfigError(f"route references layer {r}, which is not "
                                          f"an earlier layer", layer=sp.index)
                srcs = [shapes[r] for r in sp.route_refs]
                if sp.split is not None:
                    if len(srcs) != 1:
                        raise ConfigError("split route takes exactly one source",
                                          layer=sp.index)
                    sc, sh, sw = srcs[0]
                    if sc % 2 != 0:
                        raise ConfigError(f"cannot split {sc} channels in half",
                                          layer=sp.index)
                    shapes.append((sc // 2, sh, sw))
                else:
                    if len({(s[1], s[2]) for s in srcs}) != 1:
                        raise ConfigError("route sources disagree on spatial size",
                                          layer=sp.index)
                    shapes.append((sum(s[0] for s in srcs), srcs[0][1], srcs[0][2]))
            elif sp.kind == "upsample":
                shapes.append((prev[0], prev[1] * 2, prev[2] * 2))
            elif sp.kind == "yolo_head":
                if sp.index == 0:
                    raise ConfigError("head cannot be the first layer", layer=sp.index)
                if prev[1] != prev[2]:
                    raise ConfigError(f"head needs a square grid, got {prev[1]}x{prev[2]}",
                                      layer=sp.index)
                if sp.scale_index in scale_seen:
                    raise ConfigError(f"duplicate head scale index {sp.scale_index}",
                                      layer=sp.index)
                scale_seen.add(sp.scale_index)
                shapes.append(prev)
            else:
                raise ConfigError(f"unknown layer kind {sp.kind!r}", layer=sp.index)
        if scale_seen and scale_seen != set(range(len(scale_seen))):
            raise ConfigError(f"head scale indices must be 0..{len(scale_seen) - 1}, "
                              f"got {sorted(scale_seen)}")
        self.out_shapes = shapes

    def head_layers(self) -> list[LayerSpec]:
        """Head layer specs sorted coarse grid first (scale index order)."""
        return sorted((sp for sp in self.layers if sp.kind == "yolo_head"),
                      key=lambda sp: sp.scale_index)

    def head_grids(self) -> list[int]:
        return [self.out_shapes[sp.index][1] for sp in self.head_layers()]

    def head_source_indices(self) -> list[int]:
        return [sp.index - 1 for sp in self.head_layers()]

    def canonical_text(self) -> str:
        w, h, c = self.input_shape
        lines = [f"net {w} {h} {c}"]
        lines += [sp.render() for sp in self.layers]
        return "\n".join(lines) + "\n"

    def signature(self) -> int:
        return fnv1a64(self.canonical_text().encode("utf-8"))

    # -- weights ------------------------------------------------------------

    def conv_layers(self) -> list[LayerSpec]:
        return [sp for sp in self.layers if sp.kind == "conv"]

    def is_weighted(self) -> bool:
        return all(self.params[sp.index] is not None for sp in self.conv_layers())

    def in_channels_of(self, sp: LayerSpec) -> int:
        if sp.index == 0:
            return self.input_shape[2]
        return self.out_shapes[sp.index - 1][0]

    def init_random(self, seed: int = 0, dtype=np.float32) -> "NetGraph":
        """He-scaled random conv weights; identity batch norm stats."""
        rng = np.random.default_rng(seed)
        for sp in self.conv_layers():
            cin = self.in_channels_of(sp)
            std = np.sqrt(2.0 / (sp.size * sp.size * cin))
            p = {
                "w": rng.normal(0.0, std, (sp.filters, cin, sp.size, sp.size)).astype(dtype),
                "b": np.zeros(sp.filters, dtype=dtype),
            }
            if sp.batch_norm:
                p["gamma"] = np.ones(sp.filters, dtype=dtype)
                p["beta"] = np.zeros(sp.filters, dtype=dtype)
                p["mean"] = np.zeros(sp.filters, dtype=dtype)
                p["var"] = np.ones(sp.filters, dtype=dtype)
            self.params[sp.index] = p
        return self

    def astype(self, dtype) -> "NetGraph":
        for p in self.params:
            if p is not None:
                for k in p:
                    p[k] = p[k].astype(dtype)
        return self

    def attach_detection_meta(self, num_classes: int, anchors,
                              anchors_per_scale: int) -> "NetGraph":
        """Bind class count and anchors; validates head channel counts."""
        if num_classes < 1:
            raise ValueError(f"need at least one class, got {num_classes}")
        heads = self.head_layers()
        if heads and len(anchors.centroids) != anchors_per_scale * len(heads):
            raise ValueError(f"{len(heads)} scales x {anchors_per_scale} anchors "
                             f"needs {anchors_per_scale * len(heads)} anchors, "
                             f"got {len(anchors.centroids)}")
        want = anchors_per_scale * (5 + num_classes)
        for sp in heads:
            got = self.out_shapes[sp.index][0]
            if got != want:
                raise ConfigError(
                    f"head expects {want} channels "
                    f"({anchors_per_scale} anchors x (5+{num_classes})), got {got}",
                    layer=sp.index)
        self.num_classes = num_classes
        self.anchors = anchors
        self.anchors_per_scale = anchors_per_scale
        return self


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _parse_kernel_stride(tok: str, line_no: int) -> tuple[int, int]:
    try:
        size_part, stride_part = tok.split("/")
        ka, kb = size_part.split("x")
        k, k2, s = int(ka), int(kb), int(stride_part)
    except ValueError:
        raise ConfigError(f"expected <K>x<K>/<s>, got {tok!r}", line=line_no) from None
    if k != k2:
        raise ConfigError(f"only square kernels are supported, got {tok!r}", line=line_no)
    if k < 1 or s < 1:
        raise ConfigError(f"kernel and stride must be positive, got {tok!r}", line=line_no)
    return k, s


def parse_config(text: str) -> NetGraph:
    """Parse config text into a shape-checked (unweighted) NetGraph."""
    header: tuple[int, int, int] | None = None
    specs: list[LayerSpec] = []
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        word = toks[0]
        if header is None:
            if word != "net":
                raise ConfigError(f"first directive must be 'net', got {word!r}",
                                  line=line_no)
            if len(toks) != 4:
                raise ConfigError("net takes exactly <W> <H> <C_in>", line=line_no)
            try:
                header = (int(toks[1]), int(toks[2]), int(toks[3]))
            except ValueError:
                raise ConfigError(f"bad net dimensions {toks[1:]}", line=line_no) from None
            continue
        idx = len(specs)
        if word == "conv":
            if len(toks) not in (3, 4) or (len(toks) == 4 and toks[3] != "linear"):
                raise ConfigError("conv takes <K>x<K>/<s> <filters> [linear]",
                                  line=line_no)
            k, s = _parse_kernel_stride(toks[1], line_no)
            if k % 2 == 0:
                raise ConfigError(f"conv kernel must be odd, got {k}", line=line_no)
            if s not in (1, 2):
                raise ConfigError(f"conv stride must be 1 or 2, got {s}", line=line_no)
            try:
                filters = int(toks[2])
            except ValueError:
                raise ConfigError(f"bad filter count {toks[2]!r}", line=line_no) from None
            if filters < 1:
                raise ConfigError(f"filters must be >= 1, got {filters}", line=line_no)
            linear = len(toks) == 4
            specs.append(LayerSpec(idx, "conv", size=k, stride=s, filters=filters,
                                   batch_norm=not linear,
                                   activation="linear" if linear else "leaky_relu"))
        elif word == "max":
            if len(toks) != 2:
                raise ConfigError("max takes <K>x<K>/<s>", line=line_no)
            k, s = _parse_kernel_stride(toks[1], line_no)
            specs.append(LayerSpec(idx, "max", size=k, stride=s))
        elif word == "route":
            args = toks[1:]
            split: int | None = None
            if "split" in args:
                at = args.index("split")
                if at != len(args) - 2:
                    raise ConfigError("split takes exactly one trailing 0/1 argument",
                                      line=line_no)
                if args[at + 1] not in ("0", "1"):
                    raise ConfigError(f"split half must be 0 or 1, got {args[at + 1]!r}",
                                      line=line_no)
                split = int(args[at + 1])
                args = args[:at]
            if not args:
                raise ConfigError("route needs at least one source index", line=line_no)
            try:
                refs = tuple(int(a) for a in args)
            except ValueError:
                raise ConfigError(f"bad route indices {args}", line=line_no) from None
            specs.append(LayerSpec(idx, "route", route_refs=refs, split=split))
        elif word == "upsample":
            if len(toks) != 1:
                raise ConfigError("upsample takes no arguments", line=line_no)
            specs.append(LayerSpec(idx, "upsample"))
        elif word == "head":
            if len(toks) != 2:
                raise ConfigError("head takes <scale_index>", line=line_no)
            try:
                scale_index = int(toks[1])
            except ValueError:
                raise ConfigError(f"bad scale index {toks[1]!r}", line=line_no) from None
            if scale_index < 0:
                raise ConfigError(f"scale index must be >= 0, got {scale_index}",
                                  line=line_no)
            specs.append(LayerSpec(idx, "yolo_head", scale_index=scale_index))
        else:
            raise ConfigError(f"unknown directive {word!r}", line=line_no)
    if header is None:
        raise ConfigError("config has no 'net' header")
    try:
        return NetGraph(header, specs)
    except ConfigError:
        raise


def load_config(path: str | Path) -> NetGraph:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# the shipped 416 detector
# ---------------------------------------------------------------------------

def edge_yolo_config(num_classes: int = 80, anchors_per_scale: int = 6,
                     input_size: int = 416) -> str:
    """Config text for the pruned-CSP detector with SPP and three heads."""
    f = anchors_per_scale * (5 + num_classes)
    body = [
        "conv 3x3/2 32",            # 0
        "conv 3x3/2 64",            # 1
        "conv 3x3/1 64",            # 2
        "route 2 split 1",          # 3   CSP half
        "conv 3x3/1 32",            # 4
        "conv 3x3/1 32",            # 5
        "route 5 4",                # 6
        "conv 1x1/1 64",            # 7
        "route 2 7",                # 8   CSP merge
        "max 2x2/2",                # 9
        "conv 1x1/1 128",           # 10
        "max 5x5/1",                # 11  SPP
        "route 10",                 # 12
        "max 9x9/1",                # 13
        "route 10",                 # 14
        "max 13x13/1",              # 15
        "route 15 13 11 10",        # 16  SPP merge
        "conv 1x1/1 256",           # 17
        "conv 3x3/1 128",           # 18
        "route 18 split 1",         # 19  CSP half
        "conv 3x3/1 64",            # 20
        "conv 3x3/1 64",            # 21
        "route 21 20",              # 22
        "conv 1x1/1 128",           # 23
        "route 18 23",              # 24  CSP merge
        "max 2x2/2",                # 25
        "conv 1x1/1 128",           # 26
        "conv 3x3/1 256",           # 27
        "route 27 split 1",         # 28  CSP half
        "conv 3x3/1 128",           # 29
        "conv 3x3/1 128",           # 30
        "route 30 29",              # 31
        "conv 1x1/1 256",           # 32
        "route 32 27",              # 33  CSP merge
        "max 2x2/2",                # 34
        "conv 3x3/1 1024",          # 35  coarse head stem
        f"conv 1x1/1 {f} linear",   # 36
        "head 0",                   # 37
        "route 34",                 # 38
        "conv 1x1/1 128",           # 39
        "upsample",                 # 40
        "route 40 33",              # 41
        "conv 1x1/1 256",           # 42
        "conv 3x3/1 512",           # 43  mid head stem
        f"conv 1x1/1 {f} linear",   # 44
        "head 1",                   # 45
        "route 42",                 # 46
        "conv 1x1/1 128",           # 47
        "upsample",                 # 48
        "route 48 24",              # 49
        "conv 1x1/1 128",           # 50
        "conv 3x3/1 256",           # 51  fine head stem
        f"conv 1x1/1 {f} linear",   # 52
        "head 2",                   # 53
    ]
    return f"net {input_size} {input_size} 3\n" + "\n".join(body) + "\n"


def build_edge_yolo(num_classes: int = 80, anchors=None,
                    anchors_per_scale: int = 6) -> NetGraph:
    """Assemble the 416x416 three-scale detector graph.

    Anchors are optional here; detection post-processing needs them, the
    static analyzer and forward pass do not.
    """
    g = parse_config(edge_yolo_config(num_classes, anchors_per_scale))
    if anchors is not None:
        g.attach_detection_meta(num_classes, anchors, anchors_per_scale)
    else:
        g.num_classes = num_classes
        g.anchors_per_scale = anchors_per_scale
    return g


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def forward_trace(g: NetGraph, x: Tensor, train: bool = False,
                  bn_momentum: float = 0.9):
    """Run the graph keeping every intermediate; returns (outputs, caches, heads).

    With train=True batch norm uses batch statistics and folds them into the
    running estimates with the given momentum.
    """
    w, h, c = g.input_shape
    if (x.c, x.h, x.w) != (c, h, w):
        raise ShapeError(f"graph expects input (c,h,w)=({c},{h},{w}), "
                         f"got ({x.c},{x.h},{x.w})")
    if not g.is_weighted():
        missing = [sp.index for sp in g.conv_layers() if g.params[sp.index] is None]
        raise ValueError(f"graph has no weights for conv layers {missing}")
    outputs: list[np.ndarray] = []
    caches: list[dict] = []
    heads: list[HeadOutput] = []
    for sp in g.layers:
        src = outputs[sp.index - 1] if sp.index > 0 else x.data
        cache: dict = {}
        if sp.kind == "conv":
            p = g.params[sp.index]
            z = nn.conv2d_raw(src, p["w"], p["b"], sp.stride)
            cache["conv_x"] = src
            if sp.batch_norm:
                if train:
                    zn, bn_cache = nn.batchnorm_train_forward(
                        z, p["gamma"], p["beta"], 1e-5)
                    cache["bn"] = bn_cache
                    _, _, _, mu, var = bn_cache
                    p["mean"] = (bn_momentum * p["mean"]
                                 + (1.0 - bn_momentum) * mu).astype(p["mean"].dtype)
                    p["var"] = (bn_momentum * p["var"]
                                + (1.0 - bn_momentum) * var).astype(p["var"].dtype)
                else:
                    zn = nn.batchnorm_infer_raw(z, p["gamma"], p["beta"],
                                                p["mean"], p["var"], 1e-5)
                    cache["bn_x"] = z
            else:
                zn = z
            cache["act_x"] = zn
            out = nn.activate_raw(zn, sp.activation)
        elif sp.kind == "max":
            out, arg = nn.maxpool_forward(src, sp.size, sp.stride)
            cache["pool_arg"] = arg
            cache["pool_shape"] = src.shape
        elif sp.kind == "route":
            srcs = [outputs[r] for r in sp.route_refs]
            if sp.split is not None:
                out = nn.split_half(srcs[0], sp.split)
            else:
                out = nn.concat_channels(srcs)
                cache["route_channels"] = [s.shape[1] for s in srcs]
        elif sp.kind == "upsample":
            out = nn.upsample2x_raw(src)
        elif sp.kind == "yolo_head":
            out = src
            heads.append(HeadOutput(sp.scale_index, src.shape[2], Tensor(src)))
        else:
            raise ValueError(f"unknown layer kind {sp.kind!r}")
        outputs.append(out)
        caches.append(cache)
    heads.sort(key=lambda ho: ho.scale_index)
    return outputs, caches, heads


def forward(g: NetGraph, x: Tensor, train: bool = False) -> list[HeadOutput]:
    """Run the graph; returns head outputs ordered coarsest grid first."""
    _, _, heads = forward_trace(g, x, train=train)
    return heads


# ---------------------------------------------------------------------------
# weights serialization
# ---------------------------------------------------------------------------

def _param_order(sp: LayerSpec) -> list[str]:
    keys = ["gamma", "beta", "mean", "var"] if sp.batch_norm else []
    return keys + ["w", "b"]


def save_weights(g: NetGraph, sink: str | Path | BinaryIO) -> int:
    """Write all conv parameters as little-endian f32; returns bytes written."""
    if not g.is_weighted():
        raise ValueError("cannot save an unweighted graph")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, len(g.layers), g.signature()))
    for sp in g.conv_layers():
        p = g.params[sp.index]
        for key in _param_order(sp):
            buf.write(np.ascontiguousarray(p[key], dtype="<f4").tobytes())
    blob = buf.getvalue()
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(blob)
    else:
        sink.write(blob)
    return len(blob)


def load_weights(g: NetGraph, source: str | Path | BinaryIO | bytes) -> NetGraph:
    """Read a weight blob written by save_weights into g (validates identity)."""
    if isinstance(source, (str, Path)):
        blob = Path(source).read_bytes()
    elif isinstance(source, bytes):
        blob = source
    else:
        blob = source.read()
    if len(blob) < _HEADER.size:
        raise TruncatedWeightsError(f"blob is {len(blob)} bytes, header needs "
                                    f"{_HEADER.size}")
    magic, version, count, sig = _HEADER.unpack_from(blob, 0)
    if magic != WEIGHTS_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    if version != WEIGHTS_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {WEIGHTS_VERSION}")
    if count != len(g.layers):
        raise SignatureMismatchError(f"blob is for a {count}-layer graph, "
                                     f"this graph has {len(g.layers)} layers")
    if sig != g.signature():
        raise SignatureMismatchError(f"graph signature {sig:#018x} does not match "
                                     f"{g.signature():#018x}")
    off = _HEADER.size
    for sp in g.conv_layers():
        cin = g.in_channels_of(sp)
        shapes = {"gamma": (sp.filters,), "beta": (sp.filters,), "mean": (sp.filters,),
                  "var": (sp.filters,), "w": (sp.filters, cin, sp.size, sp.size),
                  "b": (sp.filters,)}
        p = {}
        for key in _param_order(sp):
            n_items = int(np.prod(shapes[key]))
            end = off + 4 * n_items
            if end > len(blob):
                raise TruncatedWeightsError(
                    f"blob ends inside conv layer {sp.index} ({key})")
            p[key] = np.frombuffer(blob, dtype="<f4", count=n_items,
                                   offset=off).astype(np.float32).reshape(shapes[key])
            off = end
        g.params[sp.index] = p
    if off != len(blob):
        raise WeightsError(f"{len(blob) - off} trailing bytes after the last layer")
    return g
