"""Training: target assignment, composite loss, backprop, toy fine-tuning.

The loss follows the usual one-stage recipe: CIoU on decoded boxes at
positive slots, binary cross-entropy on objectness everywhere (negatives
weighted by lambda_noobj), binary cross-entropy on class scores at positive
slots. Probabilities are clamped to [1e-7, 1 - 1e-7] inside every BCE term.
Scalar reductions use math.fsum, so totals do not depend on summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn, netdef
from .anchors import AnchorSet, kmeans_anchors
from .netdef import HeadOutput, NetGraph, parse_config
from .postprocess import (Box, Detection, SoftNmsConfig, ciou_loss_grad, decode,
                          evaluate, iou, soft_nms)

BCE_EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    """A gradient or the loss stopped being finite."""


@dataclass
class OptimizerConfig:
    """Plain stochastic gradient descent, theta <- theta - eta * grad."""

    eta: float = 0.0002

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"learning rate must be positive, got {self.eta}")


@dataclass
class LossReport:
    loss_box: float
    loss_obj: float
    loss_cls: float
    loss_total: float
    n_positive: int


@dataclass
class TargetAssignment:
    """Dense per-scale training targets for one image.

    Arrays are indexed [anchor, row, col] on each scale's grid; scales are
    ordered coarsest grid first, matching forward()'s head order.
    """

    grids: tuple[int, ...]
    canvas: tuple[float, float]            # (img_w, img_h)
    anchor_px: list[np.ndarray]            # (A, 2) per scale
    obj_mask: list[np.ndarray]             # bool (A, S, S)
    box_target: list[np.ndarray]           # float (A, S, S, 4) as cx, cy, w, h
    cls_target: list[np.ndarray]           # int (A, S, S)
    lambda_noobj: float = 0.5
    n_positive: int = 0


def _wh_iou(wa: float, ha: float, wb: float, hb: float) -> float:
    inter = min(wa, wb) * min(ha, hb)
    return inter / (wa * ha + wb * hb - inter)


def assign_targets(gts: Sequence[tuple[Box, int]], anchors: AnchorSet,
                   grids: Sequence[int], canvas: tuple[float, float],
                   num_classes: int, lambda_noobj: float = 0.5) -> TargetAssignment:
    """Assign each gt box to one (scale, cell, anchor) slot.

    The anchor is the one of highest IoU against the gt extent at the
    origin; the cell is the one containing the gt center on that anchor's
    scale. When the preferred slot is already taken the box falls through
    to its next-best anchor. Zero-extent boxes and out-of-canvas centers
    are rejected.
    """
    img_w, img_h = canvas
    groups = anchors.per_scale(len(grids))
    ta = TargetAssignment(
        grids=tuple(grids), canvas=(float(img_w), float(img_h)),
        anchor_px=[np.asarray(grp, dtype=np.float64) for grp in groups],
        obj_mask=[np.zeros((len(grp), s, s), dtype=bool)
                  for grp, s in zip(groups, grids)],
        box_target=[np.zeros((len(grp), s, s, 4)) for grp, s in zip(groups, grids)],
        cls_target=[np.zeros((len(grp), s, s), dtype=np.int64)
                    for grp, s in zip(groups, grids)],
        lambda_noobj=lambda_noobj,
    )
    flat = [(si, ai, float(w), float(h))
            for si, grp in enumerate(groups) for ai, (w, h) in enumerate(grp)]
    for box, cls in gts:
        if box.w <= 0 or box.h <= 0:
            raise ValueError(f"gt box has zero extent: {box}")
        if not (0 <= box.cx < img_w and 0 <= box.cy < img_h):
            raise ValueError(f"gt center outside the {img_w}x{img_h} canvas: {box}")
        if not 0 <= cls < num_classes:
            raise ValueError(f"class id {cls} out of range for {num_classes} classes")
        ranked = sorted(flat, key=lambda t: (-_wh_iou(box.w, box.h, t[2], t[3]),
                                             t[0], t[1]))
        placed = False
        for si, ai, aw, ah in ranked:
            s = grids[si]
            cx = int(box.cx / (img_w / s))
            cy = int(box.cy / (img_h / s))
            if ta.obj_mask[si][ai, cy, cx]:
                continue
            # the size part of the slot's raw target must be recoverable
            assert math.isfinite(math.log(box.w / aw)) and \
                math.isfinite(math.log(box.h / ah))
            ta.obj_mask[si][ai, cy, cx] = True
            ta.box_target[si][ai, cy, cx] = (box.cx, box.cy, box.w, box.h)
            ta.cls_target[si][ai, cy, cx] = cls
            ta.n_positive += 1
            placed = True
            break
        if not placed:
            raise ValueError("no free (scale, cell, anchor) slot left for a gt box")
    return ta


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _bce_and_dlogit(p: np.ndarray, target: float) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise clamped BCE against a constant target, plus d/d(logit)."""
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    in_range = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    if target == 1.0:
        return -np.log(pc), np.where(in_range, p - 1.0, 0.0)
    return -np.log1p(-pc), np.where(in_range, p, 0.0)


def _loss_and_grads(raws: list[np.ndarray], targets: list[TargetAssignment],
                    want_grad: bool) -> tuple[LossReport, list[np.ndarray] | None]:
    n = raws[0].shape[0]
    if len(targets) != n:
        raise ValueError(f"{n} images in the batch but {len(targets)} target sets")
    for r in raws:
        if not np.all(np.isfinite(r)):
            raise TrainingDivergedError("head logits contain non-finite values")
    grids = targets[0].grids
    if tuple(r.shape[2] for r in raws) != grids:
        raise ValueError(f"head grids {[r.shape[2] for r in raws]} do not match "
                         f"targets {grids}")
    grads = [np.zeros_like(r, dtype=np.float64) for r in raws] if want_grad else None
    box_terms: list[float] = []
    obj_terms: list[float] = []
    cls_terms: list[float] = []
    n_pos = 0
    for b in range(n):
        ta = targets[b]
        img_w, img_h = ta.canvas
        for si, s in enumerate(grids):
            a = ta.obj_mask[si].shape[0]
            per = raws[si].shape[1] // a
            c = per - 5
            r = raws[si][b].astype(np.float64).reshape(a, per, s, s)
            dr = np.zeros_like(r) if want_grad else None
            pos = ta.obj_mask[si]

            # saturated logits overflow exp harmlessly: the quotient is 0
            with np.errstate(over="ignore"):
                p_obj = 1.0 / (1.0 + np.exp(-r[:, 4]))
            l_pos, g_pos = _bce_and_dlogit(p_obj, 1.0)
            l_neg, g_neg = _bce_and_dlogit(p_obj, 0.0)
            obj_terms.append(float(np.sum(np.where(pos, l_pos, 0.0))))
            obj_terms.append(ta.lambda_noobj * float(np.sum(np.where(pos, 0.0, l_neg))))
            if want_grad:
                dr[:, 4] = np.where(pos, g_pos, ta.lambda_noobj * g_neg)

            stride_x, stride_y = img_w / s, img_h / s
            for ai, cy, cx in zip(*np.nonzero(pos)):
                n_pos += 1
                tx, ty, tw, th = r[ai, 0, cy, cx], r[ai, 1, cy, cx], \
                    r[ai, 2, cy, cx], r[ai, 3, cy, cx]
                # finite float32 logits can still overflow math.exp (~709);
                # anything near that scale is a diverged step, not a loss value
                if max(abs(tx), abs(ty), abs(tw), abs(th)) > 600.0:
                    raise TrainingDivergedError(
                        "diverged: box logits out of numeric range")
                aw, ah = ta.anchor_px[si][ai]
                sx, sy = 1.0 / (1.0 + math.exp(-tx)), 1.0 / (1.0 + math.exp(-ty))
                pred = (
                    (sx + cx) * stride_x,
                    (sy + cy) * stride_y,
                    aw * math.exp(tw),
                    ah * math.exp(th),
                )
                gt = ta.box_target[si][ai, cy, cx]
                if want_grad:
                    lb, dbox = ciou_loss_grad(pred, gt)
                    dr[ai, 0, cy, cx] = dbox[0] * sx * (1.0 - sx) * stride_x
                    dr[ai, 1, cy, cx] = dbox[1] * sy * (1.0 - sy) * stride_y
                    dr[ai, 2, cy, cx] = dbox[2] * pred[2]
                    dr[ai, 3, cy, cx] = dbox[3] * pred[3]
                else:
                    lb, _ = ciou_loss_grad(pred, gt)
                box_terms.append(lb)

                with np.errstate(over="ignore"):
                    p_cls = 1.0 / (1.0 + np.exp(-r[ai, 5:, cy, cx]))
                onehot = np.zeros(c)
                onehot[ta.cls_target[si][ai, cy, cx]] = 1.0
                l1, g1 = _bce_and_dlogit(p_cls, 1.0)
                l0, g0 = _bce_and_dlogit(p_cls, 0.0)
                cls_terms.append(float(np.sum(np.where(onehot > 0, l1, l0))))
                if want_grad:
                    dr[ai, 5:, cy, cx] = np.where(onehot > 0, g1, g0)
            if want_grad:
                grads[si][b] = dr.reshape(a * per, s, s)

    # batch mean, so eta does not depend on batch size
    loss_box = math.fsum(box_terms) / n
    loss_obj = math.fsum(obj_terms) / n
    loss_cls = math.fsum(cls_terms) / n
    if want_grad:
        for gr in grads:
            gr /= n
    report = LossReport(loss_box, loss_obj, loss_cls,
                        loss_box + loss_obj + loss_cls, n_pos)
    return report, grads


def _as_target_list(targets, n: int) -> list[TargetAssignment]:
    if isinstance(targets, TargetAssignment):
        targets = [targets]
    targets = list(targets)
    if len(targets) != n:
        raise ValueError(f"{n} images in the batch but {len(targets)} target sets")
    return targets


def total_loss(heads: Sequence[HeadOutput], targets) -> LossReport:
    """Composite loss of a forward pass against assigned targets."""
    raws = [h.raw.data for h in heads]
    report, _ = _loss_and_grads(raws, _as_target_list(targets, raws[0].shape[0]),
                                want_grad=False)
    return report


# ---------------------------------------------------------------------------
# backprop through a graph
# ---------------------------------------------------------------------------

def graph_backward(g: NetGraph, x: nn.Tensor, outputs: list[np.ndarray],
                   caches: list[dict], head_grads: dict[int, np.ndarray],
                   train: bool = True):
    """Propagate d(loss)/d(layer output) seeds back to parameter gradients.

    head_grads maps layer index -> gradient array. Returns (param_grads,
    d_input) where param_grads maps conv layer index -> {name: grad}.
    """
    n_layers = len(g.layers)
    d_out: list[np.ndarray | None] = [None] * n_layers
    for idx, grad in head_grads.items():
        d_out[idx] = grad.astype(outputs[idx].dtype) if d_out[idx] is None \
            else d_out[idx] + grad
    param_grads: dict[int, dict[str, np.ndarray]] = {}
    d_input: np.ndarray | None = None

    def send(idx: int, grad: np.ndarray) -> None:
        nonlocal d_input
        if idx < 0:
            d_input = grad if d_input is None else d_input + grad
        elif d_out[idx] is None:
            d_out[idx] = grad.copy()
        else:
            d_out[idx] += grad

    for i in range(n_layers - 1, -1, -1):
        dy = d_out[i]
        if dy is None:
            continue
        sp = g.layers[i]
        cache = caches[i]
        if sp.kind == "conv":
            p = g.params[i]
            dz = nn.activate_backward(dy, cache["act_x"], sp.activation)
            pg: dict[str, np.ndarray] = {}
            if sp.batch_norm:
                if train:
                    dz, dgamma, dbeta = nn.batchnorm_train_backward(dz, cache["bn"])
                else:
                    dz, dgamma, dbeta = nn.batchnorm_infer_backward(
                        dz, cache["bn_x"], p["gamma"], p["mean"], p["var"], 1e-5)
                pg["gamma"], pg["beta"] = dgamma, dbeta
            dx, dw, db = nn.conv2d_backward(dz, cache["conv_x"], p["w"], sp.stride)
            pg["w"], pg["b"] = dw, db
            param_grads[i] = pg
            send(i - 1, dx)
        elif sp.kind == "max":
            send(i - 1, nn.maxpool_backward(dy, cache["pool_arg"],
                                            cache["pool_shape"], sp.size, sp.stride))
        elif sp.kind == "route":
            if sp.split is not None:
                src_c = outputs[sp.route_refs[0]].shape[1]
                send(sp.route_refs[0], nn.split_half_backward(dy, src_c, sp.split))
            else:
                for ref, part in zip(sp.route_refs,
                                     nn.concat_backward(dy, cache["route_channels"])):
                    send(ref, part)
        elif sp.kind == "upsample":
            send(i - 1, nn.upsample2x_backward(dy))
        elif sp.kind == "yolo_head":
            send(i - 1, dy)
    return param_grads, d_input


def backward_and_step(g: NetGraph, batch: nn.Tensor, targets,
                      opt: OptimizerConfig) -> tuple[NetGraph, LossReport]:
    """One SGD step over a batch; returns the loss measured before the step."""
    target_list = _as_target_list(targets, batch.n)
    outputs, caches, heads = netdef.forward_trace(g, batch, train=True)
    raws = [h.raw.data for h in heads]
    report, raw_grads = _loss_and_grads(raws, target_list, want_grad=True)
    if not math.isfinite(report.loss_total):
        raise TrainingDivergedError(f"loss is not finite: {report}")
    head_layer_index = {sp.scale_index: sp.index for sp in g.head_layers()}
    head_grads = {head_layer_index[h.scale_index]: raw_grads[k]
                  for k, h in enumerate(heads)}
    param_grads, _ = graph_backward(g, batch, outputs, caches, head_grads, train=True)
    for idx, pg in param_grads.items():
        for name, grad in pg.items():
            if not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(
                    f"non-finite gradient at conv layer {idx} ({name})")
    for idx, pg in param_grads.items():
        p = g.params[idx]
        for name, grad in pg.items():
            p[name] = (p[name] - opt.eta * grad).astype(p[name].dtype)
    return g, report


# ---------------------------------------------------------------------------
# synthetic-shapes scenario
# ---------------------------------------------------------------------------

@dataclass
class ToyScenario:
    """Seeded colored-shapes detection task small enough to train on a CPU."""

    seed: int = 0
    num_classes: int = 3
    img_size: int = 64
    train_images: int = 1024   # smaller corpora reward background memorization
    val_images: int = 64
    steps: int = 4000          # held-out AP peaks near here and declines by 6000
    batch_size: int = 8
    eta: float = 0.002
    lambda_noobj: float = 0.5
    anchors_per_scale: int = 2
    width: int = 8
    eval_every: int = 0            # 0: evaluate only at the end
    decode_floor: float = 0.05

    def __post_init__(self):
        if not 2 <= self.num_classes <= 4:
            raise ValueError("the shapes task defines 2 to 4 classes")
        if self.img_size % 16 != 0:
            raise ValueError("img_size must be a multiple of 16")


# class -> (fill color, shape); even ids are rectangles, odd ids ellipses
_TOY_STYLES = [
    ((0.90, 0.15, 0.10), "rect"),
    ((0.10, 0.85, 0.15), "ellipse"),
    ((0.15, 0.25, 0.95), "rect"),
    ((0.92, 0.85, 0.10), "ellipse"),
]

# class -> extent range in pixels; tying size to identity keeps the task
# learnable from a small corpus instead of rewarding background memorization
_TOY_SIZE_BANDS = [
    (14.0, 20.0),
    (20.0, 27.0),
    (26.0, 36.0),
    (17.0, 23.0),
]


def generate_toy_dataset(seed: int, count: int, img_size: int,
                         num_classes: int) -> list[tuple[np.ndarray, list[tuple[Box, int]]]]:
    """Colored rectangles and ellipses on uniform noise, with exact boxes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:img_size, 0:img_size]
    out = []
    for _ in range(count):
        img = rng.uniform(0.0, 0.30, size=(3, img_size, img_size)).astype(np.float32)
        gts: list[tuple[Box, int]] = []
        for _ in range(int(rng.integers(1, 3))):
            cls = int(rng.integers(0, num_classes))
            lo, hi = _TOY_SIZE_BANDS[cls]
            w = float(rng.uniform(lo, hi))
            h = float(rng.uniform(lo, hi))
            cx = float(rng.uniform(w / 2 + 1, img_size - w / 2 - 1))
            cy = float(rng.uniform(h / 2 + 1, img_size - h / 2 - 1))
            box = Box(cx, cy, w, h)
            if any(iou(box, b) > 0.10 for b, _ in gts):
                continue
            color, shape = _TOY_STYLES[cls]
            if shape == "rect":
                mask = (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)
            else:
                mask = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
            for ch in range(3):
                img[ch][mask] = color[ch] * float(rng.uniform(0.85, 1.0))
            gts.append((box, cls))
        out.append((img, gts))
    return out


def toy_config(num_classes: int, anchors_per_scale: int, width: int = 8,
               img_size: int = 64) -> str:
    """A slim three-scale graph (strides 4/8/16) for small canvases."""
    w = width
    f = anchors_per_scale * (5 + num_classes)
    body = [
        f"conv 3x3/2 {w}",
        f"conv 3x3/1 {w}",
        f"conv 3x3/2 {2 * w}",
        f"conv 3x3/1 {2 * w}",          # 3: fine lateral
        f"conv 3x3/2 {4 * w}",
        f"conv 3x3/1 {4 * w}",          # 5: mid lateral
        f"conv 3x3/2 {8 * w}",          # 6: coarse trunk
        f"conv 3x3/1 {16 * w}",
        f"conv 1x1/1 {f} linear",
        "head 0",
        "route 6",
        f"conv 1x1/1 {2 * w}",
        "upsample",
        "route 12 5",
        f"conv 1x1/1 {4 * w}",          # 14: mid fuse
        f"conv 3x3/1 {8 * w}",
        f"conv 1x1/1 {f} linear",
        "head 1",
        "route 14",
        f"conv 1x1/1 {w}",
        "upsample",
        "route 20 3",
        f"conv 1x1/1 {2 * w}",
        f"conv 3x3/1 {4 * w}",
        f"conv 1x1/1 {f} linear",
        "head 2",
    ]
    return f"net {img_size} {img_size} 3\n" + "\n".join(body) + "\n"


def _init_head_bias(g: NetGraph, num_classes: int, anchors_per_scale: int,
                    obj_bias: float = -4.0) -> None:
    # start objectness near zero so the negative-slot sea is quiet
    per = 5 + num_classes
    for src in g.head_source_indices():
        b = g.params[src]["b"]
        for a in range(anchors_per_scale):
            b[a * per + 4] = obj_bias


@dataclass
class TrainResult:
    graph: NetGraph
    anchors: AnchorSet
    history: list[dict]
    final_ap: float
    initial_loss: float
    final_loss: float


def detect_image(g: NetGraph, img: np.ndarray, score_floor: float,
                 nms: SoftNmsConfig = SoftNmsConfig()) -> list[Detection]:
    """Forward one CHW image and run the full decode + suppression chain."""
    heads = netdef.forward(g, nn.Tensor(img[None]))
    w, h, _ = g.input_shape
    dets: list[Detection] = []
    for head in heads:
        anchors = g.anchors.for_scale_index(head.scale_index, len(heads))
        dets.extend(decode(head, anchors, w, h, score_floor))
    return soft_nms(dets, nms)


def evaluate_toy(g: NetGraph, dataset, score_floor: float = 0.05,
                 iou_thresh: float = 0.5) -> float:
    preds = [detect_image(g, img, score_floor) for img, _ in dataset]
    gts = [list(g_) for _, g_ in dataset]
    return evaluate(preds, gts, iou_thresh, g.num_classes).mean_ap


def train_toy(scenario: ToyScenario = ToyScenario()) -> TrainResult:
    """Train the slim graph on the shapes task; deterministic given the seed.

    Anchors come from K-means over the training boxes. Returns the trained
    graph plus per-step loss history and the held-out mean AP at IoU 0.5.
    """
    sc = scenario
    train_set = generate_toy_dataset(sc.seed * 1000 + 1, sc.train_images,
                                     sc.img_size, sc.num_classes)
    val_set = generate_toy_dataset(sc.seed * 1000 + 2, sc.val_images,
                                   sc.img_size, sc.num_classes)
    wh = [(b.w, b.h) for _, gts in train_set for b, _ in gts]
    anchors = kmeans_anchors(wh, k=3 * sc.anchors_per_scale, seed=sc.seed,
                             input_size=sc.img_size)
    g = parse_config(toy_config(sc.num_classes, sc.anchors_per_scale,
                                sc.width, sc.img_size))
    g.attach_detection_meta(sc.num_classes, anchors, sc.anchors_per_scale)
    g.init_random(sc.seed)
    _init_head_bias(g, sc.num_classes, sc.anchors_per_scale)

    grids = g.head_grids()
    assignments = [assign_targets(gts, anchors, grids,
                                  (sc.img_size, sc.img_size),
                                  sc.num_classes, sc.lambda_noobj)
                   for _, gts in train_set]
    images = np.stack([img for img, _ in train_set])

    rng = np.random.default_rng(sc.seed + 7)
    opt = OptimizerConfig(eta=sc.eta)
    history: list[dict] = []
    initial_loss = final_loss = 0.0
    for step in range(sc.steps):
        idx = rng.choice(len(train_set), size=sc.batch_size, replace=False)
        batch = nn.Tensor(images[idx])
        try:
            g, report = backward_and_step(g, batch,
                                          [assignments[i] for i in idx], opt)
        except TrainingDivergedError as err:
            err.history = history
            raise
        if not math.isfinite(report.loss_total) or report.loss_total > 1e4:
            err = TrainingDivergedError(f"loss diverged at step {step}: {report}")
            err.history = history
            raise err
        if step == 0:
            initial_loss = report.loss_total
        final_loss = report.loss_total
        entry = {"step": step, "loss_total": report.loss_total,
                 "loss_box": report.loss_box, "loss_obj": report.loss_obj,
                 "loss_cls": report.loss_cls}
        if sc.eval_every and (step + 1) % sc.eval_every == 0:
            entry["val_ap50"] = evaluate_toy(g, val_set, sc.decode_floor)
        history.append(entry)
    final_ap = evaluate_toy(g, val_set, sc.decode_floor)
    return TrainResult(g, anchors, history, final_ap, initial_loss, final_loss)
