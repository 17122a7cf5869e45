"""Target assignment, detection loss, SGD, and the training protocol.

Assignment is a fixed center-cell scheme: each ground truth goes to the
scale whose sqrt-area range contains it (ranges attach to stride rank, so a
three-head config always uses (0,16], (16,32], (32,inf) px), and the cell
under the box center becomes the single positive for that box. Loss is
binary cross-entropy over all cells/classes plus mean (1 - CIoU) over
positives. The optimizer is plain SGD with momentum and weight decay.
Training is deterministic for a given protocol seed: batch order is
reshuffled per epoch from (seed, epoch), and nothing else draws randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import HeadOutput
from .data import GroundTruthBox
from .errors import ConfigError, ContractError, NumericalError, ParseError
from .graph import Model, save_checkpoint
from .metrics import PostprocessSettings, evaluate, postprocess
from .tensor import Tensor

# sqrt-area ranges by stride rank (finest first), pixels
SCALE_RANGE_EDGES = (16.0, 32.0)

CSV_HEADER = "epoch,loss_total,loss_cls,loss_box,precision,recall,map50,map5095"


# ---------------------------------------------------------------------------
# target assignment

@dataclass
class AssignedTargets:
    strides: list[int]
    grids: list[tuple[int, int]]          # (gh, gw) per scale
    cells: list[np.ndarray]               # (npos, 3) int: batch, gy, gx
    classes: list[np.ndarray]             # (npos,) int
    boxes: list[np.ndarray]               # (npos, 4) float xyxy pixels
    batch: int = 1

    @property
    def num_positives(self) -> int:
        return sum(len(c) for c in self.classes)

    def mask(self, scale: int) -> np.ndarray:
        """Dense positive-cell mask (batch, gh, gw) for one scale."""
        gh, gw = self.grids[scale]
        m = np.zeros((self.batch, gh, gw), dtype=bool)
        c = self.cells[scale]
        m[c[:, 0], c[:, 1], c[:, 2]] = True
        return m


def assign_targets(gts: list[GroundTruthBox], strides: list[int],
                   input_size: int) -> AssignedTargets:
    """Assign one image's ground truths to scales and cells.

    A box lands on the scale whose rank range holds sqrt(area); within the
    scale the cell containing the box center is positive. When two boxes
    contend for one cell the smaller area wins (earlier one on exact ties);
    the displaced box is left unassigned.
    """
    grids = [(input_size // s, input_size // s) for s in strides]
    chosen: list[dict[tuple[int, int], int]] = [{} for _ in strides]
    for gi, g in enumerate(gts):
        x1, y1, x2, y2 = g.box
        sq = math.sqrt(max(0.0, (x2 - x1)) * max(0.0, (y2 - y1)))
        rank = int(np.searchsorted(SCALE_RANGE_EDGES, sq, side="left"))
        rank = min(rank, len(strides) - 1)
        s = strides[rank]
        gh, gw = grids[rank]
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        cell = (min(int(cy / s), gh - 1), min(int(cx / s), gw - 1))
        prev = chosen[rank].get(cell)
        if prev is None or gts[prev].area > g.area:
            chosen[rank][cell] = gi
    cells, classes, boxes = [], [], []
    for rank in range(len(strides)):
        items = sorted(chosen[rank].items())
        cells.append(np.array([[0, cy, cx] for (cy, cx), _ in items],
                              dtype=int).reshape(-1, 3))
        classes.append(np.array([gts[gi].class_id for _, gi in items], dtype=int))
        boxes.append(np.array([gts[gi].box for _, gi in items],
                              dtype=float).reshape(-1, 4))
    return AssignedTargets(strides=list(strides), grids=grids, cells=cells,
                           classes=classes, boxes=boxes, batch=1)


def merge_assignments(per_image: list[AssignedTargets]) -> AssignedTargets:
    """Stack single-image assignments into one batch assignment."""
    first = per_image[0]
    cells, classes, boxes = [], [], []
    for rank in range(len(first.strides)):
        cs, ks, bs = [], [], []
        for b, a in enumerate(per_image):
            c = a.cells[rank].copy()
            c[:, 0] = b
            cs.append(c)
            ks.append(a.classes[rank])
            bs.append(a.boxes[rank])
        cells.append(np.concatenate(cs, axis=0) if cs else
                     np.zeros((0, 3), dtype=int))
        classes.append(np.concatenate(ks, axis=0))
        boxes.append(np.concatenate(bs, axis=0))
    return AssignedTargets(strides=first.strides, grids=first.grids,
                           cells=cells, classes=classes, boxes=boxes,
                           batch=len(per_image))


# ---------------------------------------------------------------------------
# CIoU

_EPS = 1e-9


def ciou(pred: Tensor, target: np.ndarray) -> Tensor:
    """Complete IoU between predicted (npos, 4) boxes and constant targets.

    IoU minus normalized center distance minus aspect-consistency penalty;
    1 exactly iff boxes are identical with positive area, 0 for two degenerate
    coincident boxes, always > -1, fully differentiable in pred.
    """
    tgt = np.asarray(target, dtype=pred.data.dtype)
    px1, py1, px2, py2 = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    tx1 = Tensor(tgt[:, 0])
    ty1 = Tensor(tgt[:, 1])
    tx2 = Tensor(tgt[:, 2])
    ty2 = Tensor(tgt[:, 3])

    iw = T.maximum(T.sub(T.minimum(px2, tx2), T.maximum(px1, tx1)), 0.0)
    ih = T.maximum(T.sub(T.minimum(py2, ty2), T.maximum(py1, ty1)), 0.0)
    inter = T.mul(iw, ih)
    area_p = T.mul(T.sub(px2, px1), T.sub(py2, py1))
    area_t = T.mul(T.sub(tx2, tx1), T.sub(ty2, ty1))
    union = T.sub(T.add(area_p, area_t), inter)
    iou_v = T.div(inter, T.clamp_min(union, _EPS))

    cw = T.sub(T.maximum(px2, tx2), T.minimum(px1, tx1))
    chh = T.sub(T.maximum(py2, ty2), T.minimum(py1, ty1))
    c2 = T.add(T.square(cw), T.square(chh))
    dx = T.mul(T.sub(T.add(px1, px2), T.add(tx1, tx2)), 0.5)
    dy = T.mul(T.sub(T.add(py1, py2), T.add(ty1, ty2)), 0.5)
    rho2 = T.add(T.square(dx), T.square(dy))
    center_pen = T.div(rho2, T.clamp_min(c2, _EPS))

    pw = T.sub(px2, px1)
    ph = T.clamp_min(T.sub(py2, py1), _EPS)
    tw = T.sub(tx2, tx1)
    th = T.clamp_min(T.sub(ty2, ty1), _EPS)
    datan = T.sub(T.atan(T.div(tw, th)), T.atan(T.div(pw, ph)))
    v = T.mul(T.square(datan), 4.0 / math.pi ** 2)
    alpha = T.div(v, T.clamp_min(T.add(T.sub(Tensor(np.ones_like(tgt[:, 0])), iou_v), v), _EPS))
    return T.sub(T.sub(iou_v, center_pen), T.mul(alpha, v))


def ciou_value(a, b) -> float:
    """Scalar CIoU of two plain xyxy boxes."""
    p = Tensor(np.asarray([a], dtype=np.float64))
    return float(ciou(p, np.asarray([b], dtype=np.float64)).data[0])


# ---------------------------------------------------------------------------
# detection loss

def detection_loss(preds: HeadOutput, targets: AssignedTargets,
                   lambda_box: float = 2.0) -> tuple[Tensor, Tensor, Tensor]:
    """(total, cls, box): BCE over all cells/classes normalized by positive
    count (floor 1), plus mean (1 - CIoU) over positive cells scaled by
    lambda_box. Raises NumericalError when the result is not finite."""
    npos = targets.num_positives
    norm = max(npos, 1)
    nc = preds.num_classes

    cls_sum = None
    box_sum = None
    for rank, fmap in enumerate(preds.maps):
        n, ch, gh, gw = fmap.shape
        cls_map = fmap[:, 4:]
        onehot = np.zeros((n, nc, gh, gw), dtype=fmap.data.dtype)
        cells = targets.cells[rank]
        if len(cells):
            onehot[cells[:, 0], targets.classes[rank], cells[:, 1], cells[:, 2]] = 1.0
        term = T.bce_with_logits_sum(cls_map, onehot)
        cls_sum = term if cls_sum is None else T.add(cls_sum, term)

        if len(cells):
            stride = preds.strides[rank]
            sel = T.select_cells(fmap, cells[:, 0], cells[:, 1], cells[:, 2])
            ltrb = T.mul(T.softplus(sel[:, :4]), float(stride))
            cxp = (cells[:, 2] + 0.5) * stride
            cyp = (cells[:, 1] + 0.5) * stride
            centers = np.stack([cxp, cyp, cxp, cyp], axis=1)
            sign = np.broadcast_to(np.array([-1.0, -1.0, 1.0, 1.0]),
                                   centers.shape)
            pred_xyxy = T.add(Tensor(centers), T.mul(ltrb, Tensor(sign)))
            quality = ciou(pred_xyxy, targets.boxes[rank])
            miss = T.sub(Tensor(np.ones_like(quality.data)), quality)
            term = T.tsum(miss)
            box_sum = term if box_sum is None else T.add(box_sum, term)

    cls_loss = T.mul(cls_sum, 1.0 / norm)
    if box_sum is None:
        box_loss = Tensor(np.zeros(()))
    else:
        box_loss = T.mul(box_sum, 1.0 / norm)
    total = T.add(cls_loss, T.mul(box_loss, lambda_box))
    if not np.isfinite(total.data):
        raise NumericalError("detection loss is not finite; aborting step")
    return total, cls_loss, box_loss


# ---------------------------------------------------------------------------
# optimizer

class SGD:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    Gradients are zeroed after each step."""

    def __init__(self, model: Model, lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data)
                         for name, t in model.named_params()}

    def step(self) -> None:
        for name, t in self.model.named_params():
            if t.grad is None:
                raise ContractError(f"sgd_step: parameter {name} has no gradient")
            v = self.velocity[name]
            v *= self.momentum
            v += t.grad
            if self.weight_decay:
                v += self.weight_decay * t.data
            t.data = t.data - self.lr * v
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"vel.{n}": v for n, v in self.velocity.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.velocity:
            key = f"vel.{n}"
            if key in arrays:
                self.velocity[n] = arrays[key].astype(
                    self.velocity[n].dtype).reshape(self.velocity[n].shape)


# ---------------------------------------------------------------------------
# protocol + training state

@dataclass
class TrainProtocol:
    max_epochs: int = 300
    patience: int = 50
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    batch_size: int = 8
    seed: int = 0

    _INT_KEYS = ("max_epochs", "patience", "batch_size", "seed")


def parse_protocol_text(text: str, source: str = "<protocol>") -> TrainProtocol:
    proto = TrainProtocol()
    known = {f for f in vars(proto)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in known:
            raise ParseError(f"{source}:{lineno}: unknown protocol key {k!r}")
        try:
            setattr(proto, k, int(v) if k in TrainProtocol._INT_KEYS else float(v))
        except ValueError:
            raise ParseError(f"{source}:{lineno}: bad value for {k!r}")
    return proto


def load_protocol(path: str | Path) -> TrainProtocol:
    return parse_protocol_text(Path(path).read_text(), source=str(path))


@dataclass
class TrainState:
    epoch: int = 0
    best_map50: float = -1.0
    best_epoch: int = 0
    patience_counter: int = 0
    lr: float = 0.0
    momentum: float = 0.0
    seed: int = 0
    stopped_early: bool = False


@dataclass
class EpochRow:
    epoch: int
    loss_total: float
    loss_cls: float
    loss_box: float
    precision: float
    recall: float
    map50: float
    map5095: float

    def csv(self) -> str:
        return (f"{self.epoch},{self.loss_total:.6f},{self.loss_cls:.6f},"
                f"{self.loss_box:.6f},{self.precision:.6f},{self.recall:.6f},"
                f"{self.map50:.6f},{self.map5095:.6f}")


Sample = tuple[Tensor, list[GroundTruthBox]]


def _check_classes(ds: list[Sample], num_classes: int, name: str) -> None:
    for _, gts in ds:
        for g in gts:
            if not 0 <= g.class_id < num_classes:
                raise ConfigError(
                    f"{name}: ground-truth class {g.class_id} outside "
                    f"model range [0, {num_classes})")


def predict_dataset(model: Model, ds: list[Sample], batch_size: int,
                    settings: PostprocessSettings) -> list:
    dets = []
    for i in range(0, len(ds), batch_size):
        chunk = ds[i:i + batch_size]
        batch = Tensor(np.stack([s[0].data for s in chunk]))
        dets.extend(postprocess(model.forward(batch, training=False), settings))
    return dets


def evaluate_dataset(model: Model, ds: list[Sample], batch_size: int,
                     settings: PostprocessSettings):
    dets = predict_dataset(model, ds, batch_size, settings)
    return evaluate(dets, [gts for _, gts in ds], model.config.num_classes,
                    operating_conf=settings.operating_conf)


def fit(model: Model, train_set: list[Sample], val_set: list[Sample],
        protocol: TrainProtocol, out_dir: str | Path | None = None,
        settings: PostprocessSettings | None = None,
        val_metric_override=None,
        resume: str | Path | None = None) -> tuple[TrainState, list[EpochRow]]:
    """Train up to max_epochs with early stopping on val mAP@0.5.

    Writes metrics.csv, best.ckpt and last.ckpt under out_dir when given.
    val_metric_override(epoch) -> float replaces evaluation (protocol tests).
    Resuming from a last.ckpt continues epoch numbering and optimizer state.
    """
    if not train_set or not val_set:
        raise ConfigError("fit: train and validation sets must be non-empty")
    _check_classes(train_set, model.config.num_classes, "train set")
    _check_classes(val_set, model.config.num_classes, "val set")
    settings = settings or PostprocessSettings()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    opt = SGD(model, protocol.lr, protocol.momentum, protocol.weight_decay)
    state = TrainState(lr=protocol.lr, momentum=protocol.momentum,
                       seed=protocol.seed)
    rows: list[EpochRow] = []
    if resume is not None:
        from .graph import load_checkpoint
        extra = load_checkpoint(model, resume)
        opt.load_state_arrays(extra)
        state.epoch = int(extra.get("epoch", np.zeros(()))[()])
        state.best_map50 = float(extra.get("best_map50", -np.ones(()))[()])
        state.best_epoch = int(extra.get("best_epoch", np.zeros(()))[()])
        state.patience_counter = int(extra.get("patience_counter", np.zeros(()))[()])

    size = model.config.input_size
    strides = model.config.head_strides
    assignments = [assign_targets(gts, strides, size) for _, gts in train_set]
    n = len(train_set)

    while state.epoch < protocol.max_epochs:
        state.epoch += 1
        order = np.random.default_rng((protocol.seed, state.epoch)).permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, protocol.batch_size):
            idx = order[start:start + protocol.batch_size]
            batch = Tensor(np.stack([train_set[i][0].data for i in idx]))
            tgt = merge_assignments([assignments[i] for i in idx])
            preds = model.forward(batch, training=True)
            total, cls_l, box_l = detection_loss(preds, tgt)
            total.backward()
            opt.step()
            sums += np.array([total.item(), cls_l.item(), box_l.item()]) * len(idx)
        losses = sums / n

        if val_metric_override is not None:
            map50 = float(val_metric_override(state.epoch))
            row = EpochRow(state.epoch, *losses, 0.0, 0.0, map50, 0.0)
        else:
            rep = evaluate_dataset(model, val_set, protocol.batch_size, settings)
            row = EpochRow(state.epoch, *losses, rep.precision, rep.recall,
                           rep.map50, rep.map5095)
        rows.append(row)

        if row.map50 > state.best_map50:
            state.best_map50 = row.map50
            state.best_epoch = state.epoch
            state.patience_counter = 0
            if out is not None:
                save_checkpoint(model, out / "best.ckpt",
                                extra=_trainer_extra(state, opt))
        else:
            state.patience_counter += 1

        if out is not None:
            (out / "metrics.csv").write_text(
                CSV_HEADER + "\n" + "".join(r.csv() + "\n" for r in rows))
        if state.patience_counter >= protocol.patience:
            state.stopped_early = True
            break

    if out is not None:
        save_checkpoint(model, out / "last.ckpt",
                        extra=_trainer_extra(state, opt))
    return state, rows


def _trainer_extra(state: TrainState, opt: SGD) -> dict[str, np.ndarray]:
    extra = {
        "epoch": np.asarray(float(state.epoch)),
        "best_map50": np.asarray(state.best_map50),
        "best_epoch": np.asarray(float(state.best_epoch)),
        "patience_counter": np.asarray(float(state.patience_counter)),
    }
    extra.update(opt.state_arrays())
    return extra


# ---------------------------------------------------------------------------
# finite-difference gradient checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    per_layer: dict[str, tuple[float, str]]  # layer -> (max err, param name)
    num_sampled: int
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


def gradient_check(model: Model, num_samples: int = 200, step: float = 1e-5,
                   threshold: float = 1e-3, seed: int = 0,
                   fault_hook=None) -> GradCheckReport:
    """Compare backward() against finite differences on the full graph +
    detection loss, using a 5-point central stencil (O(step^4) truncation,
    needed because the composed loss is strongly curved). The relative error
    denominator is floored at 1e-4: components below that are compared on an
    absolute scale, since central differences on a loss of magnitude ~10
    cannot resolve smaller values past float64 roundoff. Requires float64
    mode for trustworthy results."""
    size = model.config.input_size
    rng = np.random.default_rng(seed)
    batch = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, size, size)))
    # one ground truth per scale range so every head sees a positive
    gts = [
        GroundTruthBox(box=_centered_box(size * 0.3, size * 0.3, 10.0), class_id=1),
        GroundTruthBox(box=_centered_box(size * 0.6, size * 0.55, 24.0), class_id=4),
        GroundTruthBox(box=_centered_box(size * 0.5, size * 0.5, min(40.0, size * 0.6)),
                       class_id=7),
    ]
    targets = merge_assignments(
        [assign_targets(gts, model.config.head_strides, size)])

    buffers = {n: b.copy() for n, b in model.named_buffers()}

    def loss_value() -> float:
        for name, buf in model.named_buffers():
            buf[...] = buffers[name]
        out = model.forward(batch, training=True)
        total, _, _ = detection_loss(out, targets)
        return total.item()

    model.zero_grad()
    out = model.forward(batch, training=True)
    total, _, _ = detection_loss(out, targets)
    total.backward()
    grads = {n: t.grad.copy() for n, t in model.named_params()}
    if fault_hook is not None:
        grads = fault_hook(grads)

    params = list(model.named_params())
    flat = [(n, t, i) for n, t in params for i in
            rng.choice(t.size, size=min(max(1, num_samples // len(params)), t.size),
                       replace=False)]
    if len(flat) < num_samples:
        extra_pool = [(n, t) for n, t in params for _ in range(3)]
        while len(flat) < num_samples:
            n, t = extra_pool[int(rng.integers(len(extra_pool)))]
            flat.append((n, t, int(rng.integers(t.size))))

    max_err, worst = 0.0, ""
    per_layer: dict[str, tuple[float, str]] = {}
    for name, t, fi in flat:
        ix = np.unravel_index(fi, t.shape)
        old = t.data[ix]
        vals = {}
        for mlt in (2, 1, -1, -2):
            t.data[ix] = old + mlt * step
            vals[mlt] = loss_value()
        t.data[ix] = old
        fd = (8.0 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12.0 * step)
        g = grads[name][ix]
        err = abs(fd - g) / max(abs(fd), abs(g), 1e-4)
        layer = name.split(".", 1)[0]
        if layer not in per_layer or err > per_layer[layer][0]:
            per_layer[layer] = (err, name)
        if err > max_err:
            max_err, worst = err, name
    for bname, buf in model.named_buffers():
        buf[...] = buffers[bname]
    model.zero_grad()
    return GradCheckReport(max_rel_err=max_err, worst_param=worst,
                           per_layer=per_layer, num_sampled=len(flat),
                           threshold=threshold)


def _centered_box(cx: float, cy: float, side: float):
    return (cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2)
