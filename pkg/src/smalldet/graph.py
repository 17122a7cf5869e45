"""Config-driven model assembly, static shape inference, checkpoints.

Model configuration files are plain text: header `key=value` lines (name,
num_classes, input_size, head_strides) followed by one layer per line,

    index: [from, ...] kind(arg=value, ...)

where `from` entries are earlier layer indices (-1 = previous layer).
Checkpoints are a versioned binary container (magic SDTN) holding every
parameter and batch-norm buffer in declared order plus optional trainer
state, all little-endian IEEE-754, keyed by a digest of the canonical
config so a checkpoint cannot silently load into a different graph.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blocks as B
from . import tensor as T
from .errors import ConfigError, FormatError, ParseError, ShapeError
from .tensor import Tensor

# ---------------------------------------------------------------------------
# configuration

_LAYER_RE = re.compile(
    r"^(\d+)\s*:\s*\[([-\d,\s]+)\]\s*([a-z_0-9]+)\s*\(([^)]*)\)\s*$")

_KIND_ARGS = {
    "conv": {"out", "k", "s", "p"},
    "spd_conv": {"out"},
    "c2f": {"out", "n", "shortcut"},
    "sppf": {"out", "hidden"},
    "sppfcspc": {"out", "hidden"},
    "upsample": set(),
    "concat": set(),
    "detect": set(),
}


@dataclass
class LayerSpec:
    index: int
    frm: list[int]
    kind: str
    args: dict = field(default_factory=dict)

    def resolved_from(self) -> list[int]:
        return [self.index - 1 if f == -1 else f for f in self.frm]


@dataclass
class ModelConfig:
    name: str
    num_classes: int
    input_size: int
    head_strides: list[int]
    layers: list[LayerSpec]

    def detect_layer(self) -> LayerSpec:
        dets = [l for l in self.layers if l.kind == "detect"]
        if len(dets) != 1:
            raise ConfigError(
                f"config {self.name!r}: expected exactly one detect layer, "
                f"found {len(dets)}")
        return dets[0]


def parse_config_text(text: str, source: str = "<config>") -> ModelConfig:
    header: dict[str, str] = {}
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LAYER_RE.match(line)
        if m:
            idx = int(m.group(1))
            frm = [int(s) for s in m.group(2).split(",") if s.strip()]
            kind = m.group(3)
            args: dict = {}
            body = m.group(4).strip()
            if body:
                for part in body.split(","):
                    if "=" not in part:
                        raise ParseError(
                            f"{source}:{lineno}: bad argument {part.strip()!r}")
                    k, v = (s.strip() for s in part.split("=", 1))
                    try:
                        args[k] = int(v)
                    except ValueError:
                        raise ParseError(
                            f"{source}:{lineno}: non-integer value for {k!r}")
            if kind not in _KIND_ARGS:
                raise ParseError(f"{source}:{lineno}: unknown layer kind {kind!r}")
            extra = set(args) - _KIND_ARGS[kind]
            if extra:
                raise ParseError(
                    f"{source}:{lineno}: {kind} does not accept {sorted(extra)}")
            layers.append(LayerSpec(idx, frm, kind, args))
        elif "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            header[k] = v
        else:
            raise ParseError(f"{source}:{lineno}: cannot parse {line!r}")

    for key in ("name", "num_classes", "input_size", "head_strides"):
        if key not in header:
            raise ParseError(f"{source}: missing header key {key!r}")
    try:
        cfg = ModelConfig(
            name=header["name"],
            num_classes=int(header["num_classes"]),
            input_size=int(header["input_size"]),
            head_strides=[int(s) for s in header["head_strides"].split(",")],
            layers=layers,
        )
    except ValueError as e:
        raise ParseError(f"{source}: bad header value ({e})")
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> ModelConfig:
    p = Path(path)
    return parse_config_text(p.read_text(), source=str(p))


def validate_config(cfg: ModelConfig) -> None:
    if cfg.num_classes < 1:
        raise ConfigError(f"config {cfg.name!r}: num_classes must be >= 1")
    if any(b <= a for a, b in zip(cfg.head_strides, cfg.head_strides[1:])):
        raise ConfigError(
            f"config {cfg.name!r}: head strides must be strictly increasing, "
            f"got {cfg.head_strides}")
    if cfg.input_size % max(cfg.head_strides):
        raise ConfigError(
            f"config {cfg.name!r}: input_size {cfg.input_size} not divisible "
            f"by largest stride {max(cfg.head_strides)}")
    for pos, spec in enumerate(cfg.layers):
        if spec.index != pos:
            raise ConfigError(
                f"config {cfg.name!r}: layer indices must be contiguous from 0, "
                f"found {spec.index} at position {pos}")
        if not spec.frm:
            raise ConfigError(f"layer {spec.index}: empty from-list")
        for f in spec.resolved_from():
            if spec.index == 0:
                if spec.frm != [-1]:
                    raise ConfigError("layer 0 must read the network input ([-1])")
            elif f < 0 or f >= spec.index:
                raise ConfigError(
                    f"layer {spec.index}: dangling reference to layer {f}")
    cfg.detect_layer()


_CANON_KEY_ORDER = ("out", "hidden", "k", "s", "p", "n", "shortcut")


def canonical_text(cfg: ModelConfig) -> str:
    lines = [
        f"name={cfg.name}",
        f"num_classes={cfg.num_classes}",
        f"input_size={cfg.input_size}",
        "head_strides=" + ",".join(str(s) for s in cfg.head_strides),
    ]
    for l in cfg.layers:
        args = ",".join(f"{k}={l.args[k]}" for k in _CANON_KEY_ORDER if k in l.args)
        frm = ",".join(str(f) for f in l.frm)
        lines.append(f"{l.index}:[{frm}] {l.kind}({args})")
    return "\n".join(lines) + "\n"


def config_digest(cfg: ModelConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()


# ---------------------------------------------------------------------------
# static shape inference

@dataclass
class LayerShape:
    index: int
    kind: str
    frm: list[int]
    out: tuple | list  # (n,c,h,w), or a list of them for the detect layer
    params: int


def _cb_params(cin: int, cout: int, k: int) -> int:
    return cout * cin * k * k + 2 * cout


def _layer_params(kind: str, args: dict, cins: list[int], num_classes: int) -> int:
    cin = cins[0]
    if kind == "conv":
        return _cb_params(cin, args["out"], args.get("k", 1))
    if kind == "spd_conv":
        return _cb_params(4 * cin, args["out"], 3)
    if kind == "c2f":
        h = args["out"] // 2
        n = args.get("n", 1)
        per_bn = 2 * _cb_params(h, h, 3)
        return (_cb_params(cin, 2 * h, 1) + n * per_bn
                + _cb_params((2 + n) * h, args["out"], 1))
    if kind == "sppf":
        h = args["hidden"]
        return _cb_params(cin, h, 1) + _cb_params(4 * h, args["out"], 1)
    if kind == "sppfcspc":
        h = args["hidden"]
        return (_cb_params(cin, h, 1) + _cb_params(h, h, 3) + _cb_params(h, h, 1)
                + _cb_params(4 * h, h, 1) + _cb_params(h, h, 3)
                + _cb_params(cin, h, 1) + _cb_params(2 * h, args["out"], 1))
    if kind == "detect":
        total = 0
        for c in cins:
            stems = 2 * (2 * _cb_params(c, c, 3))
            total += stems + (c * 4 + 4) + (c * num_classes + num_classes)
        return total
    return 0


def shape_infer(cfg: ModelConfig, input_size: int | None = None,
                batch: int = 1) -> list[LayerShape]:
    """Propagate symbolic shapes through every layer without allocating.

    Raises the same errors build_model would for wiring/channel/stride
    violations, each naming the offending layer.
    """
    size = cfg.input_size if input_size is None else input_size
    if size % max(cfg.head_strides):
        raise ConfigError(
            f"input size {size} not divisible by stride {max(cfg.head_strides)}")
    shapes: dict[int, tuple] = {-1: (batch, 3, size, size)}
    rows: list[LayerShape] = []
    for spec in cfg.layers:
        srcs = spec.resolved_from()
        try:
            ins = [shapes[f] for f in srcs]
        except KeyError as e:
            raise ConfigError(
                f"layer {spec.index}: reads output of layer {e.args[0]}, "
                f"which produces no feature map")
        kind, args = spec.kind, spec.args
        n, c, h, w = ins[0]
        cins = [s[1] for s in ins]
        if kind == "conv":
            k, s, p = args.get("k", 1), args.get("s", 1), args.get("p", args.get("k", 1) // 2)
            oh, ow = T.conv_out_hw(h, w, k, s, p)
            if oh <= 0 or ow <= 0:
                raise ShapeError(
                    f"layer {spec.index}: conv output {oh}x{ow} non-positive")
            out = (n, args["out"], oh, ow)
        elif kind == "spd_conv":
            if h % 2 or w % 2:
                raise ShapeError(
                    f"layer {spec.index}: space_to_depth needs even dims, got {h}x{w}")
            out = (n, args["out"], h // 2, w // 2)
        elif kind in ("c2f", "sppf", "sppfcspc"):
            if kind == "c2f" and args["out"] % 2:
                raise ConfigError(
                    f"layer {spec.index}: c2f out channels must be even")
            out = (n, args["out"], h, w)
        elif kind == "upsample":
            out = (n, c, 2 * h, 2 * w)
        elif kind == "concat":
            for i, sh in enumerate(ins[1:], start=1):
                if sh[0] != n or sh[2:] != (h, w):
                    raise ShapeError(
                        f"layer {spec.index}: concat input {srcs[i]} has spatial "
                        f"{sh[2:]}, input {srcs[0]} has {(h, w)}")
            out = (n, sum(cins), h, w)
        elif kind == "detect":
            if len(srcs) != len(cfg.head_strides):
                raise ConfigError(
                    f"layer {spec.index}: detect reads {len(srcs)} features but "
                    f"{len(cfg.head_strides)} strides declared")
            outs = []
            for sh, stride, src in zip(ins, cfg.head_strides, srcs):
                if sh[2] * stride != size or sh[3] * stride != size:
                    raise ConfigError(
                        f"layer {spec.index}: feature from layer {src} has grid "
                        f"{sh[2]}x{sh[3]}, inconsistent with stride {stride} at "
                        f"input {size}")
                outs.append((n, 4 + cfg.num_classes, sh[2], sh[3]))
            out = outs
        else:  # pragma: no cover - kinds validated at parse
            raise ConfigError(f"layer {spec.index}: unknown kind {kind!r}")
        if kind != "detect":
            shapes[spec.index] = out
        rows.append(LayerShape(spec.index, kind, srcs, out,
                               _layer_params(kind, args, cins, cfg.num_classes)))
    return rows


def head_grids(cfg: ModelConfig, input_size: int | None = None) -> list[tuple[int, int]]:
    rows = shape_infer(cfg, input_size)
    det = rows[-1] if rows[-1].kind == "detect" else \
        next(r for r in rows if r.kind == "detect")
    return [(s[2], s[3]) for s in det.out]


# ---------------------------------------------------------------------------
# build + forward

class Model:
    def __init__(self, cfg: ModelConfig, seed: int):
        self.config = cfg
        self.seed = seed
        self.digest = config_digest(cfg)
        self.shape_table = shape_infer(cfg)  # validates all contracts
        rng = np.random.default_rng(seed)
        self.layers: list[tuple[LayerSpec, B.Block]] = []
        for spec in cfg.layers:
            if spec.index == 0:
                cins = [3]
            else:
                cins = [self.shape_table[f].out[1] for f in spec.resolved_from()]
            self.layers.append((spec, _build_block(spec, cins, cfg, rng)))
        det = cfg.detect_layer()
        self._det_index = det.index
        self._keep = set()
        for spec in cfg.layers:
            if spec.index > 0:
                self._keep.update(spec.resolved_from())

    def forward(self, x: Tensor, training: bool = False) -> B.HeadOutput:
        n, c, h, w = x.shape
        if c != 3:
            raise ShapeError(f"model input must have 3 channels, got {c}")
        stride = max(self.config.head_strides)
        if h % stride or w % stride or h != w:
            raise ShapeError(
                f"model input must be square and divisible by {stride}, got {h}x{w}")
        outs: dict[int, Tensor] = {-1: x}
        head = None
        for spec, block in self.layers:
            srcs = [-1] if spec.index == 0 else spec.resolved_from()
            ins = [outs[f] for f in srcs]
            if spec.kind in ("concat", "detect"):
                y = block.forward(ins, training)
            else:
                y = block.forward(ins[0], training)
            if spec.kind == "detect":
                head = y
                for m, s in zip(head.maps, head.strides):
                    if m.shape[2] * s != h:
                        raise ShapeError(
                            f"head grid {m.shape[2]} x stride {s} != input {h}")
            else:
                outs[spec.index] = y
        return head

    # -- parameter plumbing ------------------------------------------------
    def named_params(self):
        for spec, block in self.layers:
            yield from block.named_params(f"{spec.index}.")

    def named_buffers(self):
        for spec, block in self.layers:
            yield from block.named_buffers(f"{spec.index}.")

    def zero_grad(self) -> None:
        for _, t in self.named_params():
            t.zero_grad()

    def count_params(self) -> tuple[list[tuple[int, str, int]], int]:
        rows = [(spec.index, spec.kind, block.count_params())
                for spec, block in self.layers]
        return rows, sum(c for _, _, c in rows)

    def head_param_count(self) -> int:
        return dict((i, c) for i, _, c in self.count_params()[0])[self._det_index]

    def block_of(self, index: int) -> B.Block:
        return self.layers[index][1]


def _build_block(spec: LayerSpec, cins: list[int], cfg: ModelConfig,
                 rng: np.random.Generator) -> B.Block:
    kind, args = spec.kind, spec.args
    cin = cins[0]
    if kind == "conv":
        k = args.get("k", 1)
        return B.ConvBlock(cin, args["out"], k, args.get("s", 1),
                           args.get("p", k // 2), rng=rng)
    if kind == "spd_conv":
        return B.SPDConv(cin, args["out"], rng=rng, name=str(spec.index))
    if kind == "c2f":
        return B.C2f(cin, args["out"], args.get("n", 1),
                     bool(args.get("shortcut", 0)), rng=rng)
    if kind == "sppf":
        return B.SPPF(cin, args["out"], args["hidden"], rng=rng)
    if kind == "sppfcspc":
        return B.SPPFCSPC(cin, args["out"], args["hidden"], rng=rng)
    if kind == "upsample":
        return B.Upsample()
    if kind == "concat":
        return B.Concat()
    if kind == "detect":
        return B.Detect(cins, cfg.head_strides, cfg.num_classes, rng=rng)
    raise ConfigError(f"layer {spec.index}: unknown kind {kind!r}")


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"SDTN"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(model: Model, path: str | Path,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    entries: list[tuple[str, np.ndarray]] = []
    entries.extend((f"p:{n}", t.data) for n, t in model.named_params())
    entries.extend((f"b:{n}", a) for n, a in model.named_buffers())
    for n, a in (extra or {}).items():
        entries.append((f"x:{n}", np.asarray(a, dtype=np.float64)))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HH", _VERSION, 0))
        fh.write(bytes.fromhex(model.digest))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode()
            code = _DTYPE_CODES[np.dtype(arr.dtype)]
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", arr.ndim, code))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())


def read_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    """Return (config digest hex, name -> array) without needing a model."""
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    version, _ = struct.unpack_from("<HH", blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = blob[8:40].hex()
    (count,) = struct.unpack_from("<I", blob, 40)
    off = 44
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode()
            off += nlen
            ndim, code = struct.unpack_from("<BB", blob, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            dt = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape)) * dt.itemsize if ndim else dt.itemsize
            arr = np.frombuffer(blob, dtype=dt, count=max(int(np.prod(shape)), 1),
                                offset=off).reshape(shape)
            off += nbytes
            out[name] = arr.copy()
    except (struct.error, ValueError) as e:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({e})")
    return digest, out


def load_checkpoint(model: Model, path: str | Path,
                    check_digest: bool = True) -> dict[str, np.ndarray]:
    """Load parameters/buffers into the model in place; return extra state."""
    digest, arrays = read_checkpoint(path)
    if check_digest and digest != model.digest:
        raise ConfigError(
            f"{path}: checkpoint was trained with a different config "
            f"(digest {digest[:12]}.. != model {model.digest[:12]}..)")
    params = dict(model.named_params())
    buffers = dict(model.named_buffers())
    extra: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        tag, key = name.split(":", 1)
        if tag == "p":
            t = params.pop(key, None)
            if t is None:
                raise FormatError(f"{path}: unknown parameter {key!r}")
            if t.data.shape != arr.shape:
                raise FormatError(
                    f"{path}: parameter {key!r} shape {arr.shape} != {t.data.shape}")
            t.data = arr.astype(t.data.dtype)
        elif tag == "b":
            buf = buffers.pop(key, None)
            if buf is None:
                raise FormatError(f"{path}: unknown buffer {key!r}")
            buf[...] = arr
        else:
            extra[key] = arr
    if params:
        raise FormatError(
            f"{path}: checkpoint missing parameters, e.g. {next(iter(params))!r}")
    return extra
