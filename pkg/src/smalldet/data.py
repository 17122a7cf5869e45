"""Synthetic small-target scenes, VisDrone annotation I/O, raw images.

The synthetic generator is the desk-scale stand-in for a drone-imagery
dataset: class-coded colored shapes over textured noise, fully deterministic
per seed, with exact (tight pixel extent) bounding boxes. Labels are written
in the 8-field VisDrone annotation layout so the same parser serves real and
synthetic data. Images use a minimal uncompressed format (magic SDTI) to
avoid codec dependencies.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, ParseError
from .tensor import Tensor

CLASS_NAMES = [
    "pedestrian", "bicycle", "people", "car", "tricycle",
    "truck", "van", "bus", "motor", "awning-tricycle",
]

CLASS_COLORS = [
    (0.90, 0.10, 0.10), (0.10, 0.85, 0.10), (0.15, 0.25, 0.95),
    (0.95, 0.90, 0.10), (0.90, 0.15, 0.90), (0.10, 0.90, 0.90),
    (0.95, 0.55, 0.10), (0.55, 0.15, 0.90), (0.95, 0.95, 0.95),
    (0.02, 0.02, 0.02),
]

_SHAPES = ("square", "disk", "diamond", "triangle", "plus")


@dataclass
class GroundTruthBox:
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 pixels
    class_id: int
    occlusion: int = 0  # 0 none, 1 partial, 2 heavy
    truncation: int = 0

    @property
    def area(self) -> float:
        return max(0.0, self.box[2] - self.box[0]) * max(0.0, self.box[3] - self.box[1])


@dataclass
class SceneSpec:
    image_size: int = 128
    count_range: tuple[int, int] = (6, 10)
    size_range: tuple[float, float] = (6.0, 20.0)
    class_weights: tuple[float, ...] = tuple([0.1] * 10)
    noise_level: float = 0.03
    occlusion_prob: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.size_range[0] < 4.0:
            raise ValueError("minimum target size is 4 px")
        if self.size_range[1] < self.size_range[0]:
            raise ValueError("empty target size range")
        if self.count_range[1] < self.count_range[0] or self.count_range[0] < 0:
            raise ValueError("empty target count range")
        if len(self.class_weights) != 10 or sum(self.class_weights) <= 0:
            raise ValueError("class_weights must be 10 non-negative weights")


@dataclass
class SyntheticScene:
    image: Tensor                     # (3, H, W), values in [0, 1]
    boxes: list[GroundTruthBox]
    shortfall: bool                   # placement gave up before reaching count
    masks: list[np.ndarray] = field(default_factory=list)


def _raster_mask(shape: str, x1: float, y1: float, w: float, h: float,
                 size: int) -> np.ndarray:
    xi1, yi1 = int(np.floor(x1)), int(np.floor(y1))
    xi2, yi2 = int(np.ceil(x1 + w)), int(np.ceil(y1 + h))
    xi1, yi1 = max(xi1, 0), max(yi1, 0)
    xi2, yi2 = min(xi2, size), min(yi2, size)
    ys, xs = np.mgrid[yi1:yi2, xi1:xi2]
    xs = xs + 0.5
    ys = ys + 0.5
    cx, cy = x1 + w / 2, y1 + h / 2
    rx, ry = w / 2, h / 2
    if shape == "square":
        local = (np.abs(xs - cx) <= rx) & (np.abs(ys - cy) <= ry)
    elif shape == "disk":
        local = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    elif shape == "diamond":
        local = np.abs(xs - cx) / rx + np.abs(ys - cy) / ry <= 1.0
    elif shape == "triangle":
        local = (ys >= y1) & (ys <= y1 + h) & \
            (np.abs(xs - cx) <= rx * (ys - y1) / h)
    elif shape == "plus":
        local = ((np.abs(xs - cx) <= max(rx / 3, 0.75)) |
                 (np.abs(ys - cy) <= max(ry / 3, 0.75))) & \
            (np.abs(xs - cx) <= rx) & (np.abs(ys - cy) <= ry)
    else:  # pragma: no cover
        raise ValueError(shape)
    mask = np.zeros((size, size), dtype=bool)
    mask[yi1:yi2, xi1:xi2] = local
    return mask


def _tight_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    y1 = int(rows.argmax())
    y2 = len(rows) - int(rows[::-1].argmax())
    x1 = int(cols.argmax())
    x2 = len(cols) - int(cols[::-1].argmax())
    return (float(x1), float(y1), float(x2), float(y2))


def gen_synthetic_scene(spec: SceneSpec, return_masks: bool = False) -> SyntheticScene:
    """Render one scene deterministically from spec.seed.

    Targets are filled class-coded shapes; each emitted box is the tight pixel
    extent of the target at draw time (later targets may overdraw earlier
    ones, which sets the occlusion flag but keeps the full-extent box).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size

    base = rng.uniform(0.25, 0.55, size=3)
    coarse = rng.normal(0.0, 1.0, size=(3, size // 8 + 1, size // 8 + 1))
    coarse = np.kron(coarse, np.ones((1, 8, 8)))[:, :size, :size]
    img = base[:, None, None] + 0.05 * coarse
    img += rng.normal(0.0, spec.noise_level, size=(3, size, size))
    img = np.clip(img, 0.0, 1.0)

    weights = np.asarray(spec.class_weights, dtype=float)
    weights = weights / weights.sum()
    want = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))

    boxes: list[GroundTruthBox] = []
    masks: list[np.ndarray] = []
    rects: list[tuple[float, float, float, float]] = []
    shortfall = False
    for _ in range(want):
        cid = int(rng.choice(10, p=weights))
        w = float(rng.uniform(*spec.size_range))
        h = float(rng.uniform(*spec.size_range))
        placed = None
        if rects and rng.random() < spec.occlusion_prob:
            ax1, ay1, ax2, ay2 = rects[int(rng.integers(len(rects)))]
            cx = (ax1 + ax2) / 2 + rng.uniform(-w / 2, w / 2)
            cy = (ay1 + ay2) / 2 + rng.uniform(-h / 2, h / 2)
            x1 = float(np.clip(cx - w / 2, 0, size - w))
            y1 = float(np.clip(cy - h / 2, 0, size - h))
            placed = (x1, y1)
        else:
            from .metrics import iou as _iou
            for _try in range(40):
                x1 = float(rng.uniform(0, size - w))
                y1 = float(rng.uniform(0, size - h))
                cand = (x1, y1, x1 + w, y1 + h)
                if all(_iou(cand, r) < 0.05 for r in rects):
                    placed = (x1, y1)
                    break
        if placed is None:
            shortfall = True
            continue
        x1, y1 = placed
        shape = _SHAPES[cid % len(_SHAPES)]
        mask = _raster_mask(shape, x1, y1, w, h, size)
        if not mask.any():
            mask = _raster_mask("square", x1, y1, w, h, size)
        color = np.clip(np.asarray(CLASS_COLORS[cid])
                        + rng.normal(0.0, 0.02, size=3), 0.0, 1.0)
        jitter = rng.normal(0.0, 0.02, size=(3, int(mask.sum())))
        img[:, mask] = np.clip(color[:, None] + jitter, 0.0, 1.0)
        boxes.append(GroundTruthBox(box=_tight_box(mask), class_id=cid))
        masks.append(mask)
        rects.append((x1, y1, x1 + w, y1 + h))

    # occlusion flags from visible fraction after overdraw
    for i, m in enumerate(masks):
        later = np.zeros_like(m)
        for m2 in masks[i + 1:]:
            later |= m2
        vis = 1.0 - (m & later).sum() / max(m.sum(), 1)
        boxes[i].occlusion = 0 if vis >= 0.99 else (1 if vis >= 0.5 else 2)

    return SyntheticScene(image=Tensor(img), boxes=boxes, shortfall=shortfall,
                          masks=masks if return_masks else [])


# ---------------------------------------------------------------------------
# VisDrone annotation format

def parse_visdrone_annotation(line: str) -> GroundTruthBox | None:
    """Parse one 8-field annotation line; None for skip categories (0, 11)."""
    parts = [p.strip() for p in line.strip().split(",")]
    while parts and parts[-1] == "":
        parts.pop()
    if len(parts) != 8:
        raise ParseError(f"expected 8 comma-separated fields, got {len(parts)}")
    try:
        left, top, w, h, _score, cat, trunc, occ = (int(p) for p in parts)
    except ValueError:
        raise ParseError(f"non-integer field in {line.strip()!r}")
    if cat in (0, 11):
        return None
    if not 1 <= cat <= 10:
        raise ParseError(f"unknown category {cat}")
    return GroundTruthBox(
        box=(float(left), float(top), float(left + w), float(top + h)),
        class_id=cat - 1, occlusion=occ, truncation=trunc)


def serialize_ground_truth(gt: GroundTruthBox) -> str:
    x1, y1, x2, y2 = gt.box
    return (f"{int(round(x1))},{int(round(y1))},{int(round(x2 - x1))},"
            f"{int(round(y2 - y1))},1,{gt.class_id + 1},{gt.truncation},{gt.occlusion}")


def parse_annotation_file(path: str | Path) -> list[GroundTruthBox]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            gt = parse_visdrone_annotation(line)
        except ParseError as e:
            raise ParseError(f"{path}:{lineno}: {e}")
        if gt is not None:
            out.append(gt)
    return out


def save_annotation_file(path: str | Path, gts: list[GroundTruthBox]) -> None:
    Path(path).write_text("".join(serialize_ground_truth(g) + "\n" for g in gts))


# ---------------------------------------------------------------------------
# raw image format: magic SDTI, u32 width, u32 height, RGB bytes row-major

_IMG_MAGIC = b"SDTI"


def save_image(path: str | Path, image) -> None:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {arr.shape}")
    h, w = arr.shape[1], arr.shape[2]
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_IMG_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(u8.transpose(1, 2, 0).tobytes())  # row-major RGB


def load_image(path: str | Path) -> Tensor:
    blob = Path(path).read_bytes()
    if blob[:4] != _IMG_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {_IMG_MAGIC!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    w, h = struct.unpack_from("<II", blob, 4)
    need = 12 + w * h * 3
    if len(blob) < need:
        raise FormatError(f"{path}: truncated pixel data ({len(blob)} < {need})")
    px = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=12)
    arr = px.reshape(h, w, 3).transpose(2, 0, 1).astype(T.get_default_dtype())
    return Tensor(arr / 255.0)


# ---------------------------------------------------------------------------
# letterboxing

@dataclass(frozen=True)
class Affine:
    scale: float
    pad_x: float
    pad_y: float

    def apply_box(self, box):
        x1, y1, x2, y2 = box
        return (x1 * self.scale + self.pad_x, y1 * self.scale + self.pad_y,
                x2 * self.scale + self.pad_x, y2 * self.scale + self.pad_y)

    def invert_box(self, box):
        x1, y1, x2, y2 = box
        return ((x1 - self.pad_x) / self.scale, (y1 - self.pad_y) / self.scale,
                (x2 - self.pad_x) / self.scale, (y2 - self.pad_y) / self.scale)


def letterbox(image, target_size: int) -> tuple[Tensor, Affine]:
    """Aspect-preserving nearest resize plus symmetric 0.5-gray padding."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    _, h, w = arr.shape
    scale = target_size / max(h, w)
    nh, nw = round(h * scale), round(w * scale)
    if (nh, nw) != (h, w):
        ys = np.minimum(((np.arange(nh) + 0.5) / scale).astype(int), h - 1)
        xs = np.minimum(((np.arange(nw) + 0.5) / scale).astype(int), w - 1)
        arr = arr[:, ys][:, :, xs]
    py = (target_size - nh) // 2
    px = (target_size - nw) // 2
    out = np.full((3, target_size, target_size), 0.5, dtype=arr.dtype)
    out[:, py:py + nh, px:px + nw] = arr
    return Tensor(out), Affine(scale=scale, pad_x=float(px), pad_y=float(py))


# ---------------------------------------------------------------------------
# dataset manifests and split scanning

@dataclass
class ManifestEntry:
    image_path: Path
    label_path: Path
    seed: int


def write_manifest(path: str | Path, rows: list[tuple[str, str, int]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image", "label", "seed"])
        wr.writerows(rows)


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    p = Path(path)
    root = p.parent
    out = []
    with open(p, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != ["image", "label", "seed"]:
            raise ParseError(f"{p}: bad manifest header {header}")
        for row in rd:
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{p}: bad manifest row {row}")
            out.append(ManifestEntry(root / row[0], root / row[1], int(row[2])))
    return out


def load_entry(entry: ManifestEntry) -> tuple[Tensor, list[GroundTruthBox]]:
    return load_image(entry.image_path), parse_annotation_file(entry.label_path)


def generate_dataset(out_dir: str | Path, count: int, spec: SceneSpec,
                     base_seed: int | None = None) -> tuple[Path, bool]:
    """Write `count` scenes + labels + manifest under out_dir.

    Per-image seeds are base_seed + index. Returns (manifest path, whether
    any scene fell short of its requested target count).
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    rows = []
    any_shortfall = False
    start = spec.seed if base_seed is None else base_seed
    for i in range(count):
        s = SceneSpec(**{**vars(spec), "seed": start + i})
        scene = gen_synthetic_scene(s)
        any_shortfall |= scene.shortfall
        img_rel = f"images/{i:05d}.sdti"
        lbl_rel = f"annotations/{i:05d}.txt"
        save_image(out / img_rel, scene.image)
        save_annotation_file(out / lbl_rel, scene.boxes)
        rows.append((img_rel, lbl_rel, start + i))
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest, any_shortfall


def scan_visdrone_root(root: str | Path) -> dict[str, list[tuple[Path, Path]]]:
    """Pair images with annotation files under the standard split layout
    (<root>/<split>/images + <root>/<split>/annotations); reports whatever
    splits exist so published split sizes can be verified."""
    root = Path(root)
    splits: dict[str, list[tuple[Path, Path]]] = {}
    for sub in sorted(root.iterdir()) if root.is_dir() else []:
        img_dir, ann_dir = sub / "images", sub / "annotations"
        if not (img_dir.is_dir() and ann_dir.is_dir()):
            continue
        pairs = []
        for img in sorted(img_dir.iterdir()):
            ann = ann_dir / (img.stem + ".txt")
            if ann.exists():
                pairs.append((img, ann))
        splits[sub.name] = pairs
    return splits
