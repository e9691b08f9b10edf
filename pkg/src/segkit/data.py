"""Tiling, label encoding, dataset splits and synthetic scenes.

Binary tasks follow the usual annotation convention: the object class is 0
and everything else is 1. The multi-label task uses urban=0, water=1,
land=2, tree=3 and other=4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, CoverageError, FormatError, LabelError
from .imageio import read_pnm, write_pnm
from .rng import RngStream

TASKS = ("buildings", "ships_optical", "ships_sar", "trees", "multilabel")

TASK_CLASSES = {
    "buildings": ("building", "background"),
    "ships_optical": ("ship", "water"),
    "ships_sar": ("ship", "sea"),
    "trees": ("tree", "field"),
    "multilabel": ("urban", "water", "land", "tree", "other"),
}
TASK_CHANNELS = {"buildings": 1, "ships_optical": 1, "ships_sar": 1, "trees": 1, "multilabel": 3}
DEFAULT_COUNTS = {
    "buildings": (3, 8),
    "ships_optical": (1, 4),
    "ships_sar": (1, 4),
    "trees": (2, 5),
    "multilabel": (4, 9),
}
# tile sizes of the original experiments
DEFAULT_SIZES = {"buildings": 512, "ships_optical": 512, "ships_sar": 512, "trees": 384, "multilabel": 512}

TRAIN = "train"
VALIDATION = "validation"


@dataclass
class Scene:
    """Image/mask pair. ``image`` is ``[H, W, C]`` uint8, ``mask`` ``[H, W]``."""

    image: np.ndarray
    mask: np.ndarray | None
    provenance: str = ""
    origin: tuple[int, int] = (0, 0)
    objects: list = field(default_factory=list)

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise ConfigError(
                f"image {list(self.image.shape)} and mask {list(self.mask.shape)} differ spatially"
            )


# ---------------------------------------------------------------------------
# tiling


def tile_origins(length: int, tile: int, stride: int) -> list[int]:
    """Window starts along one axis; the last window is snapped flush to the edge."""
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] + tile < length:
        starts.append(length - tile)
    return starts


def tile_raster(image, mask, tile: int, overlap: int = 0, provenance: str = "") -> list[Scene]:
    image = np.asarray(image)
    h, w = image.shape[:2]
    if mask is not None and np.shape(mask) != (h, w):
        raise ConfigError(f"mask shape {list(np.shape(mask))} != image spatial shape {[h, w]}")
    if tile < 1 or tile > min(h, w):
        raise ConfigError(f"tile {tile} does not fit in a {h}x{w} image")
    if not 0 <= overlap < tile:
        raise ConfigError(f"overlap must lie in [0, {tile}), got {overlap}")
    stride = tile - overlap
    out = []
    for r in tile_origins(h, tile, stride):
        for c in tile_origins(w, tile, stride):
            img = image[r : r + tile, c : c + tile].copy()
            msk = None if mask is None else np.asarray(mask)[r : r + tile, c : c + tile].copy()
            out.append(Scene(img, msk, provenance, (r, c)))
    return out


def stitch_tiles(tiles, full_shape, layer: str = "mask") -> np.ndarray:
    """Reassemble tiles; overlaps resolve to the last writer in (row, col) order.

    ``tiles`` holds :class:`Scene` objects (``layer`` picks ``mask`` or
    ``image``) or ``((row, col), array)`` pairs.
    """
    items = []
    for t in tiles:
        if isinstance(t, Scene):
            items.append((tuple(t.origin), t.mask if layer == "mask" else t.image))
        else:
            origin, arr = t
            items.append((tuple(origin), np.asarray(arr)))
    if not items:
        raise CoverageError("no tiles to stitch")
    items.sort(key=lambda it: it[0])
    h, w = full_shape[:2]
    first = items[0][1]
    out = np.zeros((h, w) + first.shape[2:], dtype=first.dtype)
    covered = np.zeros((h, w), dtype=bool)
    for (r, c), arr in items:
        th, tw = arr.shape[:2]
        if r < 0 or c < 0 or r + th > h or c + tw > w:
            raise CoverageError(f"tile at {(r, c)} of size {th}x{tw} exceeds {h}x{w}")
        out[r : r + th, c : c + tw] = arr
        covered[r : r + th, c : c + tw] = True
    if not covered.all():
        rows = np.flatnonzero(~covered.all(axis=1))
        cols = np.flatnonzero(~covered.all(axis=0))
        bbox = (int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))
        raise CoverageError(f"uncovered pixels inside rows {bbox[0]}..{bbox[2]}, cols {bbox[1]}..{bbox[3]}", bbox)
    return out


# ---------------------------------------------------------------------------
# labels


@dataclass(frozen=True)
class LabelMap:
    """Raw mask value -> class id; the id of ``raw_values[k]`` is ``k``."""

    raw_values: tuple[int, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.raw_values)) != len(self.raw_values):
            raise ConfigError(f"label map raw values must be distinct: {self.raw_values}")
        if len(self.names) != len(self.raw_values):
            raise ConfigError("label map needs one name per raw value")

    @property
    def num_classes(self) -> int:
        return len(self.raw_values)


LABEL_MAPS = {
    "buildings": LabelMap((255, 0), TASK_CLASSES["buildings"]),
    "ships_optical": LabelMap((255, 0), TASK_CLASSES["ships_optical"]),
    "ships_sar": LabelMap((255, 0), TASK_CLASSES["ships_sar"]),
    "trees": LabelMap((255, 0), TASK_CLASSES["trees"]),
    "multilabel": LabelMap((200, 50, 150, 100, 0), TASK_CLASSES["multilabel"]),
}


def encode_labels(raw, label_map: LabelMap) -> np.ndarray:
    raw = np.asarray(raw)
    values = np.asarray(label_map.raw_values)
    order = np.argsort(values)
    sorted_vals = values[order]
    pos = np.clip(np.searchsorted(sorted_vals, raw), 0, len(values) - 1)
    hit = sorted_vals[pos] == raw
    if not hit.all():
        where = np.argwhere(~hit)[0]
        bad = raw[tuple(where)]
        raise LabelError(f"raw value {int(bad)} at pixel {tuple(int(i) for i in where)} is not in the label map")
    return order[pos].astype(np.uint8)


def decode_labels(ids, label_map: LabelMap) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and ids.max() >= label_map.num_classes:
        raise LabelError(f"class id {int(ids.max())} outside 0..{label_map.num_classes - 1}")
    return np.asarray(label_map.raw_values, dtype=np.uint8)[ids]


# ---------------------------------------------------------------------------
# splits


@dataclass
class SampleSet:
    scenes: list[Scene]
    splits: list[str]
    seed: int = 0

    def subset(self, split: str) -> list[Scene]:
        return [s for s, sp in zip(self.scenes, self.splits) if sp == split]

    @property
    def train(self) -> list[Scene]:
        return self.subset(TRAIN)

    @property
    def validation(self) -> list[Scene]:
        return self.subset(VALIDATION)


def split_dataset(scenes, ratio=Fraction(4, 5), seed: int = 0) -> SampleSet:
    """Seeded shuffle, then the first floor(ratio * n) scenes go to training."""
    scenes = list(scenes)
    n = len(scenes)
    if n < 2:
        raise ConfigError(f"need at least 2 scenes to split, got {n}")
    ratio = Fraction(ratio) if not isinstance(ratio, float) else Fraction(ratio).limit_denominator(1000)
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    n_train = math.floor(ratio * n)
    perm = RngStream(seed).permutation(n)
    splits = [VALIDATION] * n
    for i in perm[:n_train]:
        splits[int(i)] = TRAIN
    return SampleSet(scenes, splits, seed)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    task: str
    size: int = 512
    count: tuple[int, int] | None = None
    noise: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASKS)}")
        if self.size < 64:
            raise ConfigError(f"scene size must be >= 64, got {self.size}")
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad object count range {(lo, hi)}")

    @property
    def object_count(self) -> tuple[int, int]:
        return tuple(self.count) if self.count is not None else DEFAULT_COUNTS[self.task]


def _pixel_grid(size):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")  # yy, xx at pixel centres


def _smooth_texture(rng: RngStream, size: int, cell: int) -> np.ndarray:
    """Zero-mean, unit-ish bilinear-interpolated noise with feature size ``cell``."""
    n = size // cell + 2
    coarse = rng.normal((n, n))
    pts = (np.arange(size) + 0.5) / cell
    grid = np.arange(n)
    rows = np.stack([np.interp(pts, grid, coarse[:, j]) for j in range(n)], axis=1)
    return np.stack([np.interp(pts, grid, rows[i]) for i in range(size)], axis=0)


def _local_coords(yy, xx, cy, cx, angle):
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    return dx * ca + dy * sa, -dx * sa + dy * ca


def _place(rng, size, radius, placed, margin=1.0, tries=200):
    for _ in range(tries):
        cy, cx = rng.uniform(radius + 1, size - radius - 1, 2)
        if all(math.hypot(cy - py, cx - px) > radius + pr + margin for py, px, pr in placed):
            placed.append((cy, cx, radius))
            return cy, cx
    return None


def _count(rng, spec):
    lo, hi = spec.object_count
    return int(rng.integers(lo, hi + 1))


def _synth_buildings(spec, rng, yy, xx):
    s = spec.size
    sigma = 0.05 if spec.noise is None else spec.noise
    ground = 0.3 + 0.08 * _smooth_texture(rng, s, max(8, s // 8))
    img = ground.copy()
    fg = np.zeros((s, s), dtype=bool)
    objects, placed = [], []
    for _ in range(_count(rng, spec)):
        a, b = rng.uniform(0.04 * s, 0.10 * s, 2)
        angle = rng.uniform(0, math.pi)
        at = _place(rng, s, math.hypot(a, b), placed)
        if at is None:
            continue
        u, v = _local_coords(yy, xx, at[0], at[1], angle)
        inside = (np.abs(u) <= a) & (np.abs(v) <= b)
        img[inside] = rng.uniform(0.6, 0.9)
        fg |= inside
        objects.append({"shape": "rectangle", "center": at, "half_sides": (a, b), "angle": angle, "area": 4 * a * b})
    img = img + rng.normal((s, s), scale=sigma)
    return img[..., None], fg, objects


def _synth_ships_optical(spec, rng, yy, xx):
    s = spec.size
    sigma = 0.03 if spec.noise is None else spec.noise
    img = 0.15 + 0.06 * _smooth_texture(rng, s, max(8, s // 6))
    fg = np.zeros((s, s), dtype=bool)
    objects, placed = [], []
    for _ in range(_count(rng, spec)):
        a = rng.uniform(0.07 * s, 0.14 * s)
        b = a * rng.uniform(0.35, 0.55)
        angle = rng.uniform(0, math.pi)
        at = _place(rng, s, a, placed)
        if at is None:
            continue
        u, v = _local_coords(yy, xx, at[0], at[1], angle)
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1
        img[inside] = rng.uniform(0.65, 0.95)
        fg |= inside
        objects.append({"shape": "ellipse", "center": at, "axes": (a, b), "angle": angle, "area": math.pi * a * b})
    img = img + rng.normal((s, s), scale=sigma)
    return img[..., None], fg, objects


def _synth_ships_sar(spec, rng, yy, xx):
    s = spec.size
    refl = 0.06 * (1 + 0.3 * _smooth_texture(rng, s, max(8, s // 4)))
    fg = np.zeros((s, s), dtype=bool)
    objects, placed = [], []
    for _ in range(_count(rng, spec)):
        a = rng.uniform(0.06 * s, 0.12 * s)
        b = a * rng.uniform(0.2, 0.35)
        angle = rng.uniform(0, math.pi)
        at = _place(rng, s, a, placed)
        if at is None:
            continue
        u, v = _local_coords(yy, xx, at[0], at[1], angle)
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1
        refl[inside] = rng.uniform(0.7, 1.0)
        fg |= inside
        objects.append({"shape": "ellipse", "center": at, "axes": (a, b), "angle": angle, "area": math.pi * a * b})
    # single-look intensity speckle: unit-mean exponential, multiplicative
    img = refl * rng.exponential((s, s))
    return img[..., None], fg, objects


def _synth_trees(spec, rng, yy, xx):
    s = spec.size
    sigma = 0.04 if spec.noise is None else spec.noise
    stripes = np.sin(2 * math.pi * xx / max(6.0, s / 16))
    img = 0.5 + 0.06 * _smooth_texture(rng, s, max(8, s // 8)) + 0.03 * stripes
    fg = np.zeros((s, s), dtype=bool)
    objects, placed = [], []
    for _ in range(_count(rng, spec)):
        r_max = 0.05 * s
        spread = 2.5 * r_max
        at = _place(rng, s, spread + r_max, placed)
        if at is None:
            continue
        for _ in range(int(rng.integers(3, 8))):
            r = rng.uniform(0.025 * s, r_max)
            cy = at[0] + rng.uniform(-spread, spread)
            cx = at[1] + rng.uniform(-spread, spread)
            disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            img[disk] = rng.uniform(0.15, 0.3)
            fg |= disk
            objects.append({"shape": "disk", "center": (cy, cx), "radius": r, "area": math.pi * r * r})
    img = img + rng.normal((s, s), scale=sigma)
    return img[..., None], fg, objects


ML_COLORS = np.array(
    [
        [0.62, 0.62, 0.62],  # urban
        [0.10, 0.18, 0.40],  # water
        [0.62, 0.50, 0.32],  # land
        [0.12, 0.40, 0.12],  # tree
        [0.92, 0.90, 0.80],  # other
    ]
)
ML_NOISE = np.array([0.08, 0.02, 0.04, 0.05, 0.03])
ML_BAND = 1.0  # half width of the class-4 boundary band, pixels


def _synth_multilabel(spec, rng, yy, xx):
    s = spec.size
    k = _count(rng, spec)
    labels = np.full((s, s), 4, dtype=np.uint8)
    objects = []
    if k:
        seeds = rng.uniform(0, s, (k, 2))
        classes = rng.integers(0, 4, k)
        d2 = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
        order = np.argsort(d2, axis=-1, kind="stable")
        nearest = order[..., 0]
        labels = classes[nearest].astype(np.uint8)
        if k > 1:
            second = order[..., 1]
            d_near = np.take_along_axis(d2, nearest[..., None], -1)[..., 0]
            d_second = np.take_along_axis(d2, second[..., None], -1)[..., 0]
            sep = np.linalg.norm(seeds[nearest] - seeds[second], axis=-1)
            # distance from the pixel to the bisector between its two nearest seeds
            to_edge = (d_second - d_near) / (2 * np.maximum(sep, 1e-9))
            band = (to_edge < ML_BAND) & (classes[nearest] != classes[second])
            labels[band] = 4
        objects = [{"seed": tuple(p), "class": int(c)} for p, c in zip(seeds, classes)]
    tex = _smooth_texture(rng, s, max(4, s // 16))
    img = ML_COLORS[labels] + (ML_NOISE[labels] * tex)[..., None]
    img = img + rng.normal((s, s, 3), scale=0.02 if spec.noise is None else spec.noise)
    return img, labels, objects


_SYNTH = {
    "buildings": _synth_buildings,
    "ships_optical": _synth_ships_optical,
    "ships_sar": _synth_ships_sar,
    "trees": _synth_trees,
    "multilabel": _synth_multilabel,
}


def synth_scene(spec: SceneSpec) -> Scene:
    """Deterministic synthetic image + ground-truth mask for ``spec.task``."""
    rng = RngStream(spec.seed)
    yy, xx = _pixel_grid(spec.size)
    img, fg, objects = _SYNTH[spec.task](spec, rng, yy, xx)
    if spec.task == "multilabel":
        mask = fg.astype(np.uint8)
    else:
        mask = np.where(fg, 0, 1).astype(np.uint8)
    image = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return Scene(image, mask, f"synth:{spec.task}:seed={spec.seed}", (0, 0), objects)


def synth_scenes(task: str, count: int, size: int, seed: int, object_count=None) -> list[Scene]:
    """``count`` scenes; scene ``i`` is seeded by ``(seed, i)``."""
    base = RngStream(seed)
    out = []
    for i in range(count):
        sub = int(base.derive(i).raw(1)[0])
        out.append(synth_scene(SceneSpec(task, size, object_count, None, sub)))
    return out


# ---------------------------------------------------------------------------
# dataset directory: images/<idx>.pgm|ppm, masks/<idx>.pgm, manifest.txt


def write_dataset(root, data: SampleSet) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (scene, split) in enumerate(zip(data.scenes, data.splits)):
        ext = "ppm" if scene.image.shape[2] == 3 else "pgm"
        write_pnm(root / "images" / f"{i:05d}.{ext}", scene.image)
        write_pnm(root / "masks" / f"{i:05d}.pgm", scene.mask)
        prov = scene.provenance.replace(" ", "_") or "-"
        lines.append(f"{i:05d} {split} {prov} {scene.origin[0]},{scene.origin[1]}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_dataset(root) -> SampleSet:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"no manifest.txt under {root}")
    scenes, splits = [], []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4 or parts[1] not in (TRAIN, VALIDATION):
            raise FormatError(f"manifest line {lineno} is malformed: {line!r}")
        idx, split, prov, origin = parts
        img_path = root / "images" / f"{idx}.pgm"
        if not img_path.exists():
            img_path = root / "images" / f"{idx}.ppm"
        image = read_pnm(img_path)
        mask = read_pnm(root / "masks" / f"{idx}.pgm")
        r, c = (int(v) for v in origin.split(","))
        scenes.append(Scene(image, mask, "" if prov == "-" else prov, (r, c)))
        splits.append(split)
    return SampleSet(scenes, splits)


def to_batch(scenes: list[Scene], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack scenes into a normalized ``[N, H, W, C]`` batch and ``[N, H, W]`` labels."""
    x = np.stack([s.image for s in scenes]).astype(dtype) / dtype(255)
    y = np.stack([s.mask for s in scenes]).astype(np.int64)
    return x, y
