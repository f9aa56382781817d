"""Multimodal raster scenes: derived bands, stacking, tiling, splits, synthetic data, file formats."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

NDVI_EPS = 1e-6

RECIPES = {
    "vaihingen": ("R", "G", "IR", "nDSM", "NDVI"),
    "potsdam": ("R", "G", "B", "IR", "nDSM"),
}
OPTICAL = {"R", "G", "B", "IR"}

SYNTH_CLASSES = ("impervious", "building", "vegetation", "car")
ISPRS_CLASSES = ("impervious", "building", "low_vegetation", "tree", "car", "clutter")

# ISPRS label colours; reused for previews of any dataset with these class names
PALETTE = {
    "impervious": (255, 255, 255),
    "building": (0, 0, 255),
    "low_vegetation": (0, 255, 255),
    "vegetation": (0, 200, 0),
    "tree": (0, 255, 0),
    "car": (255, 255, 0),
    "clutter": (255, 0, 0),
    "background": (0, 0, 0),
    "flood": (0, 120, 255),
}
_FALLBACK = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
             (145, 30, 180), (70, 240, 240), (240, 50, 230)]

VAIHINGEN_SPLIT = {
    "train": [str(i) for i in (1, 3, 5, 7, 11, 13, 15, 17, 21, 23, 26, 28, 32, 34, 37)],
    "val": ["30"],
    "test": [str(i) for i in (2, 4, 6, 8, 10, 12, 14, 16, 20, 22, 24, 27, 29, 31, 33, 35, 38)],
}
POTSDAM_SPLIT = {
    "train": ["2_11", "2_12", "3_10", "3_11", "3_12", "4_10", "4_11", "4_12", "5_10", "5_11",
              "5_12", "6_7", "6_8", "6_9", "6_10", "6_11", "6_12", "7_7", "7_8", "7_9", "7_11", "7_12"],
    "val": ["2_10"],
    "test": ["2_13", "2_14", "3_13", "3_14", "4_13", "4_14", "4_15", "5_13", "5_14", "5_15",
             "6_13", "6_14", "6_15", "7_13"],
}


@dataclass
class MultimodalScene:
    scene_id: str
    bands: dict[str, np.ndarray]
    mask: np.ndarray | None = None
    num_classes: int = 0

    def __post_init__(self):
        shapes = {np.shape(b) for b in self.bands.values()}
        if len(shapes) != 1:
            raise ValueError(f"scene {self.scene_id}: bands differ in shape {shapes}")
        (shape,) = shapes
        if len(shape) != 2:
            raise ValueError(f"scene {self.scene_id}: bands must be 2D rasters")
        if self.mask is not None:
            if self.mask.shape != shape:
                raise ValueError(f"scene {self.scene_id}: mask shape {self.mask.shape} != {shape}")
            if self.num_classes and self.mask.size and self.mask.max() >= self.num_classes:
                raise ValueError(f"scene {self.scene_id}: mask labels outside [0, {self.num_classes})")

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.bands.values())).shape


@dataclass
class TileSample:
    features: np.ndarray          # [C, T, T]
    mask: np.ndarray | None       # [T, T]
    origin: tuple[str, int, int]  # (scene_id, row, col)
    padded: bool = False


@dataclass
class SplitSpec:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name in ("train", "val", "test"):
            for sid in getattr(self, name):
                if sid in seen:
                    raise ValueError(f"scene id {sid!r} listed in both {seen[sid]} and {name}")
                seen[sid] = name

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(*(list(map(str, d.get(k, []))) for k in ("train", "val", "test")))

    @classmethod
    def parse(cls, text: str) -> "SplitSpec":
        """``train: a, b`` style lines; blank lines and ``#`` comments ignored."""
        d: dict[str, list[str]] = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, rest = line.partition(":")
            d[key.strip()] = [s.strip() for s in rest.split(",") if s.strip()]
        return cls.from_dict(d)

    def dump(self) -> str:
        return "".join(f"{k}: {', '.join(getattr(self, k))}\n" for k in ("train", "val", "test"))


# -- derived channels ---------------------------------------------------------------

def derive_ndvi(ir: np.ndarray, r: np.ndarray) -> np.ndarray:
    """(IR - R) / (IR + R + eps); eps only matters for zero denominators."""
    ir = np.asarray(ir, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if ir.shape != r.shape:
        raise ValueError(f"IR {ir.shape} and R {r.shape} are not co-registered")
    return np.clip((ir - r) / (ir + r + NDVI_EPS), -1.0, 1.0)


def normalize_ndsm(dsm: np.ndarray) -> np.ndarray:
    """Per-scene min-max scaling to [0, 1]; a constant raster maps to zeros."""
    dsm = np.asarray(dsm, dtype=np.float64)
    lo, hi = dsm.min(), dsm.max()
    if hi - lo <= 0:
        return np.zeros_like(dsm)
    return (dsm - lo) / (hi - lo)


def _optical(band: np.ndarray) -> np.ndarray:
    band = np.asarray(band, dtype=np.float64)
    # 8-bit digital numbers are rescaled; reflectance-like inputs are kept
    if band.max(initial=0.0) > 1.0:
        band = band / 255.0
    return np.clip(band, 0.0, 1.0)


def stack_modalities(scene: MultimodalScene, recipe: str | Sequence[str] = "vaihingen") -> np.ndarray:
    """Stack five channels in recipe order as float32 ``[5, H, W]``.

    ``recipe`` is ``"vaihingen"`` (R, G, IR, nDSM, NDVI), ``"potsdam"``
    (R, G, B, IR, nDSM) or an explicit list of five band names; ``nDSM`` and
    ``NDVI`` are derived from ``DSM`` and ``IR``/``R`` unless present.
    """
    names = RECIPES[recipe.lower()] if isinstance(recipe, str) else tuple(recipe)
    if len(names) != 5:
        raise ValueError(f"a recipe needs exactly 5 bands, got {len(names)}")
    out = []
    for name in names:
        if name in scene.bands and name not in OPTICAL:
            out.append(np.asarray(scene.bands[name], dtype=np.float64))
        elif name in OPTICAL and name in scene.bands:
            out.append(_optical(scene.bands[name]))
        elif name == "nDSM" and "DSM" in scene.bands:
            out.append(normalize_ndsm(scene.bands["DSM"]))
        elif name == "NDVI" and {"IR", "R"} <= set(scene.bands):
            out.append(derive_ndvi(_optical(scene.bands["IR"]), _optical(scene.bands["R"])))
        else:
            raise KeyError(f"scene {scene.scene_id}: band {name!r} missing and not derivable")
    return np.stack(out).astype(np.float32)


# -- tiling / splits ------------------------------------------------------------------

def _grid(n: int, tile: int, stride: int) -> list[int]:
    count = math.ceil(max(n - tile, 0) / stride) + 1
    return [i * stride for i in range(count)]


def tile_array(stacked: np.ndarray, mask: np.ndarray | None, tile_size: int, stride: int | None = None,
               scene_id: str = "") -> list[TileSample]:
    stride = stride or tile_size
    _, h, w = stacked.shape
    if tile_size > h or tile_size > w:
        raise ValueError(f"tile {tile_size} larger than scene {h}x{w}")
    if stride <= 0:
        raise ValueError("stride must be positive")
    rows, cols = _grid(h, tile_size, stride), _grid(w, tile_size, stride)
    need_h, need_w = rows[-1] + tile_size, cols[-1] + tile_size
    pad_h, pad_w = need_h - h, need_w - w
    if pad_h or pad_w:
        stacked = np.pad(stacked, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
        if mask is not None:
            mask = np.pad(mask, ((0, pad_h), (0, pad_w)), mode="reflect")
    tiles = []
    for r in rows:
        for c in cols:
            tiles.append(TileSample(
                features=np.ascontiguousarray(stacked[:, r:r + tile_size, c:c + tile_size]),
                mask=None if mask is None else np.ascontiguousarray(mask[r:r + tile_size, c:c + tile_size]),
                origin=(scene_id, r, c),
                padded=r + tile_size > h or c + tile_size > w,
            ))
    return tiles


def tile_scene(scene: MultimodalScene, tile_size: int, stride: int | None = None,
               recipe: str | Sequence[str] = "vaihingen") -> list[TileSample]:
    """Row-major tiles; edge tiles reaching past the scene are reflection-padded and flagged."""
    return tile_array(stack_modalities(scene, recipe), scene.mask, tile_size, stride, scene.scene_id)


def split_by_ids(scenes: Sequence[MultimodalScene], split: SplitSpec):
    """Partition scenes into (train, val, test) lists following ``split``."""
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise ValueError("scene ids are not unique")
    by_id = {s.scene_id: s for s in scenes}
    out = []
    for name in ("train", "val", "test"):
        wanted = getattr(split, name)
        missing = [sid for sid in wanted if sid not in by_id]
        if missing:
            log.warning("%s split lists unknown scene ids: %s", name, ", ".join(missing))
        out.append([by_id[sid] for sid in wanted if sid in by_id])
    listed = set(split.train) | set(split.val) | set(split.test)
    unassigned = [sid for sid in ids if sid not in listed]
    if unassigned:
        log.warning("scenes not assigned to any split: %s", ", ".join(unassigned))
    return tuple(out)


# -- synthetic scenes ---------------------------------------------------------------

CAR_HEIGHT = 1.5


def _smooth_field(rng: np.random.Generator, size: int, amplitude: float, waves: int = 4) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field_ = np.zeros((size, size))
    for _ in range(waves):
        wavelength = rng.uniform(0.6, 1.6) * size
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / wavelength + phase)
    field_ -= field_.min()
    field_ /= max(field_.max(), 1e-12)
    return amplitude * (2 * field_ - 1)


def _polygon_mask(rng: np.random.Generator, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    """Star-convex random polygon."""
    n = rng.integers(5, 9)
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = radius * rng.uniform(0.6, 1.0, n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ang = np.arctan2(yy - cy, xx - cx) % (2 * np.pi)
    dist = np.hypot(yy - cy, xx - cx)
    ext_a = np.concatenate([angles - 2 * np.pi, angles, angles + 2 * np.pi])
    ext_r = np.tile(radii, 3)
    return dist <= np.interp(ang, ext_a, ext_r)


def synth_scene(rng: np.random.Generator, size: int, scene_id: str) -> MultimodalScene:
    """One synthetic scene with classes impervious / building / vegetation / car.

    Cars reuse the background's optical texture and are marked only by a
    sharp height step over a smooth terrain whose relief exceeds the car
    height, so a car pixel is indistinguishable from its surroundings in
    any single channel and needs optical + height context together.
    """
    mask = np.zeros((size, size), dtype=np.uint8)
    area = size * size
    # buildings: large rectangles / polygons
    for _ in range(max(1, area // 1800)):
        cx, cy = rng.uniform(0, size, 2)
        if rng.random() < 0.5:
            hw, hh = rng.uniform(0.06, 0.14, 2) * size + 3
            region = (np.abs(np.arange(size)[None, :] - cx) <= hw) & (np.abs(np.arange(size)[:, None] - cy) <= hh)
        else:
            region = _polygon_mask(rng, size, cx, cy, rng.uniform(0.08, 0.16) * size + 3)
        mask[region] = 1
    for _ in range(max(1, area // 2200)):
        cx, cy = rng.uniform(0, size, 2)
        region = _polygon_mask(rng, size, cx, cy, rng.uniform(0.07, 0.15) * size + 2)
        mask[region & (mask == 0)] = 2

    terrain = _smooth_field(rng, size, amplitude=3.0)
    gray = rng.uniform(0.35, 0.5)
    texture = gray + 0.04 * rng.standard_normal((size, size))
    r = texture + 0.01 * rng.standard_normal((size, size))
    g = texture + 0.01 * rng.standard_normal((size, size))
    b = texture + 0.01 * rng.standard_normal((size, size))
    ir = 0.9 * texture + 0.02 * rng.standard_normal((size, size))
    dsm = terrain.copy()

    bld = mask == 1
    roof = rng.uniform(0.55, 0.7)
    r[bld] = roof + 0.03 * rng.standard_normal(bld.sum())
    g[bld] = 0.45 * roof + 0.03 * rng.standard_normal(bld.sum())
    b[bld] = 0.35 * roof + 0.03 * rng.standard_normal(bld.sum())
    ir[bld] = 0.5 * roof + 0.03 * rng.standard_normal(bld.sum())
    dsm[bld] += rng.uniform(6.0, 10.0)

    veg = mask == 2
    nv = veg.sum()
    r[veg] = 0.12 + 0.04 * rng.standard_normal(nv)
    g[veg] = 0.35 + 0.05 * rng.standard_normal(nv)
    b[veg] = 0.12 + 0.04 * rng.standard_normal(nv)
    ir[veg] = 0.65 + 0.06 * rng.standard_normal(nv)
    dsm[veg] += np.abs(_smooth_field(rng, size, 3.0, waves=6)[veg]) + 0.5 * rng.random(nv)

    # cars: small rectangles on free background, separated by a one-pixel margin
    target = int(0.02 * area)
    placed, attempts = 0, 0
    while placed < target and attempts < 400:
        attempts += 1
        long_, short = int(rng.integers(5, 8)), int(rng.integers(3, 5))
        h, w = (long_, short) if rng.random() < 0.5 else (short, long_)
        y0, x0 = int(rng.integers(1, size - h - 1)), int(rng.integers(1, size - w - 1))
        if (mask[y0 - 1:y0 + h + 1, x0 - 1:x0 + w + 1] != 0).any():
            continue
        if placed + h * w > 0.028 * area:
            break
        mask[y0:y0 + h, x0:x0 + w] = 3
        dsm[y0:y0 + h, x0:x0 + w] += CAR_HEIGHT
        placed += h * w

    bands = {name: np.clip(v, 0.0, 1.0).astype(np.float32) for name, v in
             (("R", r), ("G", g), ("B", b), ("IR", ir))}
    bands["DSM"] = (dsm + 10.0).astype(np.float32)
    return MultimodalScene(scene_id, bands, mask, num_classes=len(SYNTH_CLASSES))


def synth_dataset(seed: int, n_scenes: int, size: int = 64, num_classes: int = 4) -> list[MultimodalScene]:
    """Deterministic synthetic scenes (see :func:`synth_scene`)."""
    if size < 32:
        raise ValueError("synthetic scenes need size >= 32")
    if num_classes != len(SYNTH_CLASSES):
        raise ValueError(f"the synthetic generator emits {len(SYNTH_CLASSES)} classes")
    rng = np.random.default_rng(seed)
    return [synth_scene(rng, size, f"synth{i:03d}") for i in range(n_scenes)]


# -- MMRT files -----------------------------------------------------------------------

MMRT_MAGIC = b"MMRT1"


def write_mmrt(path, scene: MultimodalScene) -> None:
    """Magic, u32 H W C K, NUL-terminated band names, f32 planes, optional u8 mask plane."""
    h, w = scene.shape
    names = list(scene.bands)
    k = scene.num_classes
    with open(path, "wb") as fh:
        fh.write(MMRT_MAGIC)
        fh.write(struct.pack("<4I", h, w, len(names), k))
        for name in names:
            fh.write(name.encode("utf-8") + b"\0")
        for name in names:
            fh.write(np.ascontiguousarray(scene.bands[name], dtype="<f4").tobytes())
        if scene.mask is not None:
            if scene.mask.size and scene.mask.max() > 255:
                raise ValueError("mask labels do not fit in 8 bits")
            fh.write(np.ascontiguousarray(scene.mask, dtype=np.uint8).tobytes())


def read_mmrt(path, scene_id: str | None = None) -> MultimodalScene:
    raw = Path(path).read_bytes()
    if not raw.startswith(MMRT_MAGIC):
        raise ValueError(f"{path}: not an MMRT file")
    off = len(MMRT_MAGIC)
    h, w, c, k = struct.unpack_from("<4I", raw, off)
    off += 16
    names = []
    for _ in range(c):
        end = raw.index(b"\0", off)
        names.append(raw[off:end].decode("utf-8"))
        off = end + 1
    plane = h * w
    body = len(raw) - off
    if body == 4 * plane * c:
        has_mask = False
    elif body == 4 * plane * c + plane:
        has_mask = True
    else:
        raise ValueError(f"{path}: payload of {body} bytes does not match {h}x{w}x{c}")
    bands = {}
    for name in names:
        bands[name] = np.frombuffer(raw, dtype="<f4", count=plane, offset=off).reshape(h, w).astype(np.float32)
        off += 4 * plane
    mask = np.frombuffer(raw, dtype=np.uint8, count=plane, offset=off).reshape(h, w).copy() if has_mask else None
    sid = scene_id if scene_id is not None else Path(path).stem
    return MultimodalScene(sid, bands, mask, num_classes=k)


def load_mmrt_dir(directory) -> list[MultimodalScene]:
    return [read_mmrt(p) for p in sorted(Path(directory).glob("*.mmrt"))]


# -- raster previews ----------------------------------------------------------------------

def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("PGM needs a 2D mask")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(mask.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header, data = _split_pnm(raw, b"P5")
    w, h = header
    return np.frombuffer(data, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def class_palette(class_names: Sequence[str]) -> np.ndarray:
    colours = []
    for i, name in enumerate(class_names):
        colours.append(PALETTE.get(name, _FALLBACK[i % len(_FALLBACK)]))
    return np.asarray(colours, dtype=np.uint8)


def write_ppm(path, mask: np.ndarray, class_names: Sequence[str]) -> None:
    palette = class_palette(class_names)
    rgb = palette[np.asarray(mask, dtype=np.int64)]
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (w, h), data = _split_pnm(raw, b"P6")
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


def _split_pnm(raw: bytes, magic: bytes):
    if not raw.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    return (fields[0], fields[1]), raw[pos + 1:]


# -- best-effort converter for real tiles -------------------------------------------------

def rgb_labels_to_index(rgb: np.ndarray, class_names: Sequence[str] = ISPRS_CLASSES) -> np.ndarray:
    """Map an ISPRS colour-coded label image to class indices (unknown colours -> last class)."""
    palette = class_palette(class_names).astype(np.int64)
    flat = rgb.reshape(-1, 3).astype(np.int64)
    codes = flat[:, 0] * 65536 + flat[:, 1] * 256 + flat[:, 2]
    lookup = {int(c[0]) * 65536 + int(c[1]) * 256 + int(c[2]): i for i, c in enumerate(palette)}
    out = np.array([lookup.get(int(c), len(class_names) - 1) for c in codes], dtype=np.uint8)
    return out.reshape(rgb.shape[:2])


def convert_images(scene_id: str, top_path, dsm_path, band_names: Iterable[str],
                   label_path=None, class_names: Sequence[str] = ISPRS_CLASSES) -> MultimodalScene:
    """Build a scene from an orthophoto, a DSM raster and an optional colour label image.

    ``band_names`` names the orthophoto channels in order (``("IR", "R", "G")``
    for Vaihingen IRRG files).  Reading goes through Pillow, so only formats
    Pillow decodes are supported; no georeferencing is kept.
    """
    from PIL import Image

    top = np.asarray(Image.open(top_path), dtype=np.float32)
    if top.ndim == 2:
        top = top[..., None]
    names = list(band_names)
    if top.shape[-1] < len(names):
        raise ValueError(f"{top_path}: {top.shape[-1]} channels, {len(names)} band names")
    bands = {name: top[..., i] for i, name in enumerate(names)}
    bands["DSM"] = np.asarray(Image.open(dsm_path), dtype=np.float32)
    mask = None
    if label_path is not None:
        mask = rgb_labels_to_index(np.asarray(Image.open(label_path).convert("RGB")), class_names)
    return MultimodalScene(scene_id, bands, mask, num_classes=len(class_names))
