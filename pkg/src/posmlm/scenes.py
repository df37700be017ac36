"""Synthetic grounded scenes: flat-colored shapes on a plain background.

Each scene comes with a caption listing every object as ``<color> <shape>``,
optionally linking consecutive objects with a spatial phrase (``left of``,
``right of``, ``above``, ``below``) that is true of the box centers.

On disk a dataset is a directory holding ``manifest.json``, ``records.jsonl``
(one JSON object per scene) and ``images.bin``. The image file starts with a
24-byte little-endian header ``magic(4s)=b"PSCN" version(u32) W(u32) H(u32)
C(u32) count(u32)`` followed by ``count*H*W*C`` uint8 intensities in
(scene, row, column, channel) order; intensity ``v`` stands for ``v / 255``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .codec import BBox, DomainError, VocabSpec
from .rng import STAGE_DATA, derive_rng

COLORS = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 235),
    "yellow": (230, 220, 40),
    "magenta": (210, 60, 210),
    "cyan": (40, 210, 210),
}
SHAPES = ("square", "circle", "triangle", "cross")
SPATIAL = ("left of", "right of", "above", "below")
BACKGROUND = (24, 24, 24)

# Every word any task template can emit.
WORDS = (
    ("the", "a", "and", "is", "of", "left", "right", "above", "below", "near",
     "no", "relation", "with", "answer:", "yes", "what", "color", "shape", "?", "thing")
    + tuple(COLORS)
    + SHAPES
)

IMAGE_MAGIC = b"PSCN"
IMAGE_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class GenerationError(RuntimeError):
    pass


def default_vocab(num_bins: int = 16) -> VocabSpec:
    return VocabSpec(WORDS, num_bins)


@dataclass
class SceneConfig:
    image_size: int = 64
    channels: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 12
    max_size: int = 24
    margin: int = 2
    relation_prob: float = 0.5
    colors: tuple[str, ...] = tuple(COLORS)
    shapes: tuple[str, ...] = SHAPES
    crop_scale: tuple[float, float] = (0.7, 1.0)
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        self.colors = tuple(self.colors)
        self.shapes = tuple(self.shapes)
        self.crop_scale = tuple(float(s) for s in self.crop_scale)
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise DomainError("object count range must satisfy 1 <= min <= max")
        if not self.colors or not self.shapes:
            raise DomainError("color and shape vocabularies must be non-empty")
        if len(self.colors) * len(self.shapes) < self.max_objects:
            raise DomainError("not enough color/shape combinations for distinct objects")
        if not 0 < self.min_size <= self.max_size <= self.image_size:
            raise DomainError("object size range must fit the image")
        unknown = [c for c in self.colors if c not in COLORS] + [s for s in self.shapes if s not in SHAPES]
        if unknown:
            raise DomainError(f"unknown colors/shapes: {unknown}")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise DomainError(f"crop scale bounds {self.crop_scale} must satisfy 0 < lo <= hi <= 1")


@dataclass(frozen=True)
class SceneObject:
    span: tuple[int, int]  # inclusive caption token range of "<color> <shape>"
    box: BBox
    color: str
    shape: str

    @property
    def phrase(self) -> tuple[str, str]:
        return (self.color, self.shape)


@dataclass
class SceneSample:
    pixels: np.ndarray  # (H, W, C) uint8
    caption: list[str]
    objects: list[SceneObject]
    links: tuple[bool, ...] = ()  # whether consecutive pairs carry a spatial phrase
    seed: int = 0
    index: int = 0

    @property
    def image(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / 255.0

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SceneSample):
            return NotImplemented
        return (
            np.array_equal(self.pixels, other.pixels)
            and self.caption == other.caption
            and self.objects == other.objects
            and self.links == other.links
        )


def spatial_relation(a: BBox, b: BBox) -> str:
    """Dominant-axis relation of ``a`` with respect to ``b``."""
    (ax, ay), (bx, by) = a.center, b.center
    dx, dy = bx - ax, by - ay
    if abs(dx) >= abs(dy) and dx != 0:
        return "left of" if ax < bx else "right of"
    return "above" if ay < by else "below"


def relation_holds(rel: str, a: BBox, b: BBox) -> bool:
    (ax, ay), (bx, by) = a.center, b.center
    return {
        "left of": ax < bx,
        "right of": ax > bx,
        "above": ay < by,
        "below": ay > by,
    }[rel]


def build_caption(
    phrases: Sequence[tuple[str, str]], boxes: Sequence[BBox], links: Sequence[bool]
) -> tuple[list[str], list[tuple[int, int]]]:
    """Caption tokens and phrase spans; objects are paired off two at a time.

    ``links[k]`` says whether pair ``k`` (objects ``2k`` and ``2k+1``) is
    joined by a spatial phrase or by ``and``.
    """
    tokens: list[str] = []
    spans: list[tuple[int, int]] = []
    for i, (color, shape) in enumerate(phrases):
        if i > 0:
            if i % 2 == 1 and links[i // 2]:
                tokens.extend(spatial_relation(boxes[i - 1], boxes[i]).split())
            else:
                tokens.append("and")
        spans.append((len(tokens), len(tokens) + 1))
        tokens.extend((color, shape))
    return tokens, spans


def _caption_links(n: int, rng: np.random.Generator, prob: float) -> tuple[bool, ...]:
    return tuple(bool(rng.random() < prob) for _ in range((n + 1) // 2))


def shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    """Boolean (h, w) raster whose bounding rectangle is the full w x h cell."""
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = (w - 1) / 2, (h - 1) / 2
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        rx, ry = w / 2, h / 2
        m = ((xx + 0.5 - w / 2) / rx) ** 2 + ((yy + 0.5 - h / 2) / ry) ** 2 <= 1.0
        # keep the extreme rows/columns so the raster spans the whole box
        m[int(cy), :] |= True
        m[:, int(cx)] |= True
        return m
    if shape == "triangle":
        # apex at top center, base along the bottom row
        half = (yy + 1) / h * (w / 2)
        return np.abs(xx + 0.5 - w / 2) <= np.maximum(half, 0.5)
    if shape == "cross":
        tw, th = max(1, w // 3), max(1, h // 3)
        x0, y0 = (w - tw) // 2, (h - th) // 2
        m = np.zeros((h, w), dtype=bool)
        m[:, x0:x0 + tw] = True
        m[y0:y0 + th, :] = True
        return m
    raise DomainError(f"unknown shape {shape!r}")


def _overlaps(a: tuple[int, int, int, int], b: tuple[int, int, int, int], margin: int) -> bool:
    return not (
        a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1]
    )


def generate(config: SceneConfig, index: int) -> SceneSample:
    """Scene ``index`` of the stream defined by ``config.seed``; pure in (seed, index)."""
    rng = derive_rng(config.seed, STAGE_DATA, index)
    size = config.image_size
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    combos = [(c, s) for c in config.colors for s in config.shapes]
    pick = rng.choice(len(combos), size=n, replace=False)
    phrases = [combos[k] for k in pick]
    rects: list[tuple[int, int, int, int]] = []
    for color, shape in phrases:
        for _ in range(config.max_retries):
            w = int(rng.integers(config.min_size, config.max_size + 1))
            h = w if shape in ("square", "circle") else int(rng.integers(config.min_size, config.max_size + 1))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            rect = (x0, y0, x0 + w, y0 + h)
            if not any(_overlaps(rect, r, config.margin) for r in rects):
                rects.append(rect)
                break
        else:
            raise GenerationError(f"could not place {n} objects in scene {index} after {config.max_retries} tries")
    pixels = np.empty((size, size, config.channels), dtype=np.uint8)
    pixels[:] = np.asarray(BACKGROUND[: config.channels], dtype=np.uint8)
    for (color, shape), (x0, y0, x1, y1) in zip(phrases, rects):
        m = shape_mask(shape, x1 - x0, y1 - y0)
        pixels[y0:y1, x0:x1][m] = np.asarray(COLORS[color][: config.channels], dtype=np.uint8)
    boxes = [BBox(float(a), float(b), float(c), float(d), size, size) for a, b, c, d in rects]
    links = _caption_links(n, rng, config.relation_prob)
    caption, spans = build_caption(phrases, boxes, links)
    objects = [SceneObject(sp, bx, c, s) for sp, bx, (c, s) in zip(spans, boxes, phrases)]
    return SceneSample(pixels, caption, objects, links, config.seed, index)


_SWAP = {"left": "right", "right": "left"}


def hflip(sample: SceneSample) -> SceneSample:
    """Mirror the image horizontally and swap the words ``left``/``right``."""
    w = sample.width
    objects = [
        replace(
            o,
            box=BBox(w - o.box.x_max, o.box.y_min, w - o.box.x_min, o.box.y_max, o.box.image_w, o.box.image_h),
        )
        for o in sample.objects
    ]
    caption = [_SWAP.get(t, t) for t in sample.caption]
    return replace(sample, pixels=sample.pixels[:, ::-1].copy(), caption=caption, objects=objects)


def random_crop(
    sample: SceneSample,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.7, 1.0),
    min_keep: float = 0.1,
    max_retries: int = 20,
) -> SceneSample:
    """Square crop resized back to the original size with nearest-neighbor sampling.

    Boxes are clipped to the window, translated and rescaled. Objects keeping
    less than ``min_keep`` of their original box area are dropped and the
    caption is rebuilt from the survivors.
    """
    H, W = sample.height, sample.width
    side_full = min(H, W)
    for _ in range(max_retries):
        side = max(1, int(round(side_full * rng.uniform(*scale))))
        x0 = int(rng.integers(0, W - side + 1))
        y0 = int(rng.integers(0, H - side + 1))
        kept = []
        for o in sample.objects:
            b = o.box
            cx0, cy0 = max(b.x_min, x0), max(b.y_min, y0)
            cx1, cy1 = min(b.x_max, x0 + side), min(b.y_max, y0 + side)
            if cx1 <= cx0 or cy1 <= cy0:
                continue
            if (cx1 - cx0) * (cy1 - cy0) < min_keep * b.area:
                continue
            sx, sy = W / side, H / side
            nb = BBox(
                min((cx0 - x0) * sx, W), min((cy0 - y0) * sy, H),
                min((cx1 - x0) * sx, W), min((cy1 - y0) * sy, H), W, H,
            )
            kept.append((o, nb))
        if kept:
            break
    else:
        raise GenerationError(f"crop removed every object after {max_retries} tries")
    ys = y0 + (np.arange(H) * side) // H
    xs = x0 + (np.arange(W) * side) // W
    pixels = sample.pixels[ys][:, xs].copy()
    phrases = [o.phrase for o, _ in kept]
    boxes = [nb for _, nb in kept]
    links = tuple(sample.links[: (len(kept) + 1) // 2])
    links = links + (False,) * ((len(kept) + 1) // 2 - len(links))
    caption, spans = build_caption(phrases, boxes, links)
    objects = [SceneObject(sp, nb, o.color, o.shape) for sp, (o, nb) in zip(spans, kept)]
    return replace(sample, pixels=pixels, caption=caption, objects=objects, links=links)


def audit(sample: SceneSample) -> list[str]:
    """Invariant violations of one sample (empty when valid)."""
    problems = []
    for k, o in enumerate(sample.objects):
        b = o.box
        if not (0 <= b.x_min <= b.x_max <= sample.width and 0 <= b.y_min <= b.y_max <= sample.height):
            problems.append(f"object {k} box outside the image")
        s, e = o.span
        if not (0 <= s <= e < len(sample.caption)) or sample.caption[s:e + 1] != [o.color, o.shape]:
            problems.append(f"object {k} span {o.span} does not match its phrase")
    toks = sample.caption
    for k in range(len(sample.objects) - 1):
        a, b = sample.objects[k], sample.objects[k + 1]
        between = " ".join(toks[a.span[1] + 1:b.span[0]])
        if between in SPATIAL and not relation_holds(between, a.box, b.box):
            problems.append(f"caption claims {between!r} between objects {k} and {k + 1}, which is false")
    return problems


# ---------------------------------------------------------------- persistence


def _record(sample: SceneSample) -> dict:
    return {
        "index": sample.index,
        "seed": sample.seed,
        "caption": sample.caption,
        "links": list(sample.links),
        "objects": [
            {"span": list(o.span), "box": list(o.box.coords), "color": o.color, "shape": o.shape}
            for o in sample.objects
        ],
    }


def _from_record(rec: dict, pixels: np.ndarray) -> SceneSample:
    H, W = pixels.shape[:2]
    objects = [
        SceneObject(tuple(o["span"]), BBox(*o["box"], W, H), o["color"], o["shape"]) for o in rec["objects"]
    ]
    return SceneSample(pixels, list(rec["caption"]), objects, tuple(rec["links"]), rec["seed"], rec["index"])


def config_digest(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, default=list).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def write_dataset(path: str | Path, samples: Sequence[SceneSample], config: SceneConfig | None = None) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise DomainError("refusing to write an empty dataset")
    H, W, C = samples[0].pixels.shape
    digest = hashlib.sha256()
    with open(path / "records.jsonl", "w", encoding="utf-8") as f:
        for s in samples:
            line = json.dumps(_record(s), sort_keys=True)
            f.write(line + "\n")
            digest.update(line.encode())
    with open(path / "images.bin", "wb") as f:
        f.write(_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, W, H, C, len(samples)))
        for s in samples:
            if s.pixels.shape != (H, W, C):
                raise DomainError("all images in a dataset must share one shape")
            raw = np.ascontiguousarray(s.pixels, dtype=np.uint8).tobytes()
            f.write(raw)
            digest.update(raw)
    manifest = {
        "count": len(samples),
        "width": W,
        "height": H,
        "channels": C,
        "scene_config": asdict(config) if config is not None else None,
        "config_digest": config_digest(asdict(config)) if config is not None else None,
        "content_digest": digest.hexdigest(),
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def read_images(path: str | Path) -> np.ndarray:
    with open(Path(path), "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DomainError(f"{path}: truncated header")
        magic, version, W, H, C, count = _HEADER.unpack(head)
        if magic != IMAGE_MAGIC:
            raise DomainError(f"{path}: bad magic {magic!r}")
        if version != IMAGE_VERSION:
            raise DomainError(f"{path}: unsupported version {version}")
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != count * H * W * C:
        raise DomainError(f"{path}: expected {count * H * W * C} bytes of pixels, found {data.size}")
    return data.reshape(count, H, W, C)


def read_dataset(path: str | Path) -> list[SceneSample]:
    path = Path(path)
    images = read_images(path / "images.bin")
    with open(path / "records.jsonl", encoding="utf-8") as f:
        records = [json.loads(line) for line in f if line.strip()]
    if len(records) != len(images):
        raise DomainError(f"{path}: {len(records)} records but {len(images)} images")
    return [_from_record(r, images[i].copy()) for i, r in enumerate(records)]


def generate_many(config: SceneConfig, count: int, start: int = 0) -> list[SceneSample]:
    return [generate(config, i) for i in range(start, start + count)]


def iter_scenes(config: SceneConfig, count: int, start: int = 0) -> Iterator[SceneSample]:
    for i in range(start, start + count):
        yield generate(config, i)
