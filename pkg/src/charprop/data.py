"""Images, character annotations and the synthetic glyph-scene generator."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from charprop.boxes import BBox

logger = logging.getLogger(__name__)


class AnnotationError(ValueError):
    pass


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def resize_image(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an HWC uint8 image to ``(width, height)``."""
    return np.asarray(Image.fromarray(pixels).resize(size, Image.BILINEAR))


class CropSource:
    """Repeated bilinear crops from one image.

    Crops may extend past the border; the image is edge-padded by ``margin``
    pixels once and out-of-range boxes are clipped to the padded area.
    """

    def __init__(self, pixels: np.ndarray, margin: int = 64):
        self.margin = margin
        self.shape = pixels.shape
        padded = np.pad(pixels, ((margin, margin), (margin, margin), (0, 0)), mode="edge")
        self._image = Image.fromarray(padded)

    def crop(self, box: BBox, size: tuple[int, int]) -> np.ndarray:
        m = self.margin
        h, w = self.shape[:2]
        x0 = min(max(box.x + m, 0.0), w + 2 * m - 1)
        y0 = min(max(box.y + m, 0.0), h + 2 * m - 1)
        x1 = min(max(box.x + box.w + m, x0 + 1), w + 2 * m)
        y1 = min(max(box.y + box.h + m, y0 + 1), h + 2 * m)
        return np.asarray(self._image.resize(size, Image.BILINEAR, box=(x0, y0, x1, y1)))


@dataclass
class AnnotatedImage:
    """One image and its character boxes.

    Pixels load lazily from ``path``; on first load every box is clamped to
    the image bounds.
    """

    image_id: str
    path: Path | None
    boxes: list[BBox] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)
    _pixels: np.ndarray | None = field(default=None, repr=False)

    @property
    def pixels(self) -> np.ndarray:
        if self._pixels is None:
            if self.path is None:
                raise AnnotationError(f"{self.image_id}: no pixel data and no path")
            self._pixels = read_image(self.path)
            self._clamp()
        return self._pixels

    def _clamp(self) -> None:
        h, w = self._pixels.shape[:2]
        kept_boxes, kept_labels = [], []
        for b, lab in zip(self.boxes, self.labels):
            x0, y0 = max(b.x, 0.0), max(b.y, 0.0)
            x1, y1 = min(b.x + b.w, float(w)), min(b.y + b.h, float(h))
            c = BBox(x0, y0, x1 - x0, y1 - y0)
            if c != b:
                logger.warning("%s: clamped box %s to %s", self.image_id, tuple(b), tuple(c))
            if c.w <= 0 or c.h <= 0:
                logger.warning("%s: dropped box %s outside the image", self.image_id, tuple(b))
                continue
            kept_boxes.append(c)
            kept_labels.append(lab)
        self.boxes, self.labels = kept_boxes, kept_labels


def _num(s: str) -> float:
    return float(s)


def load_annotations(path) -> list[AnnotatedImage]:
    """Parse ``image_file x y w h [label]`` lines.

    Image paths are resolved relative to the annotation file. Blank lines
    and lines starting with ``#`` are skipped. Records for the same image
    are merged in file order.
    """
    path = Path(path)
    images: dict[str, AnnotatedImage] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split(maxsplit=5)
            if len(parts) < 5:
                raise AnnotationError(f"{path}:{lineno}: expected 'image x y w h [label]', got {text!r}")
            try:
                x, y, w, h = (_num(p) for p in parts[1:5])
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: non-numeric box in {text!r}") from None
            label = parts[5] if len(parts) > 5 else ""
            rec = images.get(parts[0])
            if rec is None:
                rec = images[parts[0]] = AnnotatedImage(parts[0], path.parent / parts[0])
            if w <= 0 or h <= 0:
                logger.warning("%s:%d: skipping degenerate box", path, lineno)
                continue
            rec.boxes.append(BBox(x, y, w, h))
            rec.labels.append(label)
    return list(images.values())


def _fmt(v: float) -> str:
    return f"{v:g}" if float(v).is_integer() else repr(float(v))


def format_annotations(images: list[AnnotatedImage]) -> str:
    lines = []
    for rec in images:
        for b, lab in zip(rec.boxes, rec.labels):
            fields_ = [rec.image_id, *(_fmt(v) for v in b)]
            if lab:
                fields_.append(lab)
            lines.append(" ".join(fields_))
    return "".join(l + "\n" for l in lines)


def write_annotations(images: list[AnnotatedImage], path) -> None:
    Path(path).write_text(format_annotations(images), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic scenes

SHAPES = ("bar", "box", "L", "T", "H", "U", "E", "X")


@dataclass
class SynthConfig:
    seed: int = 0
    width_range: tuple[int, int] = (96, 160)
    height_range: tuple[int, int] = (96, 160)
    glyphs_per_image: tuple[int, int] = (3, 7)
    glyph_size: tuple[int, int] = (22, 56)  # longer side, pixels
    aspect_mixture: tuple[tuple[float, float], ...] = ((0.5, 1 / 3), (1.0, 1 / 3), (2.0, 1 / 3))
    aspect_jitter: float = 0.06  # sd of log aspect around each component
    texture: bool = True
    illumination: float = 0.5  # probability of a linear illumination gradient
    touching_pairs: float = 0.15  # probability a glyph gets a touching neighbour
    broken_glyphs: float = 0.15  # probability a glyph is split in two
    gap: int = 3  # minimum free pixels between unrelated glyphs


def sample_aspects(rng: np.random.Generator, config: SynthConfig, n: int) -> np.ndarray:
    centers = np.array([a for a, _ in config.aspect_mixture], dtype=float)
    weights = np.array([p for _, p in config.aspect_mixture], dtype=float)
    comp = rng.choice(len(centers), size=n, p=weights / weights.sum())
    return np.exp(np.log(centers[comp]) + rng.normal(0.0, config.aspect_jitter, size=n))


def _glyph_mask(shape: str, w: int, h: int, stroke: int, rng: np.random.Generator) -> np.ndarray:
    im = Image.new("L", (w, h), 0)
    d = ImageDraw.Draw(im)
    t = stroke - 1
    r, b = w - 1, h - 1
    if shape == "bar":
        d.rectangle([0, 0, r, b], fill=255)
    elif shape == "box":
        d.rectangle([0, 0, r, b], fill=255)
        if w > 2 * stroke and h > 2 * stroke:
            d.rectangle([stroke, stroke, r - stroke, b - stroke], fill=0)
    elif shape == "L":
        d.rectangle([0, 0, t, b], fill=255)
        d.rectangle([0, b - t, r, b], fill=255)
    elif shape == "T":
        d.rectangle([0, 0, r, t], fill=255)
        c = (w - stroke) // 2
        d.rectangle([c, 0, c + t, b], fill=255)
    elif shape == "H":
        d.rectangle([0, 0, t, b], fill=255)
        d.rectangle([r - t, 0, r, b], fill=255)
        c = (h - stroke) // 2
        d.rectangle([0, c, r, c + t], fill=255)
    elif shape == "U":
        d.rectangle([0, 0, t, b], fill=255)
        d.rectangle([r - t, 0, r, b], fill=255)
        d.rectangle([0, b - t, r, b], fill=255)
    elif shape == "E":
        d.rectangle([0, 0, t, b], fill=255)
        c = (h - stroke) // 2
        for y in (0, c, b - t):
            d.rectangle([0, y, r, y + t], fill=255)
    else:  # X
        d.line([(0, 0), (r, b)], fill=255, width=stroke)
        d.line([(0, b), (r, 0)], fill=255, width=stroke)
        # pin the extents so the tight box is the full glyph box
        for px, py in ((0, 0), (r, b), (0, b), (r, 0)):
            d.point((px, py), fill=255)
    return np.asarray(im) > 0


def _break_mask(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Cut a gap through the middle of the glyph, keeping its extents."""
    h, w = mask.shape
    out = mask.copy()
    if rng.random() < 0.5 and h >= 9:
        g = max(1, h // 8)
        c = h // 2 - g // 2
        out[c:c + g] = False
    elif w >= 9:
        g = max(1, w // 8)
        c = w // 2 - g // 2
        out[:, c:c + g] = False
    return out


def _background(rng: np.random.Generator, h: int, w: int, config: SynthConfig) -> np.ndarray:
    base = rng.uniform(0, 255, size=3)
    img = np.broadcast_to(base, (h, w, 3)).astype(np.float64)
    if config.texture:
        gh, gw = rng.integers(3, 8, size=2)
        coarse = rng.normal(0, 25, size=(gh, gw, 3)).astype(np.float32)
        smooth = np.stack(
            [np.asarray(Image.fromarray(np.ascontiguousarray(coarse[..., c])).resize((w, h), Image.BILINEAR)) for c in range(3)],
            axis=-1,
        )
        img += smooth
    return img


def _fits(box: tuple[int, int, int, int], placed: list[tuple[int, int, int, int]], gap: int) -> bool:
    x, y, w, h = box
    for px, py, pw, ph in placed:
        if x < px + pw + gap and px < x + w + gap and y < py + ph + gap and py < y + h + gap:
            return False
    return True


def render_scene(rng: np.random.Generator, config: SynthConfig) -> tuple[np.ndarray, list[BBox], list[str]]:
    """Draw one scene; returns pixels, glyph boxes and shape labels."""
    w = int(rng.integers(config.width_range[0], config.width_range[1] + 1))
    h = int(rng.integers(config.height_range[0], config.height_range[1] + 1))
    img = _background(rng, h, w, config)
    lum = img.mean()
    n = int(rng.integers(config.glyphs_per_image[0], config.glyphs_per_image[1] + 1))

    placed: list[tuple[int, int, int, int]] = []
    labels: list[str] = []
    masks: list[np.ndarray] = []

    def glyph_dims(size: float, aspect: float) -> tuple[int, int]:
        if aspect < 1:
            return max(3, int(round(size * aspect))), int(round(size))
        return int(round(size)), max(3, int(round(size / aspect)))

    def make_mask(gw: int, gh: int) -> tuple[np.ndarray, str]:
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        stroke = max(2, int(round(min(gw, gh) * rng.uniform(0.18, 0.3))))
        m = _glyph_mask(shape, gw, gh, stroke, rng)
        if rng.random() < config.broken_glyphs:
            m = _break_mask(m, rng)
        return m, shape

    for _ in range(n):
        size = rng.uniform(*config.glyph_size)
        aspect = float(sample_aspects(rng, config, 1)[0])
        gw, gh = glyph_dims(size, aspect)
        pair = rng.random() < config.touching_pairs
        pw, ph = (0, 0)
        if pair:
            pw, ph = glyph_dims(size, float(sample_aspects(rng, config, 1)[0]))
        total_w, total_h = gw + pw, max(gh, ph)
        if total_w > w or total_h > h:
            continue
        for _attempt in range(50):
            x = int(rng.integers(0, w - total_w + 1))
            y = int(rng.integers(0, h - total_h + 1))
            first = (x, y + (total_h - gh) // 2, gw, gh)
            second = (x + gw, y + (total_h - ph) // 2, pw, ph) if pair else None
            if _fits(first, placed, config.gap) and (second is None or _fits(second, placed, config.gap)):
                break
        else:
            continue
        for box in (first, second):
            if box is None:
                continue
            m, shape = make_mask(box[2], box[3])
            placed.append(box)
            masks.append(m)
            labels.append(shape)

    for (x, y, gw, gh), m in zip(placed, masks):
        if lum > 128:
            color = rng.uniform(0, 90, size=3)
        else:
            color = rng.uniform(165, 255, size=3)
        region = img[y:y + gh, x:x + gw]
        region[m] = color

    if rng.random() < config.illumination:
        theta = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        proj = (xx - w / 2) * math.cos(theta) + (yy - h / 2) * math.sin(theta)
        proj = proj / (np.abs(proj).max() + 1e-9)
        lo, hi = rng.uniform(0.45, 0.8), rng.uniform(1.0, 1.3)
        img *= ((lo + hi) / 2 + proj * (hi - lo) / 2)[..., None]
    img += rng.normal(0, 4, size=img.shape)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    boxes = [BBox(float(x), float(y), float(gw), float(gh)) for x, y, gw, gh in placed]
    return pixels, boxes, labels


def synth_generate(config: SynthConfig, count: int, out_dir, start: int = 0) -> list[AnnotatedImage]:
    """Render ``count`` scenes into ``out_dir/images`` plus ``annotations.txt``.

    Scene ``i`` is seeded from ``(config.seed, i)``, so any subset can be
    regenerated independently.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(start, start + count):
        rng = np.random.default_rng([config.seed, i])
        pixels, boxes, labels = render_scene(rng, config)
        rel = f"images/scene_{i:05d}.png"
        write_image(out / rel, pixels)
        records.append(AnnotatedImage(rel, out / rel, boxes, labels, pixels))
    write_annotations(records, out / "annotations.txt")
    return records
