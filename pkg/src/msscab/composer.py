"""
False-colour image sets, first-layer weight stacking and geometric augmentation.

Image-set names follow the detector experiments: ``MS7,3,1`` picks bands by
their 1-based position in ascending wavelength (1 -> 545 nm ... 8 -> 816 nm),
``0`` is the PAN/grayscale plane, ``SegN`` the segmentation-net probability
map, ``RGB`` the colour camera image, and ``+`` joins groups.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .cube import WAVELENGTHS, BoxAnnotation, SpectralCube

TABLE_SETS: tuple[str, ...] = (
    "RGB",
    "SegN",
    "MS7,3,1",
    "MS7,3+SegN",
    "MS7,3,1+5,2,6",
    "MS7,3,1+5,2,6+8,4,0",
)
TABLE_CHANNELS = {"RGB": 3, "SegN": 1, "MS7,3,1": 3, "MS7,3+SegN": 3, "MS7,3,1+5,2,6": 6, "MS7,3,1+5,2,6+8,4,0": 9}
ALLOWED_CHANNEL_COUNTS = (1, 3, 6, 9)

PAN = "PAN"
SEG = "SegMask"
RGB_CHANNELS = ("R", "G", "B")

MIN_BOX_FRACTION = 0.1


class MissingSourceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# image-set specs
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ImageSetSpec:
    name: str
    sources: tuple  # wavelength ints, "PAN", "SegMask", or "R"/"G"/"B"

    def __post_init__(self):
        if len(self.sources) not in ALLOWED_CHANNEL_COUNTS:
            raise ValueError(f"{self.name}: {len(self.sources)} channels, expected one of {ALLOWED_CHANNEL_COUNTS}")

    @property
    def n_channels(self) -> int:
        return len(self.sources)

    def channel_names(self) -> list[str]:
        return [f"{s}nm" if isinstance(s, int) else s for s in self.sources]


def _band_from_digit(d: int):
    if d == 0:
        return PAN
    if not 1 <= d <= len(WAVELENGTHS):
        raise ValueError(f"band digit {d} out of range 0..{len(WAVELENGTHS)}")
    return WAVELENGTHS[d - 1]


def parse_image_set(name: str) -> ImageSetSpec:
    """Resolve a name such as ``MS7,3+SegN`` into its ordered channel sources."""
    if name == "RGB":
        return ImageSetSpec(name, RGB_CHANNELS)
    sources: list = []
    for part in name.split("+"):
        part = part.strip()
        if part == "SegN":
            sources.append(SEG)
        elif part == "RGB":
            sources.extend(RGB_CHANNELS)
        elif re.fullmatch(r"(MS)?\d(,\d)*", part):
            sources.extend(_band_from_digit(int(d)) for d in part.removeprefix("MS").split(","))
        else:
            raise ValueError(f"cannot parse image-set component {part!r} in {name!r}")
    return ImageSetSpec(name, tuple(sources))


def image_set_from_ranking(ranking: Sequence[int], groups: int = 1) -> ImageSetSpec:
    """``MSa,b,c[+d,e,f...]`` from an LDA wavelength ranking, three bands per group."""
    digits = [WAVELENGTHS.index(int(nm)) + 1 for nm in ranking]
    if groups * 3 > len(digits):
        raise ValueError("not enough ranked bands for the requested groups")
    parts = [",".join(str(d) for d in digits[3 * g : 3 * g + 3]) for g in range(groups)]
    return parse_image_set("MS" + "+".join(parts))


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------
def rescale_unit(plane: np.ndarray) -> np.ndarray:
    """Per-image min-max rescale to [0, 1]; a constant plane maps to 0."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    if hi <= lo:
        return np.zeros_like(plane)
    return np.clip((plane - lo) / (hi - lo), 0.0, 1.0)


@dataclass(frozen=True)
class ComposedImage:
    channels: np.ndarray
    spec_name: str = ""
    scene_id: str = ""
    channel_names: tuple[str, ...] = ()

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]


def compose(
    spec: ImageSetSpec | str,
    cube: SpectralCube | None = None,
    prob_map: np.ndarray | None = None,
    rgb: np.ndarray | None = None,
    scene_id: str = "",
) -> ComposedImage:
    """Gather the spec's channels in order, each scaled to [0, 1].

    Bands and PAN are min-max rescaled per image, the probability map is
    copied unchanged and RGB channels (``(3, H, W)`` floats in [0, 1] or
    uint8) are taken as they are.
    """
    if isinstance(spec, str):
        spec = parse_image_set(spec)
    shape = None
    planes = []
    for src in spec.sources:
        if src == SEG:
            if prob_map is None:
                raise MissingSourceError(f"{spec.name} needs a probability map")
            plane = np.asarray(prob_map, dtype=np.float64)
            if plane.min() < 0 or plane.max() > 1:
                raise ValueError("probability map values must lie in [0, 1]")
        elif src in RGB_CHANNELS:
            if rgb is None:
                raise MissingSourceError(f"{spec.name} needs an RGB image")
            arr = np.asarray(rgb)
            arr = arr / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float64)
            plane = arr[RGB_CHANNELS.index(src)]
        else:
            if cube is None:
                raise MissingSourceError(f"{spec.name} needs a spectral cube")
            plane = rescale_unit(cube.pan if src == PAN else cube.band(src))
        if shape is None:
            shape = plane.shape
        elif plane.shape != shape:
            raise ValueError(f"{spec.name}: channel {src} has shape {plane.shape}, expected {shape}")
        planes.append(plane)
    return ComposedImage(np.stack(planes), spec.name, scene_id, tuple(spec.channel_names()))


# ---------------------------------------------------------------------------
# first-layer weight stacking
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FirstLayerWeights:
    """Convolution weights ``(out_channels, in_channels, kh, kw)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError("first-layer weights must be (out, in, kh, kw)")
        if v.shape[1] not in (3, 6, 9):
            raise ValueError(f"in_channels must be 3, 6 or 9, got {v.shape[1]}")
        if not np.isfinite(v).all():
            raise ValueError("non-finite weights")
        object.__setattr__(self, "values", v)

    @property
    def in_channels(self) -> int:
        return self.values.shape[1]

    def to_json(self) -> dict:
        return {"dims": list(self.values.shape), "values": self.values.ravel().tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "FirstLayerWeights":
        return cls(np.array(d["values"], dtype=np.float64).reshape(d["dims"]))


def stack_first_layer(base: FirstLayerWeights, n: int) -> FirstLayerWeights:
    """Repeat the pretrained 3-channel input filters ``n`` times along the input axis."""
    if base.in_channels != 3:
        raise ValueError(f"base weights must have 3 input channels, got {base.in_channels}")
    if n < 1:
        raise ValueError("n must be >= 1")
    return FirstLayerWeights(np.concatenate([base.values] * n, axis=1))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------
def _boxes_to_corners(boxes, width, height) -> np.ndarray:
    """``(n, 4, 2)`` corner coordinates in pixels (x, y)."""
    out = np.empty((len(boxes), 4, 2))
    for i, b in enumerate(boxes):
        x1, x2 = (b.cx - b.w / 2) * width, (b.cx + b.w / 2) * width
        y1, y2 = (b.cy - b.h / 2) * height, (b.cy + b.h / 2) * height
        out[i] = [(x1, y1), (x2, y1), (x2, y2), (x1, y2)]
    return out


def _hull_boxes(boxes, corners: np.ndarray, width, height) -> list[BoxAnnotation]:
    """Axis-aligned hulls of mapped corners, clipped to the image; slivers dropped."""
    out = []
    for b, c in zip(boxes, corners):
        x1, y1 = c.min(axis=0)
        x2, y2 = c.max(axis=0)
        full = (x2 - x1) * (y2 - y1)
        cx1, cy1 = max(x1, 0.0), max(y1, 0.0)
        cx2, cy2 = min(x2, float(width)), min(y2, float(height))
        if cx2 <= cx1 or cy2 <= cy1 or full <= 0:
            continue
        if (cx2 - cx1) * (cy2 - cy1) < MIN_BOX_FRACTION * full:
            continue
        out.append(BoxAnnotation.from_pixels(b.class_id, cx1, cy1, cx2, cy2, width, height))
    return out


def hflip(image: ComposedImage, boxes):
    new = replace(image, channels=image.channels[:, :, ::-1].copy())
    return new, [replace(b, cx=1.0 - b.cx) for b in boxes]


def vflip(image: ComposedImage, boxes):
    new = replace(image, channels=image.channels[:, ::-1, :].copy())
    return new, [replace(b, cy=1.0 - b.cy) for b in boxes]


def rot90(image: ComposedImage, boxes, k: int = 1):
    """Exact rotation by ``k`` quarter turns, counter-clockwise as displayed."""
    k %= 4
    channels = np.rot90(image.channels, k=k, axes=(1, 2)).copy()
    out = list(boxes)
    for _ in range(k):
        out = [BoxAnnotation(b.class_id, b.cy, 1.0 - b.cx, b.h, b.w) for b in out]
    return replace(image, channels=channels), out


def _affine(image: ComposedImage, boxes, matrix: np.ndarray):
    """Apply ``matrix`` (3x3, output (x, y, 1) from input pixel coords) with mirrored fill."""
    h, w = image.height, image.width
    inv = np.linalg.inv(matrix)
    # ndimage works in (row, col) = (y, x) order, mapping output coords to input coords
    m_rc = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
    off_rc = np.array([inv[1, 2], inv[0, 2]])
    # pixel centers sit at (i + 0.5); shift so the transform acts on continuous coords
    off_rc = off_rc + m_rc @ np.array([0.5, 0.5]) - 0.5
    channels = np.stack(
        [ndimage.affine_transform(c, m_rc, offset=off_rc, order=1, mode="reflect") for c in image.channels]
    )
    corners = _boxes_to_corners(boxes, w, h)
    hom = np.concatenate([corners, np.ones(corners.shape[:2] + (1,))], axis=2)
    mapped = hom @ matrix.T
    return replace(image, channels=channels), _hull_boxes(boxes, mapped[..., :2], w, h)


def rotate(image: ComposedImage, boxes, degrees: float):
    """Rotate about the image center, counter-clockwise as displayed.

    Quarter turns are exact index permutations (height and width swap for odd
    turns); other angles keep the image size and fill exposed corners by mirroring.
    """
    if float(degrees) % 90 == 0:
        return rot90(image, boxes, int(degrees // 90))
    cx, cy = image.width / 2, image.height / 2
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    # y axis points down, so a visual counter-clockwise turn is +s on x from y
    m = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    return _affine(image, boxes, back @ m @ to_origin)


def translate(image: ComposedImage, boxes, dx: float, dy: float):
    """Shift content by (dx, dy) pixels."""
    m = np.array([[1, 0, dx], [0, 1, dy], [0, 0, 1.0]])
    return _affine(image, boxes, m)


def scale(image: ComposedImage, boxes, s: float):
    """Zoom about the image center by factor ``s``; size preserved."""
    if s <= 0:
        raise ValueError(f"scale factor must be positive, got {s}")
    cx, cy = image.width / 2, image.height / 2
    m = np.array([[s, 0, cx * (1 - s)], [0, s, cy * (1 - s)], [0, 0, 1.0]])
    return _affine(image, boxes, m)


def _resize(channels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of ``(c, H, W)`` to ``(c, h, w)`` on pixel centers."""
    _, H, W = channels.shape
    rows = (np.arange(h) + 0.5) * H / h - 0.5
    cols = (np.arange(w) + 0.5) * W / w - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([ndimage.map_coordinates(c, [rr, cc], order=1, mode="nearest") for c in channels])


def mosaic(items: Sequence[tuple[ComposedImage, list]]):
    """2x2 assemblage at half scale: order is top-left, top-right, bottom-left, bottom-right.

    The output takes the size of the first image.
    """
    if len(items) != 4:
        raise ValueError(f"mosaic needs exactly 4 images, got {len(items)}")
    nc = {img.channels.shape[0] for img, _ in items}
    if len(nc) != 1:
        raise ValueError("mosaic images must have equal channel counts")
    first = items[0][0]
    H, W = first.height, first.width
    h0, w0 = H // 2, W // 2
    out = np.empty((nc.pop(), H, W))
    boxes_out = []
    for q, (img, boxes) in enumerate(items):
        r, c = divmod(q, 2)
        y0, x0 = r * h0, c * w0
        qh, qw = (h0 if r == 0 else H - h0), (w0 if c == 0 else W - w0)
        out[:, y0 : y0 + qh, x0 : x0 + qw] = _resize(img.channels, qh, qw)
        for b in boxes:
            boxes_out.append(
                BoxAnnotation(
                    b.class_id, (x0 + b.cx * qw) / W, (y0 + b.cy * qh) / H, b.w * qw / W, b.h * qh / H
                )
            )
    return replace(first, channels=out, scene_id="mosaic"), boxes_out


def parse_op(op: str):
    """``hflip``, ``vflip``, ``rotate:30``, ``translate:5,-3``, ``scale:0.8``."""
    name, _, arg = op.partition(":")
    if name in ("hflip", "vflip") and not arg:
        return name, ()
    if name == "rotate":
        return name, (float(arg),)
    if name == "translate":
        dx, dy = (float(v) for v in arg.split(","))
        return name, (dx, dy)
    if name == "scale":
        s = float(arg)
        if s <= 0:
            raise ValueError(f"scale factor must be positive, got {s}")
        return name, (s,)
    raise ValueError(f"unknown augmentation {op!r}")


_OPS = {"hflip": hflip, "vflip": vflip, "rotate": rotate, "translate": translate, "scale": scale}


def augment(image: ComposedImage, boxes, op: str | tuple):
    """Apply one augmentation given as a string (see ``parse_op``) or ``(name, args)``."""
    name, args = parse_op(op) if isinstance(op, str) else op
    if name == "mosaic":
        return mosaic(args)
    return _OPS[name](image, boxes, *args)
