"""
Multispectral cube data model, on-disk formats and white-reference normalization.

A cube holds the eight narrow-band planes of the VIS-NIR camera plus the
panchromatic (PAN) plane. On disk a cube is a raw little-endian float32
planar payload with a JSON sidecar next to it::

    scene.raw        planes in sidecar order, row-major within a plane
    scene.raw.json   {"width", "height", "bands": [nm, ...], "has_pan", "normalized"}

The PAN plane, when present, is stored last. The same container is reused
for single-plane probability maps, 40-plane feature cubes and composed
images; those carry extra sidecar keys (``planes``, ``channels``, ``kind``).
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

WAVELENGTHS: tuple[int, ...] = (545, 579, 622, 658, 701, 737, 779, 816)
N_BANDS = len(WAVELENGTHS)

BACKGROUND, LEAF, SCAB = 0, 1, 2
MASK_LABELS = (BACKGROUND, LEAF, SCAB)

SPLIT_TAGS = ("train", "val", "test", "unassigned")

_DISK_DTYPE = np.dtype("<f4")


class CubeFormatError(ValueError):
    """Raised for malformed cube, mask, annotation or manifest files."""


class NormalizationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# atomic file helpers
# ---------------------------------------------------------------------------
def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def atomic_write_json(path: str | os.PathLike, obj) -> None:
    atomic_write_bytes(path, dumps_json(obj).encode("utf-8"))


def sidecar_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


# ---------------------------------------------------------------------------
# cube
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SpectralCube:
    """Eight band planes ``(8, H, W)`` plus one PAN plane ``(H, W)``."""

    planes: np.ndarray
    pan: np.ndarray
    normalized: bool = False
    bands: tuple[int, ...] = WAVELENGTHS

    def __post_init__(self):
        planes = np.array(self.planes, dtype=np.float64)
        pan = np.array(self.pan, dtype=np.float64)
        if tuple(self.bands) != WAVELENGTHS:
            raise CubeFormatError(f"bands must be {WAVELENGTHS}, got {tuple(self.bands)}")
        if planes.ndim != 3 or planes.shape[0] != N_BANDS:
            raise CubeFormatError(f"expected ({N_BANDS}, H, W) band planes, got {planes.shape}")
        if pan.shape != planes.shape[1:]:
            raise CubeFormatError(f"PAN shape {pan.shape} != band shape {planes.shape[1:]}")
        if not (np.isfinite(planes).all() and np.isfinite(pan).all()):
            raise CubeFormatError("cube contains non-finite values")
        if (planes < 0).any() or (pan < 0).any():
            raise CubeFormatError("cube contains negative intensities")
        planes.flags.writeable = False
        pan.flags.writeable = False
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "pan", pan)
        object.__setattr__(self, "bands", tuple(self.bands))

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def band(self, nm: int) -> np.ndarray:
        return self.planes[WAVELENGTHS.index(nm)]

    def scaled(self, a: float) -> "SpectralCube":
        return replace(self, planes=self.planes * a, pan=self.pan * a)


def save_planes(path: str | os.PathLike, planes: np.ndarray, meta: dict) -> None:
    """Write a ``(n, H, W)`` stack in the planar float32 format with ``meta`` as sidecar."""
    planes = np.asarray(planes)
    if planes.ndim != 3:
        raise ValueError("planes must be (n, H, W)")
    n, h, w = planes.shape
    meta = dict(meta, width=int(w), height=int(h), planes=int(n))
    atomic_write_bytes(path, np.ascontiguousarray(planes, dtype=_DISK_DTYPE).tobytes())
    atomic_write_json(sidecar_path(path), meta)


def load_planes(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    """Read a planar float32 file and its sidecar; returns float64 ``(n, H, W)``."""
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise CubeFormatError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    try:
        w, h = int(meta["width"]), int(meta["height"])
    except KeyError as exc:
        raise CubeFormatError(f"sidecar {side} lacks {exc}") from None
    if "planes" in meta:
        n = int(meta["planes"])
    else:
        n = len(meta.get("bands", [])) + int(bool(meta.get("has_pan", False)))
    raw = np.fromfile(path, dtype=_DISK_DTYPE)
    if raw.size != n * h * w:
        raise CubeFormatError(
            f"{path}: sidecar declares {n}x{h}x{w}={n * h * w} values, payload has {raw.size}"
        )
    data = raw.reshape(n, h, w).astype(np.float64)
    if not np.isfinite(data).all():
        raise CubeFormatError(f"{path}: non-finite values in payload")
    return data, meta


def save_cube(path: str | os.PathLike, cube: SpectralCube) -> None:
    data = np.concatenate([cube.planes, cube.pan[None]], axis=0)
    meta = {
        "bands": list(cube.bands),
        "has_pan": True,
        "normalized": bool(cube.normalized),
        "kind": "cube",
    }
    save_planes(path, data, meta)


def load_cube(path: str | os.PathLike) -> SpectralCube:
    data, meta = load_planes(path)
    bands = [int(b) for b in meta.get("bands", [])]
    if not meta.get("has_pan", False):
        raise CubeFormatError(f"{path}: cube sidecar must declare has_pan")
    if sorted(bands) != list(WAVELENGTHS):
        raise CubeFormatError(f"{path}: band list {bands} is not the camera's {WAVELENGTHS}")
    order = np.argsort(bands, kind="stable")
    return SpectralCube(
        planes=data[:N_BANDS][order],
        pan=data[N_BANDS],
        normalized=bool(meta.get("normalized", False)),
    )


# ---------------------------------------------------------------------------
# white-reference normalization
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Patch:
    """Pixel rectangle, half-open: rows ``y0:y1``, columns ``x0:x1``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @classmethod
    def from_any(cls, obj) -> "Patch":
        if isinstance(obj, Patch):
            return obj
        if isinstance(obj, dict):
            return cls(int(obj["x0"]), int(obj["y0"]), int(obj["x1"]), int(obj["y1"]))
        x0, y0, x1, y1 = (int(v) for v in obj)
        return cls(x0, y0, x1, y1)

    def as_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)


@dataclass(frozen=True)
class NormCoefficients:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) != N_BANDS:
            raise ValueError(f"need {N_BANDS} coefficients, got {len(vals)}")
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise ValueError(f"coefficients must be finite and positive: {vals}")
        object.__setattr__(self, "values", vals)

    def as_array(self) -> np.ndarray:
        return np.array(self.values)

    def to_dict(self) -> dict:
        return {str(nm): v for nm, v in zip(WAVELENGTHS, self.values)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormCoefficients":
        return cls(tuple(d[str(nm)] for nm in WAVELENGTHS))


def compute_norm_coefficients(white_cube: SpectralCube, patch) -> NormCoefficients:
    """Per-band ratio of mean band intensity to mean PAN intensity over ``patch``."""
    patch = Patch.from_any(patch)
    if not (0 <= patch.x0 < patch.x1 <= white_cube.width and 0 <= patch.y0 < patch.y1 <= white_cube.height):
        raise ValueError(f"patch {patch} empty or outside {white_cube.width}x{white_cube.height} cube")
    rows, cols = patch.slices()
    pan_mean = white_cube.pan[rows, cols].mean()
    if not pan_mean > 0:
        raise NormalizationError(f"mean PAN intensity over patch is {pan_mean}, must be > 0")
    band_means = white_cube.planes[:, rows, cols].mean(axis=(1, 2))
    return NormCoefficients(tuple(band_means / pan_mean))


def normalize_cube(cube: SpectralCube, coeffs: NormCoefficients) -> SpectralCube:
    # each band is divided by its coefficient; PAN is left as is
    if cube.normalized:
        raise NormalizationError("cube is already normalized")
    planes = cube.planes / coeffs.as_array()[:, None, None]
    return replace(cube, planes=planes, normalized=True)


# ---------------------------------------------------------------------------
# masks and box annotations
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PixelMask:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.uint8)
        if labels.ndim != 2:
            raise CubeFormatError("mask must be 2-D")
        bad = np.setdiff1d(np.unique(labels), MASK_LABELS)
        if bad.size:
            raise CubeFormatError(f"unknown mask label values {bad.tolist()}")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def save_mask(path: str | os.PathLike, mask: PixelMask) -> None:
    import io

    buf = io.BytesIO()
    Image.fromarray(mask.labels, mode="L").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_mask(path: str | os.PathLike) -> PixelMask:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "1"):
            raise CubeFormatError(f"{path}: mask must be single-channel 8-bit, got mode {im.mode}")
        arr = np.array(im, dtype=np.uint8)
    return PixelMask(arr)


@dataclass(frozen=True)
class BoxAnnotation:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise CubeFormatError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise CubeFormatError(f"box size ({self.w}, {self.h}) outside (0, 1]")

    def to_pixels(self, width: int, height: int) -> tuple[float, float, float, float]:
        x1 = max(0.0, (self.cx - self.w / 2) * width)
        y1 = max(0.0, (self.cy - self.h / 2) * height)
        x2 = min(float(width), (self.cx + self.w / 2) * width)
        y2 = min(float(height), (self.cy + self.h / 2) * height)
        return x1, y1, x2, y2

    @classmethod
    def from_pixels(cls, class_id: int, x1, y1, x2, y2, width: int, height: int) -> "BoxAnnotation":
        return cls(
            int(class_id),
            (x1 + x2) / 2 / width,
            (y1 + y2) / 2 / height,
            (x2 - x1) / width,
            (y2 - y1) / height,
        )


def format_annotations(boxes: Iterable[BoxAnnotation]) -> str:
    return "".join(f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for b in boxes)


def parse_annotations(text: str) -> list[BoxAnnotation]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise CubeFormatError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError:
            raise CubeFormatError(f"line {lineno}: malformed record {line!r}") from None
        try:
            boxes.append(BoxAnnotation(cls, cx, cy, w, h))
        except CubeFormatError as exc:
            raise CubeFormatError(f"line {lineno}: {exc}") from None
    return boxes


def save_annotations(path: str | os.PathLike, boxes: Iterable[BoxAnnotation]) -> None:
    atomic_write_bytes(path, format_annotations(boxes).encode("ascii"))


def load_annotations(path: str | os.PathLike) -> list[BoxAnnotation]:
    return parse_annotations(Path(path).read_text(encoding="ascii"))


def load_rgb(path: str | os.PathLike) -> np.ndarray:
    """RGB image as float ``(3, H, W)`` in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.moveaxis(arr, -1, 0)


def save_rgb(path: str | os.PathLike, rgb: np.ndarray) -> None:
    import io

    arr = np.clip(np.round(np.moveaxis(np.asarray(rgb), 0, -1) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ManifestEntry:
    scene_id: str
    cube: str
    rgb: str | None = None
    mask: str | None = None
    annotations: str | None = None
    split: str = "unassigned"
    dataset: str = "default"

    def __post_init__(self):
        if self.split not in SPLIT_TAGS:
            raise CubeFormatError(f"scene {self.scene_id}: unknown split tag {self.split!r}")


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        ids = [e.scene_id for e in entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CubeFormatError(f"duplicate scene ids: {dupes}")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "root", Path(self.root))

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def by_split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    def check_files(self) -> None:
        for e in self.entries:
            for attr in ("cube", "rgb", "mask", "annotations"):
                p = self.resolve(getattr(e, attr))
                if p is not None and not p.exists():
                    raise CubeFormatError(f"scene {e.scene_id}: {attr} file {p} does not exist")
            if not sidecar_path(self.resolve(e.cube)).exists():
                raise CubeFormatError(f"scene {e.scene_id}: cube sidecar missing")

    def to_json(self) -> list[dict]:
        out = []
        for e in self.entries:
            rec = {"scene_id": e.scene_id, "cube": e.cube, "split": e.split, "dataset": e.dataset}
            for attr in ("rgb", "mask", "annotations"):
                if getattr(e, attr) is not None:
                    rec[attr] = getattr(e, attr)
            out.append(rec)
        return out


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    records = json.loads(path.read_text())
    if not isinstance(records, list):
        raise CubeFormatError(f"{path}: manifest must be a JSON list")
    entries = []
    for rec in records:
        try:
            entries.append(ManifestEntry(**rec))
        except TypeError as exc:
            raise CubeFormatError(f"{path}: bad entry {rec!r}: {exc}") from None
    manifest = DatasetManifest(tuple(entries), root=path.parent)
    if check_files:
        manifest.check_files()
    return manifest


def save_manifest(path: str | os.PathLike, manifest: DatasetManifest) -> None:
    atomic_write_json(path, manifest.to_json())


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor-then-largest-remainder allocation of ``n`` items over ``ratios``.

    Remainder ties go to the earlier part.
    """
    ratios = [float(r) for r in ratios]
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive: {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    if n < len(ratios):
        raise ValueError(f"cannot split {n} entries into {len(ratios)} parts")
    exact = [n * r for r in ratios]
    counts = [int(np.floor(x + 1e-9)) for x in exact]
    remainders = [x - c for x, c in zip(exact, counts)]
    for i in sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_manifest(manifest: DatasetManifest, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> DatasetManifest:
    """Tag every entry train/val/test after a seeded shuffle."""
    counts = split_counts(len(manifest), ratios)
    order = np.random.default_rng(seed).permutation(len(manifest))
    tags = np.empty(len(manifest), dtype=object)
    start = 0
    for tag, c in zip(("train", "val", "test"), counts):
        tags[order[start : start + c]] = tag
        start += c
    entries = tuple(replace(e, split=str(t)) for e, t in zip(manifest.entries, tags))
    return DatasetManifest(entries, root=manifest.root)
