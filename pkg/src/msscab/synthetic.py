"""
Synthetic orchard-like scenes for desk-scale runs of the pipeline.

Leaf background with elliptical scab lesions. Every pixel's reflectance is
drawn independently per band from the class mean and SD in
``data/class_spectra.json``; the raw cube is that reflectance seen through
per-band camera gains, so normalizing with a white reference recovers it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .cube import (
    LEAF,
    SCAB,
    WAVELENGTHS,
    BoxAnnotation,
    DatasetManifest,
    ManifestEntry,
    Patch,
    PixelMask,
    SpectralCube,
    atomic_write_json,
    save_annotations,
    save_cube,
    save_manifest,
    save_mask,
    save_rgb,
)


def load_class_spectra() -> dict:
    text = resources.files("msscab").joinpath("data/class_spectra.json").read_text()
    return json.loads(text)


def _defaults(key: str, stat: str) -> tuple[float, ...]:
    return tuple(load_class_spectra()[key][stat])


# camera response per band; uneven on purpose so normalization has work to do
DEFAULT_GAINS = (0.55, 0.7, 0.85, 0.95, 1.1, 1.3, 1.4, 1.2)
PSEUDO_RGB_BANDS = (658, 545, 579)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    height: int = 128
    width: int = 128
    leaf_mean: tuple[float, ...] = field(default_factory=lambda: _defaults("leaf", "mean"))
    leaf_sd: tuple[float, ...] = field(default_factory=lambda: _defaults("leaf", "sd"))
    scab_mean: tuple[float, ...] = field(default_factory=lambda: _defaults("scab", "mean"))
    scab_sd: tuple[float, ...] = field(default_factory=lambda: _defaults("scab", "sd"))
    sd_scale: float = 1.0
    band_sd_scale: tuple[float, ...] = (1.0,) * len(WAVELENGTHS)
    lesion_count: tuple[int, int] = (1, 4)
    lesion_axes: tuple[float, float] = (4.0, 10.0)
    gains: tuple[float, ...] = DEFAULT_GAINS
    white_level: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name in ("leaf_mean", "leaf_sd", "scab_mean", "scab_sd", "band_sd_scale", "gains"):
            if len(getattr(self, name)) != len(WAVELENGTHS):
                raise ValueError(f"{name} needs {len(WAVELENGTHS)} values")
        if min(self.leaf_sd + self.scab_sd + self.band_sd_scale) < 0 or self.sd_scale < 0:
            raise ValueError("standard deviations must be >= 0")
        if min(self.gains) <= 0:
            raise ValueError("gains must be positive")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad lesion count range {self.lesion_count}")
        amin, amax = self.lesion_axes
        if amin <= 0 or amax < amin:
            raise ValueError(f"bad lesion axis range {self.lesion_axes}")
        if hi > 0 and 2 * amax + 2 > min(self.height, self.width):
            raise ValueError(f"lesions with semi-axis {amax} do not fit a {self.width}x{self.height} image")

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSceneSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class Lesion:
    cx: float
    cy: float
    a: float
    b: float
    angle: float

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = (x - self.cx) * c + (y - self.cy) * s
        v = -(x - self.cx) * s + (y - self.cy) * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0

    def bounds(self) -> tuple[float, float, float, float]:
        """Analytic axis-aligned bounds (x1, y1, x2, y2) of the ellipse."""
        c, s = np.cos(self.angle), np.sin(self.angle)
        hx = np.hypot(self.a * c, self.b * s)
        hy = np.hypot(self.a * s, self.b * c)
        return self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy


@dataclass
class SyntheticScene:
    reflectance: np.ndarray
    mask: PixelMask
    lesions: list[Lesion]
    boxes: list[BoxAnnotation]
    raw: SpectralCube
    rgb: np.ndarray


def draw_lesions(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list[Lesion]:
    n = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    out = []
    for _ in range(n):
        a, b = rng.uniform(*spec.lesion_axes, size=2)
        margin = max(a, b) + 1
        cx = rng.uniform(margin, spec.width - margin)
        cy = rng.uniform(margin, spec.height - margin)
        out.append(Lesion(float(cx), float(cy), float(a), float(b), float(rng.uniform(0, np.pi))))
    return out


def render_scene(spec: SyntheticSceneSpec, lesions: list[Lesion], rng: np.random.Generator) -> SyntheticScene:
    h, w = spec.height, spec.width
    # pixel centers
    y, x = np.mgrid[0:h, 0:w] + 0.5
    labels = np.full((h, w), LEAF, dtype=np.uint8)
    boxes = []
    for lesion in lesions:
        inside = lesion.contains(x, y)
        if not inside.any():
            continue
        labels[inside] = SCAB
        rows, cols = np.nonzero(inside)
        boxes.append(
            BoxAnnotation.from_pixels(0, cols.min(), rows.min(), cols.max() + 1, rows.max() + 1, w, h)
        )
    cls_idx = np.where(labels == SCAB, 1, 0)
    means = np.stack([np.array(spec.leaf_mean), np.array(spec.scab_mean)])
    sds = np.stack([np.array(spec.leaf_sd), np.array(spec.scab_sd)]) * spec.sd_scale * np.array(spec.band_sd_scale)
    z = rng.standard_normal((len(WAVELENGTHS), h, w))
    refl = means[cls_idx].transpose(2, 0, 1) + sds[cls_idx].transpose(2, 0, 1) * z
    refl = np.clip(refl, 0.0, None)

    gains = np.array(spec.gains)
    planes = refl * (gains / gains.mean())[:, None, None]
    raw = SpectralCube(planes=planes, pan=planes.mean(axis=0))

    rgb_idx = [WAVELENGTHS.index(nm) for nm in PSEUDO_RGB_BANDS]
    rgb = np.clip(refl[rgb_idx] / max(spec.leaf_mean[i] + 3 * spec.leaf_sd[i] for i in rgb_idx), 0.0, 1.0)
    return SyntheticScene(refl, PixelMask(labels), lesions, boxes, raw, rgb)


def white_cube(spec: SyntheticSceneSpec) -> SpectralCube:
    """Flat white target imaged through the same per-band gains."""
    gains = np.array(spec.gains)
    planes = np.broadcast_to((gains / gains.mean() * spec.white_level)[:, None, None], (8, spec.height, spec.width))
    return SpectralCube(planes=planes, pan=planes.mean(axis=0))


def generate_scenes(spec: SyntheticSceneSpec, n_scenes: int) -> list[SyntheticScene]:
    children = np.random.SeedSequence(spec.seed).spawn(n_scenes)
    scenes = []
    for child in children:
        rng = np.random.default_rng(child)
        scenes.append(render_scene(spec, draw_lesions(spec, rng), rng))
    return scenes


def default_patch(spec: SyntheticSceneSpec) -> Patch:
    qh, qw = spec.height // 4, spec.width // 4
    return Patch(qw, qh, spec.width - qw, spec.height - qh)


def gen_synthetic(spec: SyntheticSceneSpec, n_scenes: int, out_dir: str | Path) -> DatasetManifest:
    """Write cubes, masks, pseudo-RGB images, box files, white reference and manifest.

    Layout under ``out_dir``: ``scenes/<id>.raw`` (+sidecar), ``masks/<id>.png``,
    ``rgb/<id>.png``, ``labels/<id>.txt``, ``white.raw``, ``white_patch.json``,
    ``manifest.json`` and ``generator.json``.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    out = Path(out_dir)
    entries = []
    for i, scene in enumerate(generate_scenes(spec, n_scenes)):
        sid = f"scene{i:03d}"
        save_cube(out / "scenes" / f"{sid}.raw", scene.raw)
        save_mask(out / "masks" / f"{sid}.png", scene.mask)
        save_rgb(out / "rgb" / f"{sid}.png", scene.rgb)
        save_annotations(out / "labels" / f"{sid}.txt", scene.boxes)
        entries.append(
            ManifestEntry(
                scene_id=sid,
                cube=f"scenes/{sid}.raw",
                rgb=f"rgb/{sid}.png",
                mask=f"masks/{sid}.png",
                annotations=f"labels/{sid}.txt",
            )
        )
    save_cube(out / "white.raw", white_cube(spec))
    atomic_write_json(out / "white_patch.json", default_patch(spec).as_dict())
    atomic_write_json(out / "generator.json", {"n_scenes": n_scenes, "spec": spec.to_json()})
    manifest = DatasetManifest(tuple(entries), root=out)
    save_manifest(out / "manifest.json", manifest)
    return manifest
