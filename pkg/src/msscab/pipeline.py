"""
Batch stages of the processing pipeline and their JSON configuration.

Stages talk to each other only through files under the output directory::

    calibration/coefficients.json      calibrate
    normalized/<scene>.raw             normalize
    features/<scene>.raw               features
    split/split.json                   split
    lda/{model,stats,confusion}.json   lda
    segnet/{model,history}.json        seg-train
    probmaps/<scene>.{raw,png}         seg-infer
    composed/<set>/<scene>.raw         compose
    augmented/<set>/<scene>__<op>.raw  augment
    eval/{report.json,report.csv}      evaluate
    logs/<stage>.json                  every stage

Every artifact is a pure function of the config and inputs, so reruns are
byte-identical.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import platform
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy
from PIL import Image
from scipy import ndimage

from . import __version__
from .bandselect import (
    LabeledSpectra,
    LdaModel,
    class_spectra_stats,
    fit_lda,
    lda_confusion,
    sample_pixels,
)
from .composer import (
    TABLE_SETS,
    FirstLayerWeights,
    augment,
    compose,
    parse_image_set,
    parse_op,
    stack_first_layer,
)
from .cube import (
    LEAF,
    SCAB,
    WAVELENGTHS,
    DatasetManifest,
    NormCoefficients,
    Patch,
    SpectralCube,
    atomic_write_bytes,
    atomic_write_json,
    compute_norm_coefficients,
    load_annotations,
    load_cube,
    load_manifest,
    load_mask,
    load_planes,
    load_rgb,
    normalize_cube,
    save_annotations,
    save_cube,
    save_planes,
    split_manifest,
)
from .detmetrics import (
    Detection,
    EvalReport,
    evaluate,
    format_predictions,
    ground_truth_from_annotations,
    parse_predictions,
    reports_to_csv,
)
from .pixelnet import PixelNetModel, TrainConfig, infer_map, init_model, train
from .ringconv import DEFAULT_ALPHA, DEFAULT_RINGS, FeatureCube, build_feature_cube, feature_names, make_bank

log = logging.getLogger(__name__)

STAGES = (
    "calibrate",
    "normalize",
    "features",
    "split",
    "lda",
    "seg-train",
    "seg-infer",
    "compose",
    "augment",
    "evaluate",
)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
@dataclass
class WhiteReference:
    cube: str
    patch: list | str  # [x0, y0, x1, y1] or a JSON region file


@dataclass
class LdaConfig:
    per_class: int = 45000
    heldout_per_class: int = 45000
    seed: int = 0


@dataclass
class SegnetConfig:
    per_class: int = 20000
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-2
    seed: int = 0
    input_dim: int = 40
    threshold: float | str = "val-f1"


@dataclass
class SplitConfig:
    ratios: list = field(default_factory=lambda: [0.70, 0.15, 0.15])
    seed: int = 0


@dataclass
class AugmentConfig:
    ops: list = field(default_factory=lambda: ["hflip", "vflip", "rotate:90"])
    image_sets: list = field(default_factory=lambda: ["RGB"])


@dataclass
class EvalConfig:
    min_conf: float = 0.1
    nms_iou: float = 0.2
    predictions: str | None = None
    min_component_px: int = 4


@dataclass
class PipelineConfig:
    manifest: str
    white: dict
    out: str = "out"
    kernel_alpha: int = DEFAULT_ALPHA
    kernels: list = field(default_factory=lambda: [list(p) for p in DEFAULT_RINGS])
    lda: LdaConfig = field(default_factory=LdaConfig)
    segnet: SegnetConfig = field(default_factory=SegnetConfig)
    image_sets: list = field(default_factory=lambda: list(TABLE_SETS))
    first_layer_weights: str | None = None
    split: SplitConfig = field(default_factory=SplitConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    jobs: int = 1
    base_dir: str = field(default=".", compare=False)

    _SECTIONS = {
        "lda": LdaConfig,
        "segnet": SegnetConfig,
        "split": SplitConfig,
        "augment": AugmentConfig,
        "evaluation": EvalConfig,
    }

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, sub in cls._SECTIONS.items():
            if key in d:
                sub_known = {f.name for f in dataclasses.fields(sub)}
                bad = set(d[key]) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                d[key] = sub(**d[key])
        for req in ("manifest", "white"):
            if req not in d:
                raise ConfigError(f"config needs {req!r}")
        d["base_dir"] = str(base_dir)
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        """SHA-256 of the config without the output location and worker count."""
        d = self.to_dict()
        d.pop("out")
        d.pop("jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_dir(self) -> Path:
        return self.path(self.out)

    def override_seed(self, seed: int) -> None:
        self.lda.seed = self.segnet.seed = self.split.seed = int(seed)

    def validate(self) -> None:
        if not self.path(self.manifest).exists():
            raise ConfigError(f"manifest {self.path(self.manifest)} not found")
        if not self.white:
            raise ConfigError("at least one white reference is required")
        for name, ref in self.white.items():
            ref = WhiteReference(**ref)
            if not self.path(ref.cube).exists():
                raise ConfigError(f"white cube for dataset {name!r} not found: {ref.cube}")
            if isinstance(ref.patch, str) and not self.path(ref.patch).exists():
                raise ConfigError(f"white patch file for dataset {name!r} not found: {ref.patch}")
        if abs(sum(self.split.ratios) - 1.0) > 1e-9 or any(r <= 0 for r in self.split.ratios):
            raise ConfigError(f"split ratios must be positive and sum to 1: {self.split.ratios}")
        ev = self.evaluation
        for name in ("min_conf", "nms_iou"):
            if not 0.0 <= getattr(ev, name) <= 1.0:
                raise ConfigError(f"evaluation.{name} must lie in [0, 1]")
        th = self.segnet.threshold
        if not (th == "val-f1" or (isinstance(th, (int, float)) and 0.0 <= th <= 1.0)):
            raise ConfigError("segnet.threshold must be a probability or 'val-f1'")
        if self.segnet.input_dim not in (8, 40):
            raise ConfigError("segnet.input_dim must be 40 (ring features) or 8 (raw spectrum)")
        for name in self.image_sets + self.augment.image_sets:
            parse_image_set(name)
        for op in self.augment.ops:
            if op != "mosaic":
                parse_op(op)
        if self.first_layer_weights and not self.path(self.first_layer_weights).exists():
            raise ConfigError(f"first-layer weights {self.first_layer_weights} not found")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _pmap(cfg: PipelineConfig, fn: Callable, items):
    items = list(items)
    if cfg.jobs == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        return list(pool.map(fn, items))


def _read_json(path: Path, stage: str, what: str):
    if not path.exists():
        raise StageError(stage, f"missing input {what}: {path} (run the producing stage first)")
    return json.loads(path.read_text())


def _manifest(cfg: PipelineConfig) -> DatasetManifest:
    return load_manifest(cfg.path(cfg.manifest))


def _split_tags(cfg: PipelineConfig) -> dict[str, str] | None:
    p = cfg.out_dir / "split" / "split.json"
    return json.loads(p.read_text())["assignment"] if p.exists() else None


def _scenes_in(cfg: PipelineConfig, manifest: DatasetManifest, tag: str) -> list:
    tags = _split_tags(cfg)
    if tags is None:
        return list(manifest.entries)
    return [e for e in manifest.entries if tags.get(e.scene_id) == tag]


def _need(entry, attr: str, stage: str, manifest: DatasetManifest) -> Path:
    p = manifest.resolve(getattr(entry, attr))
    if p is None:
        raise StageError(stage, f"scene {entry.scene_id} has no {attr} file")
    return p


def _norm_path(cfg, sid):
    return cfg.out_dir / "normalized" / f"{sid}.raw"


def _feat_path(cfg, sid):
    return cfg.out_dir / "features" / f"{sid}.raw"


def _prob_path(cfg, sid):
    return cfg.out_dir / "probmaps" / f"{sid}.raw"


def _load_existing(path: Path, stage: str):
    if not path.exists():
        raise StageError(stage, f"missing input {path} (run the producing stage first)")
    return load_planes(path)


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_log(cfg: PipelineConfig, stage: str, outputs: list[Path], extra: dict | None = None) -> None:
    out = cfg.out_dir
    record = {
        "stage": stage,
        "config_sha256": cfg.digest(),
        "seeds": {"lda": cfg.lda.seed, "segnet": cfg.segnet.seed, "split": cfg.split.seed},
        "versions": {
            "msscab": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": {str(p.relative_to(out)): sha256_file(p) for p in sorted(outputs)},
    }
    if extra:
        record.update(extra)
    atomic_write_json(out / "logs" / f"{stage}.json", record)


def _sidecar(p: Path) -> Path:
    return p.with_name(p.name + ".json")


def _with_sidecars(paths):
    out = []
    for p in paths:
        out += [p, _sidecar(p)]
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------
def _patch_of(cfg: PipelineConfig, ref: WhiteReference) -> Patch:
    if isinstance(ref.patch, str):
        return Patch.from_any(json.loads(cfg.path(ref.patch).read_text()))
    return Patch.from_any(ref.patch)


def stage_calibrate(cfg: PipelineConfig) -> list[Path]:
    coeffs = {}
    for name in sorted(cfg.white):
        ref = WhiteReference(**cfg.white[name])
        white = load_cube(cfg.path(ref.cube))
        coeffs[name] = compute_norm_coefficients(white, _patch_of(cfg, ref)).to_dict()
    path = cfg.out_dir / "calibration" / "coefficients.json"
    atomic_write_json(path, coeffs)
    return [path]


def stage_normalize(cfg: PipelineConfig) -> list[Path]:
    manifest = _manifest(cfg)
    coeffs = _read_json(cfg.out_dir / "calibration" / "coefficients.json", "normalize", "coefficients")
    missing = sorted({e.dataset for e in manifest.entries} - set(coeffs))
    if missing:
        raise StageError("normalize", f"no calibration coefficients for dataset(s) {missing}")

    def one(entry):
        cube = load_cube(manifest.resolve(entry.cube))
        norm = normalize_cube(cube, NormCoefficients.from_dict(coeffs[entry.dataset]))
        path = _norm_path(cfg, entry.scene_id)
        save_cube(path, norm)
        return path

    return _with_sidecars(_pmap(cfg, one, manifest.entries))


def _load_normalized(cfg: PipelineConfig, sid: str, stage: str) -> SpectralCube:
    path = _norm_path(cfg, sid)
    if not path.exists():
        raise StageError(stage, f"missing normalized cube for {sid} (run normalize first)")
    return load_cube(path)


def stage_features(cfg: PipelineConfig) -> list[Path]:
    manifest = _manifest(cfg)
    bank = make_bank(cfg.kernels, cfg.kernel_alpha)

    def one(entry):
        cube = _load_normalized(cfg, entry.scene_id, "features")
        fc = build_feature_cube(cube, bank)
        path = _feat_path(cfg, entry.scene_id)
        save_planes(
            path,
            fc.features,
            {
                "kind": "features",
                "channels": feature_names(bank),
                "kernels": [[k.beta, k.sigma] for k in bank],
                "alpha": cfg.kernel_alpha,
            },
        )
        return path

    return _with_sidecars(_pmap(cfg, one, manifest.entries))


def stage_split(cfg: PipelineConfig) -> list[Path]:
    manifest = _manifest(cfg)
    split = split_manifest(manifest, tuple(cfg.split.ratios), cfg.split.seed)
    assignment = {e.scene_id: e.split for e in split.entries}
    counts = {t: sum(1 for v in assignment.values() if v == t) for t in ("train", "val", "test")}
    path = cfg.out_dir / "split" / "split.json"
    atomic_write_json(
        path, {"ratios": list(cfg.split.ratios), "seed": cfg.split.seed, "counts": counts, "assignment": assignment}
    )
    return [path]


def _mask_sources(cfg, manifest, entries, stage, planes_of: Callable[[str], np.ndarray]):
    sources = []
    for e in entries:
        mask = load_mask(_need(e, "mask", stage, manifest))
        sources.append((e.scene_id, planes_of(e.scene_id), mask.labels))
    return sources


def _stats_json(stats: dict) -> dict:
    return {
        cls: {
            "n": int(v["n"]),
            "mean": {str(nm): float(m) for nm, m in zip(WAVELENGTHS, v["mean"])},
            "sd": {str(nm): float(s) for nm, s in zip(WAVELENGTHS, v["sd"])},
        }
        for cls, v in stats.items()
    }


def stage_lda(cfg: PipelineConfig) -> list[Path]:
    manifest = _manifest(cfg)
    out = cfg.out_dir / "lda"
    planes_of = lambda sid: _load_normalized(cfg, sid, "lda").planes  # noqa: E731
    train_sources = _mask_sources(cfg, manifest, _scenes_in(cfg, manifest, "train"), "lda", planes_of)
    data = sample_pixels(train_sources, cfg.lda.per_class, cfg.lda.seed)
    model = fit_lda(data)
    atomic_write_json(out / "model.json", model.to_json())

    stats = _stats_json(class_spectra_stats(data))
    atomic_write_json(out / "stats.json", stats)
    rows = ["class,statistic," + ",".join(str(nm) for nm in WAVELENGTHS)]
    for cls in ("leaf", "scab"):
        for stat in ("mean", "sd"):
            rows.append(f"{cls},{stat}," + ",".join(f"{stats[cls][stat][str(nm)]:.8f}" for nm in WAVELENGTHS))
    atomic_write_bytes(out / "stats.csv", ("\n".join(rows) + "\n").encode())

    test_entries = _scenes_in(cfg, manifest, "test") if _split_tags(cfg) else []
    heldout, provenance = None, "training-sample"
    if test_entries:
        test_sources = _mask_sources(cfg, manifest, test_entries, "lda", planes_of)
        avail = [int(sum((m == lbl).sum() for _, _, m in test_sources)) for lbl in (LEAF, SCAB)]
        n = min(cfg.lda.heldout_per_class, *avail)
        if n > 0:
            heldout = sample_pixels(test_sources, n, cfg.lda.seed + 1)
            provenance = "test-split"
    cm = lda_confusion(model, heldout if heldout is not None else data)
    atomic_write_json(
        out / "confusion.json",
        {"labels": ["leaf", "scab"], "matrix": cm.tolist(), "evaluated_on": provenance},
    )
    csv = "true\\pred,leaf,scab\n" + "".join(
        f"{name},{cm[i, 0]:.6f},{cm[i, 1]:.6f}\n" for i, name in enumerate(("leaf", "scab"))
    )
    atomic_write_bytes(out / "confusion.csv", csv.encode())
    return [out / n for n in ("model.json", "stats.json", "stats.csv", "confusion.json", "confusion.csv")]


def _segnet_input(cfg: PipelineConfig, sid: str, stage: str) -> np.ndarray:
    planes, _ = _load_existing(_feat_path(cfg, sid), stage)
    return planes if cfg.segnet.input_dim == planes.shape[0] else planes[: cfg.segnet.input_dim]


def _pixel_counts(prob: np.ndarray, labels: np.ndarray, threshold: float) -> np.ndarray:
    pred = prob >= threshold
    truth = labels == SCAB
    return np.array([(pred & truth).sum(), (pred & ~truth).sum(), (~pred & truth).sum()])


def _f1(counts) -> float:
    tp, fp, fn = (int(v) for v in counts)
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


def stage_seg_train(cfg: PipelineConfig) -> list[Path]:
    manifest = _manifest(cfg)
    sc = cfg.segnet
    entries = _scenes_in(cfg, manifest, "train")
    sources = _mask_sources(cfg, manifest, entries, "seg-train", lambda sid: _segnet_input(cfg, sid, "seg-train"))
    data = sample_pixels(sources, sc.per_class, sc.seed)
    hyper = TrainConfig(sc.epochs, sc.batch_size, sc.learning_rate, sc.seed)
    model, history = train(init_model(sc.seed, sc.input_dim), data.vectors, data.labels, hyper)

    # binarization threshold for the probability maps
    threshold, chosen_on = 0.5, "default"
    if isinstance(sc.threshold, (int, float)):
        threshold, chosen_on = float(sc.threshold), "config"
    else:
        val = [e for e in _scenes_in(cfg, manifest, "val") if e.mask] if _split_tags(cfg) else []
        if val:
            totals = {t: np.zeros(3, dtype=np.int64) for t in THRESHOLD_GRID}
            for e in val:
                prob = infer_map(model, _segnet_input(cfg, e.scene_id, "seg-train"))
                labels = load_mask(manifest.resolve(e.mask)).labels
                for t in THRESHOLD_GRID:
                    totals[t] += _pixel_counts(prob, labels, t)
            threshold = max(THRESHOLD_GRID, key=lambda t: (_f1(totals[t]), -abs(t - 0.5)))
            chosen_on = "val-f1"
    meta = dict(model.metadata, threshold=threshold, threshold_chosen_on=chosen_on)
    model = dataclasses.replace(model, metadata=meta)

    out = cfg.out_dir / "segnet"
    atomic_write_json(out / "model.json", model.to_json())
    atomic_write_json(out / "history.json", {"epoch_loss": history})
    return [out / "model.json", out / "history.json"]


def _load_segnet(cfg: PipelineConfig, stage: str) -> PixelNetModel:
    return PixelNetModel.from_json(_read_json(cfg.out_dir / "segnet" / "model.json", stage, "segnet model"))


def stage_seg_infer(cfg: PipelineConfig) -> list[Path]:
    manifest = _manifest(cfg)
    model = _load_segnet(cfg, "seg-infer")
    threshold = float(model.metadata.get("threshold", 0.5))

    def one(entry):
        prob = infer_map(model, _segnet_input(cfg, entry.scene_id, "seg-infer"))
        path = _prob_path(cfg, entry.scene_id)
        save_planes(path, prob[None], {"kind": "probability", "channels": ["scab"]})
        png = path.with_suffix(".png")
        import io

        buf = io.BytesIO()
        Image.fromarray(np.round(prob * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
        atomic_write_bytes(png, buf.getvalue())
        return path

    paths = _pmap(cfg, one, manifest.entries)
    outputs = _with_sidecars(paths) + [p.with_suffix(".png") for p in paths]

    per_split = {}
    tags = _split_tags(cfg) or {}
    for tag in ("train", "val", "test", "unassigned"):
        entries = [e for e in manifest.entries if tags.get(e.scene_id, "unassigned") == tag and e.mask]
        if not entries:
            continue
        counts = np.zeros(3, dtype=np.int64)
        for e in entries:
            prob, _ = load_planes(_prob_path(cfg, e.scene_id))
            counts += _pixel_counts(prob[0], load_mask(manifest.resolve(e.mask)).labels, threshold)
        tp, fp, fn = (int(v) for v in counts)
        per_split[tag] = {
            "scenes": len(entries),
            "tp": tp,
            "fp": fp,
            "fn": fn,
            "precision": tp / (tp + fp) if tp + fp else 0.0,
            "recall": tp / (tp + fn) if tp + fn else 0.0,
            "f1": _f1(counts),
        }
    metrics = cfg.out_dir / "probmaps" / "pixel_metrics.json"
    atomic_write_json(metrics, {"threshold": threshold, "splits": per_split})
    return outputs + [metrics]


def stage_compose(cfg: PipelineConfig) -> list[Path]:
    manifest = _manifest(cfg)
    specs = [parse_image_set(n) for n in cfg.image_sets]
    base = None
    if cfg.first_layer_weights:
        base = FirstLayerWeights.from_json(json.loads(cfg.path(cfg.first_layer_weights).read_text()))

    def one(entry):
        cube = _load_normalized(cfg, entry.scene_id, "compose")
        prob = None
        if _prob_path(cfg, entry.scene_id).exists():
            prob = load_planes(_prob_path(cfg, entry.scene_id))[0][0]
        rgb = load_rgb(manifest.resolve(entry.rgb)) if entry.rgb else None
        paths = []
        for spec in specs:
            try:
                img = compose(spec, cube, prob, rgb, scene_id=entry.scene_id)
            except ValueError as exc:
                raise StageError("compose", f"scene {entry.scene_id}, set {spec.name}: {exc}") from None
            path = cfg.out_dir / "composed" / _safe(spec.name) / f"{entry.scene_id}.raw"
            save_planes(path, img.channels, {"kind": "composed", "image_set": spec.name, "channels": list(img.channel_names)})
            paths += [path, _sidecar(path)]
            if img.channels.shape[0] == 3:
                _save_png(path.with_suffix(".png"), img.channels)
                paths.append(path.with_suffix(".png"))
        return paths

    outputs = [p for group in _pmap(cfg, one, manifest.entries) for p in group]
    if base is not None:
        for spec in specs:
            if spec.n_channels % 3 == 0:
                stacked = stack_first_layer(base, spec.n_channels // 3)
                path = cfg.out_dir / "composed" / _safe(spec.name) / "first_layer.json"
                atomic_write_json(path, stacked.to_json())
                outputs.append(path)
    return outputs


def _save_png(path: Path, channels: np.ndarray) -> None:
    import io

    arr = np.round(np.moveaxis(np.clip(channels, 0, 1), 0, -1) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def _load_composed(cfg: PipelineConfig, set_name: str, sid: str):
    from .composer import ComposedImage

    planes, meta = _load_existing(cfg.out_dir / "composed" / _safe(set_name) / f"{sid}.raw", "augment")
    return ComposedImage(planes, set_name, sid, tuple(meta.get("channels", ())))


def stage_augment(cfg: PipelineConfig) -> list[Path]:
    manifest = _manifest(cfg)
    entries = sorted(
        (e for e in _scenes_in(cfg, manifest, "train") if e.annotations), key=lambda e: e.scene_id
    )
    outputs = []

    def write(set_name, tag, img, boxes):
        path = cfg.out_dir / "augmented" / _safe(set_name) / f"{tag}.raw"
        save_planes(path, img.channels, {"kind": "composed", "image_set": set_name, "channels": list(img.channel_names)})
        save_annotations(path.with_suffix(".txt"), boxes)
        outputs.extend([path, _sidecar(path), path.with_suffix(".txt")])

    for set_name in cfg.augment.image_sets:
        items = [
            (_load_composed(cfg, set_name, e.scene_id), load_annotations(manifest.resolve(e.annotations)))
            for e in entries
        ]
        for op in cfg.augment.ops:
            if op == "mosaic":
                for g in range(len(items) // 4):
                    img, boxes = augment(None, None, ("mosaic", items[4 * g : 4 * g + 4]))
                    write(set_name, f"mosaic{g:03d}", img, boxes)
                continue
            for e, (img, boxes) in zip(entries, items):
                new_img, new_boxes = augment(img, boxes, op)
                write(set_name, f"{e.scene_id}__{_safe(op)}", new_img, new_boxes)
    return outputs


def boxes_from_probability_map(
    image_id: str, prob: np.ndarray, threshold: float, min_pixels: int = 1
) -> list[Detection]:
    """One detection per 8-connected component of ``prob >= threshold``.

    The box is the component's pixel-edge bounding box and the confidence its
    mean probability.
    """
    labels, n = ndimage.label(prob >= threshold, structure=np.ones((3, 3)))
    dets = []
    for i, sl in enumerate(ndimage.find_objects(labels), 1):
        if sl is None:
            continue
        comp = labels[sl] == i
        if comp.sum() < min_pixels:
            continue
        conf = float(prob[sl][comp].mean())
        dets.append(Detection(image_id, 0, (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop), min(conf, 1.0)))
    return dets


def stage_evaluate(cfg: PipelineConfig) -> list[Path]:
    manifest = _manifest(cfg)
    ev = cfg.evaluation
    entries = [e for e in _scenes_in(cfg, manifest, "test") if e.annotations]
    if not entries:
        raise StageError("evaluate", "no test scenes with annotations")
    out = cfg.out_dir / "eval"
    gts = []
    for e in entries:
        cube_meta = json.loads(_sidecar(manifest.resolve(e.cube)).read_text())
        boxes = load_annotations(manifest.resolve(e.annotations))
        gts += ground_truth_from_annotations(e.scene_id, boxes, cube_meta["width"], cube_meta["height"])

    if ev.predictions:
        dets = parse_predictions(cfg.path(ev.predictions).read_text())
        source = "predictions-file"
    else:
        model = _load_segnet(cfg, "evaluate")
        threshold = float(model.metadata.get("threshold", 0.5))
        dets = []
        for e in entries:
            prob, _ = _load_existing(_prob_path(cfg, e.scene_id), "evaluate")
            dets += boxes_from_probability_map(e.scene_id, prob[0], threshold, ev.min_component_px)
        source = "probability-map-components"
    atomic_write_bytes(out / "predictions.txt", format_predictions(dets).encode("ascii"))

    report = evaluate(dets, gts, min_conf=ev.min_conf, nms_iou=ev.nms_iou, name="SegN-components")
    atomic_write_json(out / "report.json", dict(report.to_json(), source=source, scenes=len(entries)))
    atomic_write_bytes(out / "report.csv", reports_to_csv([report]).encode())
    return [out / "predictions.txt", out / "report.json", out / "report.csv"]


_STAGE_FUNCS = {
    "calibrate": stage_calibrate,
    "normalize": stage_normalize,
    "features": stage_features,
    "split": stage_split,
    "lda": stage_lda,
    "seg-train": stage_seg_train,
    "seg-infer": stage_seg_infer,
    "compose": stage_compose,
    "augment": stage_augment,
    "evaluate": stage_evaluate,
}


def run_stage(stage: str, cfg: PipelineConfig) -> list[Path]:
    """Run one stage, write its log and return the artifacts it produced."""
    if stage not in _STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
    cfg.validate()
    log.info("running stage %s", stage)
    try:
        outputs = _STAGE_FUNCS[stage](cfg)
    except StageError:
        raise
    except (ValueError, OSError, KeyError, np.linalg.LinAlgError) as exc:
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    _write_log(cfg, stage, outputs)
    return outputs


def run_pipeline(cfg: PipelineConfig, stages=STAGES) -> dict[str, list[Path]]:
    return {s: run_stage(s, cfg) for s in stages}


def load_report(path: str | Path) -> EvalReport:
    rep = EvalReport.from_json(json.loads(Path(path).read_text()))
    rep.validate()
    return rep


def lda_model(cfg: PipelineConfig) -> LdaModel:
    return LdaModel.from_json(json.loads((cfg.out_dir / "lda" / "model.json").read_text()))


def synthetic_config(data_dir: str | Path, out: str = "out", **overrides) -> dict:
    """Config dict for a dataset written by ``gen_synthetic`` into ``data_dir``."""
    data_dir = Path(data_dir)
    cfg = {
        "manifest": str(data_dir / "manifest.json"),
        "white": {"default": {"cube": str(data_dir / "white.raw"), "patch": str(data_dir / "white_patch.json")}},
        "out": out,
        "lda": {"per_class": 5000, "heldout_per_class": 2000, "seed": 0},
        "segnet": {"per_class": 5000, "epochs": 100, "batch_size": 256, "learning_rate": 1e-2, "seed": 0},
    }
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = v
    return cfg
