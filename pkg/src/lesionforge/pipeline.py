"""Staged pipeline: manifest ingestion, cached artifact stages, CV runs.

Stages (preprocess, segment, content-image, transfer, features, decompose,
classify, report) write content-hashed artifacts into a cache directory, so
an unchanged rerun recomputes nothing and deleting one artifact recomputes
only that artifact plus downstream aggregates.

Shape descriptors are always computed from the ORIGINAL preprocessed
images: the texture re-registration deliberately destroys shape and color
layout, so the descriptor stage never reads transfer outputs.

Cross-validated runs rebuild the content image and the latent basis inside
each training fold by default; ``content_global=True`` reproduces the
single-content-image shortcut (one content image over all lesions) at the
cost of mild train/test leakage.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
try:
    import tomllib
except ModuleNotFoundError:              # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import abcd, cp, image, masks, models, transfer, vgg

__all__ = [
    "ManifestEntry",
    "ManifestError",
    "StageError",
    "RunConfig",
    "ArtifactCache",
    "read_manifest",
    "load_config",
    "grid_cells",
    "run_pipeline",
    "run_grid",
]

GRID_STYLE_LAYERS = (
    ("relu1_1",),
    ("relu1_1", "relu2_1"),
    ("relu1_1", "relu2_1", "relu3_1"),
    ("relu1_1", "relu2_1", "relu3_1", "relu4_1"),
    ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"),
)
GRID_CONTENT_LAYERS = ("relu1_2", "relu2_2", "relu3_2", "relu4_2", "relu5_2")
GRID_RATIOS = (1.0, 10.0, 100.0, 1000.0, 10000.0)
GRID_TV_WEIGHTS = (1.0, 10.0, 100.0)


class ManifestError(ValueError):
    pass


class StageError(RuntimeError):
    """A stage's upstream artifact is missing; the message names the stage."""


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: Path
    label: int
    mask: Path | None = None


def read_manifest(path) -> list[ManifestEntry]:
    """Parse and validate an ``id,path,label[,mask]`` CSV manifest.

    Paths are resolved relative to the manifest file.  Ids must be unique,
    labels must form a two-class set coded 0/1, and every referenced file
    must exist.
    """
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if not {"id", "path", "label"} <= set(fields):
            raise ManifestError(f"manifest needs id,path,label columns, got {fields}")
        for row_no, row in enumerate(reader, start=2):
            mask_cell = (row.get("mask") or "").strip()
            try:
                label = int(row["label"])
            except ValueError:
                raise ManifestError(
                    f"line {row_no}: label {row['label']!r} is not an integer"
                ) from None
            if label not in (0, 1):
                raise ManifestError(f"line {row_no}: label must be 0 or 1, got {label}")
            entries.append(ManifestEntry(
                id=row["id"].strip(),
                path=(base / row["path"].strip()),
                label=label,
                mask=(base / mask_cell) if mask_cell else None,
            ))
    if not entries:
        raise ManifestError("empty manifest")
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise ManifestError(f"duplicate id {dup!r}")
    labels = {e.label for e in entries}
    if labels != {0, 1}:
        raise ManifestError(f"manifest must contain both labels 0 and 1, got {sorted(labels)}")
    for e in entries:
        if not e.path.exists():
            raise ManifestError(f"id {e.id}: missing image file {e.path}")
        if e.mask is not None and not e.mask.exists():
            raise ManifestError(f"id {e.id}: missing mask file {e.mask}")
    return entries


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    image_size: int = 64
    hair_removal: bool = True
    color_constancy: bool = True
    style_layers: tuple[str, ...] = GRID_STYLE_LAYERS[-1]
    content_layer: str = "relu4_2"
    beta: float = 1000.0
    gamma: float = 1.0
    max_iters: int = 500
    rel_tol: float = 5e-4
    learning_rate: float = 0.02
    layer_weights: dict | None = None       # per-style-layer weights; None = uniform
    r_cp: int = 8
    classifier: str = "logistic"            # "logistic" | "svm"
    classifier_params: dict = field(default_factory=dict)
    use_style_features: bool = True
    include_abcd: bool = True
    n_splits: int = 5
    n_repeats: int = 10
    seed: int = 0
    weights: str | None = None              # VGGW1 path; None = seeded random net
    base_width: int = 64
    net_seed: int = 0
    content_global: bool = False
    cache_dir: str | None = None
    test_mode: bool = False
    allow_custom: bool = False

    def __post_init__(self):
        if self.classifier not in ("logistic", "svm"):
            raise ValueError(f"unknown classifier {self.classifier!r}")
        # random forest appears in the published comparison grid but is
        # deliberately unimplemented; reserve the name so configs fail loudly
        if not self.allow_custom:
            _check_grid_axes(self)

    def shrunk(self) -> "RunConfig":
        """Test-mode variant: small images, tiny net, few iterations."""
        if not self.test_mode:
            return self
        return replace(
            self,
            image_size=min(self.image_size, 32),
            max_iters=min(self.max_iters, 20),
            n_repeats=min(self.n_repeats, 1),
            base_width=min(self.base_width, 4),
            hair_removal=False,
        )

    def transfer_config(self) -> transfer.TransferConfig:
        return transfer.TransferConfig(
            style_layers=tuple(self.style_layers),
            content_layer=self.content_layer,
            alpha=1.0,
            beta=self.beta,
            gamma=self.gamma,
            max_iters=self.max_iters,
            rel_tol=self.rel_tol,
            learning_rate=self.learning_rate,
            layer_weights=dict(self.layer_weights) if self.layer_weights else None,
        )


def _check_grid_axes(cfg: RunConfig):
    if tuple(cfg.style_layers) not in GRID_STYLE_LAYERS:
        raise ValueError(
            f"style_layers {cfg.style_layers} outside the tuning grid; "
            "set allow_custom to override"
        )
    if cfg.content_layer not in GRID_CONTENT_LAYERS:
        raise ValueError(f"content_layer {cfg.content_layer!r} outside the tuning grid")
    if cfg.beta not in GRID_RATIOS:
        raise ValueError(f"style/content ratio {cfg.beta} outside the tuning grid")
    if cfg.gamma not in GRID_TV_WEIGHTS:
        raise ValueError(f"TV weight {cfg.gamma} outside the tuning grid")


def load_config(path) -> RunConfig:
    """Read a JSON or TOML config file into a :class:`RunConfig`."""
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
    elif path.suffix == ".toml":
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    else:
        raise ValueError(f"config must be .json or .toml, got {path.name}")
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "style_layers" in doc:
        doc["style_layers"] = tuple(doc["style_layers"])
    for key in ("beta", "gamma", "rel_tol", "learning_rate"):
        if key in doc:
            doc[key] = float(doc[key])
    return RunConfig(**doc)


def resolve_cache_dir(config: RunConfig, run_dir: Path) -> Path:
    env = os.environ.get("LESIONFORGE_CACHE")
    if env:
        return Path(env)
    if config.cache_dir:
        return Path(config.cache_dir)
    return run_dir / "cache"


# ---------------------------------------------------------------------------
# Content-hashed artifact cache
# ---------------------------------------------------------------------------

def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, bytes):
            h.update(p)
        else:
            h.update(str(p).encode())
        h.update(b"\x00")
    return h.hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class ArtifactCache:
    """Content-addressed array store with atomic writes.

    ``get_or_compute(key, fn)`` loads the artifact if present, otherwise
    computes, writes to a temp file, and renames into place.  ``misses``
    records every key computed since construction, which makes recompute
    behavior observable.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.misses: list[str] = []
        self.hits: list[str] = []

    def path_for(self, key: str) -> Path:
        return self.root / f"{key}.npy"

    def get_or_compute(self, key: str, fn) -> np.ndarray:
        path = self.path_for(key)
        if path.exists():
            self.hits.append(key)
            return np.load(path)
        value = np.asarray(fn())
        self.misses.append(key)
        tmp = path.with_name(path.name + f".tmp{os.getpid()}")
        with open(tmp, "wb") as fh:
            np.save(fh, value)
        os.replace(tmp, path)
        return value

    def require(self, key: str, stage: str) -> np.ndarray:
        path = self.path_for(key)
        if not path.exists():
            raise StageError(f"missing upstream artifact; run the {stage!r} stage first")
        self.hits.append(key)
        return np.load(path)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

def build_net(config: RunConfig) -> tuple[vgg.VggNetwork, str]:
    """Load the VGGW1 weights, or build a seeded random net; returns a digest
    that identifies the weights for cache keys."""
    if config.weights:
        net = vgg.load_weights(config.weights)
        return net, file_digest(config.weights)
    net = vgg.random_network(seed=config.net_seed, base_width=config.base_width)
    return net, f"random:{config.net_seed}:{config.base_width}"


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def preprocess_key(entry: ManifestEntry, config: RunConfig) -> str:
    return _digest("preprocess", file_digest(entry.path), config.image_size,
                   config.hair_removal, config.color_constancy)


def stage_preprocess(entries, config: RunConfig, cache: ArtifactCache) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        def compute(e=e):
            img = image.load_image(e.path)
            img = image.resize_bilinear(img, config.image_size, config.image_size)
            if config.hair_removal:
                img = image.remove_hair(img)
            if config.color_constancy:
                img = image.shades_of_gray(img)
            return img
        out[e.id] = cache.get_or_compute(preprocess_key(e, config), compute)
    return out


def segment_key(entry: ManifestEntry, config: RunConfig) -> str:
    if entry.mask is not None:
        return _digest("segment", file_digest(entry.mask), config.image_size)
    return _digest("segment", preprocess_key(entry, config))


def stage_segment(entries, config: RunConfig, cache: ArtifactCache,
                  preprocessed: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        def compute(e=e):
            if e.mask is not None:
                m = masks.load_mask(e.mask)
                if m.shape != (config.image_size, config.image_size):
                    m = image.resize_bilinear(
                        m.astype(np.float64)[:, :, None],
                        config.image_size, config.image_size,
                    )[:, :, 0] >= 0.5
            else:
                gray = preprocessed[e.id].mean(axis=2)
                m = masks.otsu_threshold(gray)
            return masks.clean_mask(m)
        out[e.id] = cache.get_or_compute(segment_key(e, config), compute).astype(bool)
    return out


def content_key(entries, config: RunConfig) -> str:
    keys = sorted(preprocess_key(e, config) for e in entries)
    return _digest("content", *keys)


def stage_content_image(entries, config: RunConfig, cache: ArtifactCache,
                        preprocessed: dict[str, np.ndarray]) -> np.ndarray:
    return cache.get_or_compute(
        content_key(entries, config),
        lambda: image.build_content_image([preprocessed[e.id] for e in entries]),
    )


def transfer_key(entry: ManifestEntry, config: RunConfig, ckey: str, net_digest: str) -> str:
    return _digest(
        "transfer", preprocess_key(entry, config), segment_key(entry, config),
        ckey, net_digest, json.dumps(sorted(config.transfer_config().__dict__.items(),
                                            key=str), default=str),
    )


def stage_transfer(entries, config: RunConfig, cache: ArtifactCache,
                   preprocessed, segmented, content_img, net, net_digest
                   ) -> dict[str, np.ndarray]:
    tc = config.transfer_config()
    ckey = content_key(entries, config)
    out = {}
    for e in entries:
        def compute(e=e):
            pyramid = masks.build_mask_pyramid(segmented[e.id], tc.style_layers)
            res = transfer.run_transfer(preprocessed[e.id], content_img, pyramid, net, tc)
            return res.image
        out[e.id] = cache.get_or_compute(transfer_key(e, config, ckey, net_digest), compute)
    return out


def features_key(entry: ManifestEntry, config: RunConfig) -> str:
    return _digest("features", preprocess_key(entry, config), segment_key(entry, config))


def stage_features(entries, config: RunConfig, cache: ArtifactCache,
                   preprocessed, segmented) -> dict[str, np.ndarray]:
    # always from the original preprocessed image, never the transfer output
    out = {}
    for e in entries:
        out[e.id] = cache.get_or_compute(
            features_key(e, config),
            lambda e=e: abcd.assemble_abcd(preprocessed[e.id], segmented[e.id]),
        )
    return out


# ---------------------------------------------------------------------------
# Classification assembly
# ---------------------------------------------------------------------------

def _fit_classifier(config: RunConfig):
    params = dict(config.classifier_params)
    if config.classifier == "logistic":
        params.setdefault("alpha", 0.5)
        params.setdefault("seed", config.seed)
        return lambda x, y: models.fit_elasticnet_logistic(x, y, **params)
    params.setdefault("kernel", "rbf")
    params.setdefault("cost", 1.0)
    params.setdefault("gamma", 1.0)
    params.setdefault("seed", config.seed)
    return lambda x, y: models.fit_svm(x, y, **params)


def _make_feature_builder(entries, config, cache, preprocessed, segmented,
                          abcd_feats, net, net_digest):
    """Per-fold design-matrix builder for :func:`models.cross_validate`.

    The latent basis is always refit on the training fold.  With
    ``content_global`` the transferred images come from the shared content
    image; otherwise the content image and every transfer are rebuilt from
    the training fold alone.
    """
    def images_for(fold_entries, all_entries):
        if not config.use_style_features:
            return {e.id: preprocessed[e.id] for e in all_entries}
        if config.content_global:
            content_img = stage_content_image(entries, config, cache, preprocessed)
            return stage_transfer(entries, config, cache, preprocessed, segmented,
                                  content_img, net, net_digest)
        content_img = stage_content_image(fold_entries, config, cache, preprocessed)
        return stage_transfer(all_entries, config, cache, preprocessed, segmented,
                              content_img, net, net_digest)

    def build(train_idx, test_idx):
        train_entries = [entries[i] for i in train_idx]
        test_entries = [entries[i] for i in test_idx]
        imgs = images_for(train_entries, entries)
        train_tensor = cp.stack_images([imgs[e.id] for e in train_entries])
        test_tensor = cp.stack_images([imgs[e.id] for e in test_entries])
        model = cp.cp_als(train_tensor, rank=config.r_cp, seed=config.seed)
        x_tr = model.a
        x_te = cp.project_test(test_tensor, model)
        if config.include_abcd:
            x_tr = np.hstack([x_tr, np.stack([abcd_feats[e.id] for e in train_entries])])
            x_te = np.hstack([x_te, np.stack([abcd_feats[e.id] for e in test_entries])])
        mean, sd = models.standardize_fit(x_tr)
        return (models.standardize_apply(x_tr, mean, sd),
                models.standardize_apply(x_te, mean, sd))

    return build


def write_metrics_csv(report: models.CvReport, path) -> None:
    """Deterministic per-fold metric table; floats printed at fixed width."""
    lines = ["repeat,fold,auc,accuracy,sensitivity,specificity"]
    for f in report.folds:
        lines.append(
            f"{f.repeat},{f.fold},{f.auc:.10f},{f.accuracy:.10f},"
            f"{f.sensitivity:.10f},{f.specificity:.10f}"
        )
    lines.append(f"mean,,{report.mean_auc:.10f},{report.mean_accuracy:.10f},,")
    Path(path).write_text("\n".join(lines) + "\n")


def write_report_text(report: models.CvReport, config: RunConfig, path) -> None:
    folds = report.folds
    def ms(vals):
        return f"{np.mean(vals):.4f} ({np.std(vals):.4f})"
    buf = io.StringIO()
    buf.write(f"model: {config.classifier}  "
              f"features: {'style-cp' if config.use_style_features else 'raw-cp'}"
              f"{'+abcd' if config.include_abcd else ''}  r={config.r_cp}\n")
    buf.write(f"{'metric':<14}{'mean (sd)':<20}\n")
    for name in ("auc", "accuracy", "sensitivity", "specificity"):
        buf.write(f"{name:<14}{ms([getattr(f, name) for f in folds]):<20}\n")
    Path(path).write_text(buf.getvalue())


def run_classification(entries, config: RunConfig, cache: ArtifactCache,
                       preprocessed, segmented, abcd_feats, net, net_digest
                       ) -> models.CvReport:
    y = np.array([e.label for e in entries])
    builder = _make_feature_builder(entries, config, cache, preprocessed,
                                    segmented, abcd_feats, net, net_digest)
    return models.cross_validate(
        y, builder, _fit_classifier(config),
        n_splits=config.n_splits, n_repeats=config.n_repeats, seed=config.seed,
    )


# ---------------------------------------------------------------------------
# Run orchestration
# ---------------------------------------------------------------------------

def run_pipeline(manifest_path, config: RunConfig, run_dir) -> Path:
    """Execute every stage and write metrics into ``run_dir``.

    The resolved config is dumped next to the outputs so a run directory is
    self-describing.
    """
    config = config.shrunk()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cache = ArtifactCache(resolve_cache_dir(config, run_dir))
    entries = read_manifest(manifest_path)
    net, net_digest = build_net(config)

    started = time.monotonic()
    preprocessed = stage_preprocess(entries, config, cache)
    segmented = stage_segment(entries, config, cache, preprocessed)
    abcd_feats = stage_features(entries, config, cache, preprocessed, segmented)
    report = run_classification(entries, config, cache, preprocessed,
                                segmented, abcd_feats, net, net_digest)
    elapsed = time.monotonic() - started

    cfg_doc = {k: (list(v) if isinstance(v, tuple) else v)
               for k, v in config.__dict__.items()}
    cfg_doc["wall_time_seconds"] = round(elapsed, 3)
    (run_dir / "resolved_config.json").write_text(json.dumps(cfg_doc, indent=2) + "\n")
    write_metrics_csv(report, run_dir / "metrics.csv")
    write_report_text(report, config, run_dir / "report.txt")
    return run_dir


# ---------------------------------------------------------------------------
# Grid runner
# ---------------------------------------------------------------------------

def grid_cells(style_layers=GRID_STYLE_LAYERS, content_layers=GRID_CONTENT_LAYERS,
               ratios=GRID_RATIOS, tv_weights=GRID_TV_WEIGHTS) -> list[dict]:
    """Cartesian product of the four synthesis tuning axes."""
    cells = []
    for sl in style_layers:
        for cl in content_layers:
            for ratio in ratios:
                for tv in tv_weights:
                    cells.append({
                        "style_layers": tuple(sl),
                        "content_layer": cl,
                        "beta": float(ratio),
                        "gamma": float(tv),
                    })
    return cells


def run_grid(manifest_path, config: RunConfig, run_dir, cells=None) -> Path:
    """Run the pipeline once per grid cell; emit per-cell and marginal CSVs."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if cells is None:
        cells = grid_cells()
    rows = []
    for idx, cell in enumerate(cells):
        cell_cfg = replace(config, **cell)
        cell_dir = run_pipeline(manifest_path, cell_cfg, run_dir / f"cell_{idx:03d}")
        report_csv = (cell_dir / "metrics.csv").read_text().strip().splitlines()[-1]
        _, _, auc, acc, *_ = report_csv.split(",")
        rows.append({
            "cell": idx,
            "style_layers": "+".join(cell["style_layers"]),
            "content_layer": cell["content_layer"],
            "ratio": cell["beta"],
            "tv_weight": cell["gamma"],
            "auc": float(auc),
            "accuracy": float(acc),
        })
    _write_grid_summary(rows, run_dir)
    return run_dir


def _write_grid_summary(rows, run_dir: Path):
    lines = ["cell,style_layers,content_layer,ratio,tv_weight,auc,accuracy"]
    for r in rows:
        lines.append(
            f"{r['cell']},{r['style_layers']},{r['content_layer']},"
            f"{r['ratio']:g},{r['tv_weight']:g},{r['auc']:.10f},{r['accuracy']:.10f}"
        )
    (run_dir / "grid_summary.csv").write_text("\n".join(lines) + "\n")

    # per-axis marginal means support the style-layer depth analysis
    marg_lines = ["axis,value,mean_auc,mean_accuracy,cells"]
    for axis in ("style_layers", "content_layer", "ratio", "tv_weight"):
        values = sorted({r[axis] for r in rows}, key=str)
        for v in values:
            sub = [r for r in rows if r[axis] == v]
            marg_lines.append(
                f"{axis},{v},{np.mean([r['auc'] for r in sub]):.10f},"
                f"{np.mean([r['accuracy'] for r in sub]):.10f},{len(sub)}"
            )
    (run_dir / "grid_marginals.csv").write_text("\n".join(marg_lines) + "\n")
