"""Run configuration, training loop, evaluation and the lambda sweep."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from thermofuse import fileio
from thermofuse.augmentation import (MANIFEST_NAME, AugmentationConfig, AugmentedSample, augment_dataset,
                                     default_workers, draw_spatial_params, transform_arrays)
from thermofuse.dataset import INDEX_NAME, DatasetIndex, split_dataset
from thermofuse.engine.checkpoint import load_into, read_checkpoint, save_checkpoint
from thermofuse.engine.optim import AdamState, adam_step
from thermofuse.engine.tensor import no_grad
from thermofuse.metrics import PooledCounts, threshold_logits
from thermofuse.model import ModelConfig, PtFusion, model_loss

CHECKPOINT_NAME = "checkpoint.ptckpt"
DEFAULT_LAMBDA_GRID = (0.1, 0.25, 0.5, 0.75, 1.0)
_PATH_FIELDS = ("data_dir", "out_dir")
NORMALIZATIONS = ("per_sample_pca", "dataset")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_dir: str = ""
    out_dir: str = "runs/run"
    model: ModelConfig = field(default_factory=ModelConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    batch_size: int = 8
    epochs: int = 100
    lr: float = 1e-4
    seed: int = 0
    lambda_grid: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    spatial_augment: bool = True
    eval_split: str = "test"
    split_counts: list[int] | None = None
    precision: str = "float64"
    normalization: str = "per_sample_pca"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig.from_dict(self.augmentation)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be 'float32' or 'float64'")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
        self.lambda_grid = [float(v) for v in self.lambda_grid]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["augmentation"] = asdict(self.augmentation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def provenance(self) -> dict:
        """Config fields that determine results (paths excluded)."""
        return {k: v for k, v in self.to_dict().items() if k not in _PATH_FIELDS}

    def digest(self) -> str:
        return config_digest(self.provenance())


def config_digest(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def desk_model_config(**overrides) -> ModelConfig:
    """Three-level, narrow network sized for CPU runs on 64x64 inputs."""
    base = dict(levels=3, filters=[4, 8, 16])
    base.update(overrides)
    return ModelConfig(**base)


def desk_run_config(**overrides) -> RunConfig:
    base = dict(model=desk_model_config(), batch_size=4, epochs=30, lr=1e-3, precision="float32",
                augmentation=AugmentationConfig(factor=20))
    base.update(overrides)
    return RunConfig(**base)


# -- data ------------------------------------------------------------------------

@dataclass
class ArraySample:
    name: str
    pca: np.ndarray    # (J, H, W)
    tsr: np.ndarray    # (n+1, H, W)
    mask: np.ndarray   # (H, W) int64
    depth: np.ndarray  # (H, W) mm
    split: str = "train"


def from_augmented(samples: Iterable[AugmentedSample]) -> list[ArraySample]:
    out = []
    for s in samples:
        p = s.provenance
        name = p.source_id if p.replica is None else f"{p.source_id}_r{p.replica:04d}"
        out.append(ArraySample(name, s.pca.channels.astype(np.float32), s.tsr.channels.astype(np.float32),
                               s.gt.class_mask, s.gt.depth_map.astype(np.float32), s.split))
    return out


def load_manifest_dir(root) -> list[ArraySample]:
    root = Path(root)
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    gts: dict[str, object] = {}
    out = []
    for rec in manifest["samples"]:
        pca, _ = fileio.load_modality(root / rec["pca"])
        tsr, _ = fileio.load_modality(root / rec["tsr"])
        key = rec["ground_truth"]
        if key not in gts:
            gts[key] = fileio.load_ground_truth(root / key)
        gt = gts[key]
        out.append(ArraySample(rec["name"], pca, tsr, gt.class_mask, gt.depth_map, rec["split"]))
    return out


def load_samples(config: RunConfig) -> list[ArraySample]:
    """Augmented/preprocessed tree (manifest.json) or raw dataset (index.json, augmented here)."""
    root = Path(config.data_dir)
    if (root / MANIFEST_NAME).exists():
        return load_manifest_dir(root)
    if (root / INDEX_NAME).exists():
        index = DatasetIndex.load(root)
        if any(e.split is None for e in index.entries):
            counts = tuple(config.split_counts) if config.split_counts else None
            index = split_dataset(index, counts, config.seed)
        return from_augmented(augment_dataset(index, config.augmentation, root))
    raise ConfigError(f"{root} has neither {MANIFEST_NAME} nor {INDEX_NAME}")


def check_samples(samples: Sequence[ArraySample], model_cfg: ModelConfig) -> None:
    if not samples:
        raise ConfigError("no samples")
    shapes = {s.pca.shape[1:] for s in samples} | {s.tsr.shape[1:] for s in samples}
    if len(shapes) != 1:
        raise ConfigError(f"samples differ in spatial size: {sorted(shapes)}")
    h, w = shapes.pop()
    if h % model_cfg.min_divisor or w % model_cfg.min_divisor:
        raise ConfigError(f"{h}x{w} inputs are not divisible by {model_cfg.min_divisor}")
    for s in samples:
        if s.pca.shape[0] != model_cfg.pca_channels or s.tsr.shape[0] != model_cfg.tsr_channels:
            raise ConfigError(f"{s.name}: {s.pca.shape[0]} PCA / {s.tsr.shape[0]} TSR channels, model expects "
                              f"{model_cfg.pca_channels} / {model_cfg.tsr_channels}")
        if model_cfg.head == "multiclass" and s.mask.max() >= model_cfg.n_classes:
            raise ConfigError(f"{s.name}: label {s.mask.max()} exceeds n_classes={model_cfg.n_classes}")
        if s.depth.max() > model_cfg.d_max:
            raise ConfigError(f"{s.name}: depth exceeds d_max={model_cfg.d_max}")


def _standardize_channels(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit standard deviation per channel of one (C, H, W) sample."""
    x = x.astype(np.float64)
    mean = x.mean(axis=(1, 2), keepdims=True)
    std = x.std(axis=(1, 2), keepdims=True)
    return (x - mean) / np.where(std < 1e-12, 1.0, std)


@dataclass
class Normalizer:
    """Per-channel affine standardisation.

    TSR channels always use training-set statistics. In ``per_sample_pca``
    mode each PCA channel is standardised within its own sample instead,
    because the scale of a component image depends on the number of frames
    and the noise level of the sequence it came from, which differ between
    the augmented training replicas and the full-length test sequences.
    """

    pca_mean: list[float]
    pca_std: list[float]
    tsr_mean: list[float]
    tsr_std: list[float]
    mode: str = "dataset"

    def __post_init__(self):
        if self.mode not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")

    @classmethod
    def fit(cls, samples: Sequence[ArraySample], mode: str = "dataset") -> "Normalizer":
        def stats(arrays):
            stack = np.stack(arrays).astype(np.float64)
            mean = stack.mean(axis=(0, 2, 3))
            std = stack.std(axis=(0, 2, 3))
            std[std < 1e-12] = 1.0
            return [float(v) for v in mean], [float(v) for v in std]
        if mode == "per_sample_pca":
            n = samples[0].pca.shape[0]
            pca_stats = ([0.0] * n, [1.0] * n)
        else:
            pca_stats = stats([s.pca for s in samples])
        return cls(*pca_stats, *stats([s.tsr for s in samples]), mode=mode)

    @classmethod
    def identity(cls, pca_channels: int, tsr_channels: int) -> "Normalizer":
        return cls([0.0] * pca_channels, [1.0] * pca_channels, [0.0] * tsr_channels, [1.0] * tsr_channels)

    def apply(self, pca: np.ndarray, tsr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        def norm(x, m, s):
            return (x.astype(np.float64) - np.asarray(m)[:, None, None]) / np.asarray(s)[:, None, None]
        if self.mode == "per_sample_pca":
            pca = _standardize_channels(pca)
        return norm(pca, self.pca_mean, self.pca_std), norm(tsr, self.tsr_mean, self.tsr_std)


def make_batch(samples: Sequence[ArraySample], norm: Normalizer, rng: np.random.Generator | None = None,
               aug: AugmentationConfig | None = None):
    """Stack normalised samples; with ``rng`` one spatial draw is applied to the whole batch."""
    pairs = [norm.apply(s.pca, s.tsr) for s in samples]
    pca = np.stack([p for p, _ in pairs])
    tsr = np.stack([t for _, t in pairs])
    mask = np.stack([s.mask for s in samples]).astype(np.int64)
    depth = np.stack([s.depth for s in samples]).astype(np.float64)
    if rng is not None:
        params = draw_spatial_params(aug or AugmentationConfig(), rng, mask.shape[1:])
        (pca, tsr), (mask, depth) = transform_arrays(params, [pca, tsr], [mask, depth])
    return pca, tsr, mask, depth


def _batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0x5A7, epoch, batch])


# -- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path | None
    report: "MetricsReport"
    model: PtFusion
    normalizer: Normalizer
    predictions: dict = field(default_factory=dict)


def mean_loss(model: PtFusion, samples: Sequence[ArraySample], norm: Normalizer, batch_size: int) -> float:
    if not samples:
        return float("nan")
    total = 0.0
    with no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            pca, tsr, mask, depth = make_batch(chunk, norm)
            total += model_loss(model, model(pca, tsr), mask, depth).item() * len(chunk)
    return total / len(samples)


def fit(model: PtFusion, train: Sequence[ArraySample], val: Sequence[ArraySample], config: RunConfig,
        norm: Normalizer, log: Callable[[str], None] | None = None) -> dict:
    """Adam over seeded shuffled mini-batches; restores the best-validation weights.

    Returns the curves and bookkeeping stored alongside the checkpoint.
    """
    params = model.trainable_parameters()
    state = AdamState()
    order_rng = np.random.default_rng([int(config.seed), 0x0D3])
    curves = {"train_loss": [], "val_loss": []}
    best = (math.inf, -1, None)
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(train))
        running = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            rng = _batch_rng(config.seed, epoch, lo // config.batch_size) if config.spatial_augment else None
            pca, tsr, mask, depth = make_batch([train[i] for i in idx], norm, rng, config.augmentation)
            loss = model_loss(model, model(pca, tsr), mask, depth)
            loss.backward()
            adam_step(params, state, config.lr)
            running += loss.item() * len(idx)
        train_loss = running / max(len(train), 1)
        val_loss = mean_loss(model, val, norm, config.batch_size) if val else train_loss
        curves["train_loss"].append(train_loss)
        curves["val_loss"].append(val_loss)
        if val_loss < best[0]:
            best = (val_loss, epoch, {p.name: p.data.copy() for p in model.parameters()})
        if log:
            log(f"epoch {epoch + 1}/{config.epochs} train_loss={train_loss:.6f} val_loss={val_loss:.6f}")
    if best[2] is not None:
        load_into(model.parameters(), best[2])
    return {"curves": curves, "best_epoch": best[1], "steps": state.step}


def train(config: RunConfig, samples: Sequence[ArraySample] | None = None, *, save: bool = True,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Train on the train split, select on val, report on ``config.eval_split``."""
    samples = list(samples) if samples is not None else load_samples(config)
    check_samples(samples, config.model)
    train_set = [s for s in samples if s.split == "train"]
    val_set = [s for s in samples if s.split == "val"]
    eval_set = [s for s in samples if s.split == config.eval_split]
    if not train_set:
        raise ConfigError("dataset has no training samples")
    if not eval_set:
        raise ConfigError(f"dataset has no {config.eval_split!r} samples")
    norm = Normalizer.fit(train_set, config.normalization)
    model = PtFusion(config.model, seed=config.seed, dtype=config.precision)
    info = fit(model, train_set, val_set, config, norm, log)
    extra = {"model": config.model.to_dict(), "normalizer": asdict(norm), "run": config.provenance(),
             "curves": info["curves"], "best_epoch": info["best_epoch"], "data_dir": config.data_dir}
    ckpt = None
    if save:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / CHECKPOINT_NAME
        save_checkpoint(ckpt, model.parameters(), step=info["steps"], seed=config.seed, extra=extra)
    report, preds = evaluate_model(model, norm, eval_set, config.eval_split, extra, config.batch_size)
    return TrainResult(ckpt, report, model, norm, preds)


# -- evaluation ----------------------------------------------------------------------

@dataclass
class MetricsReport:
    variant: str
    head: str
    split: str
    n_samples: int
    metrics: dict
    per_class_iou: list[float]
    per_class_recall: list[float]
    per_class_precision: list[float]
    absent_classes: list[int]
    curves: dict
    best_epoch: int | None
    seed: int
    config_digest: str
    config: dict
    units: dict = field(default_factory=lambda: {"mae_mm": "mm", "depth": "mm"})

    def validate(self) -> None:
        rates = self.per_class_iou + self.per_class_recall + self.per_class_precision
        rates += [v for k, v in self.metrics.items() if k != "mae_mm"]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("rate outside [0, 1]")
        if "mae_mm" in self.metrics and not self.metrics["mae_mm"] >= 0:
            raise ValueError("negative MAE")
        if "miou" in self.metrics and self.metrics["miou"] > max(self.per_class_iou) + 1e-12:
            raise ValueError("mIoU exceeds the largest class IoU")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def variant_tag(cfg: ModelConfig) -> str:
    return f"{cfg.head}/{cfg.fusion}/{cfg.modality}"


def predict(model: PtFusion, norm: Normalizer, samples: Sequence[ArraySample], batch_size: int = 8,
            workers: int | None = None) -> list[dict]:
    """Per-sample predicted labels (and depth for the binary_depth head), in input order."""
    workers = workers or default_workers()
    chunks = [samples[lo:lo + batch_size] for lo in range(0, len(samples), batch_size)]

    def run(chunk):
        pca, tsr, _, _ = make_batch(chunk, norm)
        pred = model(pca, tsr)
        if model.config.head == "multiclass":
            return [{"labels": lab} for lab in pred.logits.data.argmax(axis=1)]
        labels = threshold_logits(pred.seg_logit.data[:, 0]).astype(np.int64)
        return [{"labels": lab, "depth": d} for lab, d in zip(labels, pred.depth.data[:, 0])]

    with no_grad():
        if workers == 1 or len(chunks) == 1:
            results = list(map(run, chunks))
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, chunks))
    return [r for chunk in results for r in chunk]


def evaluate_model(model: PtFusion, norm: Normalizer, samples: Sequence[ArraySample], split: str,
                   extra: dict, batch_size: int = 8) -> tuple[MetricsReport, dict]:
    cfg = model.config
    preds = predict(model, norm, samples, batch_size)
    binary = cfg.head == "binary_depth"
    pooled = PooledCounts(2 if binary else cfg.n_classes)
    for s, p in zip(samples, preds):
        gt = (s.mask > 0).astype(np.int64) if binary else s.mask
        pooled.add_labels(p["labels"], gt)
        if binary:
            pooled.add_depth(p["depth"], s.depth.astype(np.float64))
    sc = pooled.scores()
    if binary:
        metrics = {"iou": float(sc.iou[1]), "mae_mm": pooled.mae}
    else:
        metrics = {"miou": sc.miou, "recall": sc.mean_recall, "precision": sc.mean_precision}
    run = extra.get("run", {})
    report = MetricsReport(
        variant=variant_tag(cfg), head=cfg.head, split=split, n_samples=len(samples), metrics=metrics,
        per_class_iou=[float(v) for v in sc.iou], per_class_recall=[float(v) for v in sc.recall],
        per_class_precision=[float(v) for v in sc.precision],
        absent_classes=[int(c) for c in np.nonzero(sc.absent)[0]],
        curves=extra.get("curves", {"train_loss": [], "val_loss": []}), best_epoch=extra.get("best_epoch"),
        seed=int(run.get("seed", model.seed)), config_digest=config_digest(run), config=run)
    report.validate()
    named = {s.name: p for s, p in zip(samples, preds)}
    return report, named


def load_model(checkpoint) -> tuple[PtFusion, Normalizer, dict]:
    manifest, arrays = read_checkpoint(checkpoint)
    extra = manifest["extra"]
    cfg = ModelConfig.from_dict(extra["model"])
    model = PtFusion(cfg, seed=manifest["seed"], dtype=extra.get("run", {}).get("precision", "float64"))
    load_into(model.parameters(), arrays)
    norm = Normalizer(**extra["normalizer"]) if "normalizer" in extra else \
        Normalizer.identity(cfg.pca_channels, cfg.tsr_channels)
    return model, norm, extra


def evaluate(checkpoint, samples: Sequence[ArraySample], split: str = "test", head: str | None = None,
             batch_size: int = 8) -> tuple[MetricsReport, dict]:
    """Score a saved model on the samples of ``split``."""
    model, norm, extra = load_model(checkpoint)
    if head is not None and head != model.config.head:
        raise ConfigError(f"checkpoint has a {model.config.head} head, {head} metrics requested")
    chosen = [s for s in samples if s.split == split]
    if not chosen:
        raise ConfigError(f"no {split!r} samples to evaluate")
    check_samples(chosen, model.config)
    return evaluate_model(model, norm, chosen, split, extra, batch_size)


# -- lambda sweep ---------------------------------------------------------------------

def sweep_lambda(config: RunConfig, grid: Sequence[float] | None = None,
                 samples: Sequence[ArraySample] | None = None, *, save: bool = True,
                 log: Callable[[str], None] | None = None) -> list[MetricsReport]:
    """One training run per lambda with a shared seed; writes lambda_sweep.csv when saving."""
    if config.model.head != "binary_depth":
        raise ConfigError("the lambda sweep needs the binary_depth head")
    grid = [float(v) for v in (grid if grid is not None else config.lambda_grid)]
    if not grid:
        raise ConfigError("empty lambda grid")
    samples = list(samples) if samples is not None else load_samples(config)
    reports = []
    for lam in grid:
        cfg = copy.deepcopy(config)
        cfg.model.lam = lam
        cfg.out_dir = str(Path(config.out_dir) / f"lambda_{lam:g}")
        result = train(cfg, samples, save=save, log=log)
        if save:
            from thermofuse.report import write_run
            write_run(cfg.out_dir, result.report, result.predictions)
        reports.append(result.report)
    if save:
        from thermofuse.report import write_sweep_csv
        write_sweep_csv(Path(config.out_dir) / "lambda_sweep.csv", grid, reports)
    return reports
