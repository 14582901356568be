"""Spatiotemporal augmentation.

Temporal: each sequence is cut into ``n_segments`` contiguous segments, one
frame is drawn uniformly from every segment, zero-mean Gaussian noise is added
and the result is compressed to PCA/TSR. Spatial: a random affine map
(flips, then shear, rotation and translation about the image centre) is applied
to the compressed tensors and ground truth at training time.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from thermofuse import fileio
from thermofuse.compression import PcaTensor, TsrTensor, compress
from thermofuse.dataset import DatasetIndex
from thermofuse.sequence import GroundTruth, ThermalSequence

MANIFEST_NAME = "manifest.json"


@dataclass
class AugmentationConfig:
    n_segments: int = 100
    factor: int = 500
    noise_variance: float = 0.005
    rotation_deg: float = 15.0
    translate_frac: float = 0.10
    shear_deg: float = 10.0
    flip_prob: float = 0.5
    seed: int = 0
    pca_components: int = 10
    tsr_degree: int = 5

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if self.factor < 1:
            raise ValueError("augmentation factor must be >= 1")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be >= 0")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip probability must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown augmentation config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SpatialParams:
    rotation_deg: float = 0.0
    shear_deg: float = 0.0
    translate_px: tuple[float, float] = (0.0, 0.0)  # (rows, cols)
    flip_h: bool = False  # mirror columns
    flip_v: bool = False  # mirror rows

    def is_identity(self) -> bool:
        return not (self.rotation_deg or self.shear_deg or any(self.translate_px) or self.flip_h or self.flip_v)


@dataclass
class Provenance:
    source_id: str
    replica: int | None = None
    frame_indices: list[int] | None = None
    noise_seed: int | None = None
    spatial: dict | None = None


@dataclass
class AugmentedSample:
    pca: PcaTensor
    tsr: TsrTensor
    gt: GroundTruth
    provenance: Provenance = field(default_factory=lambda: Provenance(""))
    split: str = "train"


# -- temporal ---------------------------------------------------------------

def segment_bounds(n_t: int, n_segments: int) -> list[tuple[int, int]]:
    """Contiguous [start, stop) segments; the remainder goes to the leading ones."""
    if not 1 <= n_segments <= n_t:
        raise ValueError(f"n_segments={n_segments} must lie in [1, n_t={n_t}]")
    base, extra = divmod(n_t, n_segments)
    sizes = [base + 1] * extra + [base] * (n_segments - extra)
    stops = np.cumsum(sizes)
    return [(int(b - s), int(b)) for b, s in zip(stops, sizes)]


def sample_segment_indices(n_t: int, n_segments: int, rng: np.random.Generator) -> np.ndarray:
    bounds = np.array(segment_bounds(n_t, n_segments))
    return rng.integers(bounds[:, 0], bounds[:, 1])


def take_frames(seq: ThermalSequence, indices) -> ThermalSequence:
    """Sub-sequence keeping original timestamps.

    The new flash frame is the last retained frame recorded at or before the
    original flash; it serves as the cold reference for TSR.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if np.array_equal(idx, np.arange(seq.n_t)):
        return seq.replace(frames=seq.frames.copy())
    cold = np.nonzero(idx <= seq.pulse_frame)[0]
    if cold.size == 0:
        raise ValueError("sampled frames contain no frame at or before the flash")
    return seq.replace(frames=seq.frames[idx], pulse_frame=int(cold[-1]), times_s=seq.times()[idx])


def segment_sample(seq: ThermalSequence, n_segments: int, rng: np.random.Generator) -> ThermalSequence:
    return take_frames(seq, sample_segment_indices(seq.n_t, n_segments, rng))


def add_gaussian_noise(seq: ThermalSequence, variance: float, rng: np.random.Generator) -> ThermalSequence:
    if variance < 0:
        raise ValueError("variance must be >= 0")
    if variance == 0:
        return seq.replace(frames=seq.frames.copy())
    noisy = seq.frames.astype(np.float64) + rng.normal(0.0, math.sqrt(variance), size=seq.frames.shape)
    return seq.replace(frames=noisy.astype(np.float32))


# -- spatial ------------------------------------------------------------------

def draw_spatial_params(config: AugmentationConfig, rng: np.random.Generator, shape: tuple[int, int]) -> SpatialParams:
    h, w = shape
    return SpatialParams(
        rotation_deg=float(rng.uniform(-config.rotation_deg, config.rotation_deg)),
        shear_deg=float(rng.uniform(-config.shear_deg, config.shear_deg)),
        translate_px=(float(rng.uniform(-1, 1) * config.translate_frac * h),
                      float(rng.uniform(-1, 1) * config.translate_frac * w)),
        flip_h=bool(rng.random() < config.flip_prob),
        flip_v=bool(rng.random() < config.flip_prob),
    )


def check_spatial_params(params: SpatialParams, shape: tuple[int, int], config: AugmentationConfig) -> None:
    h, w = shape
    tol = 1e-9
    if abs(params.rotation_deg) > config.rotation_deg + tol:
        raise ValueError(f"rotation {params.rotation_deg} outside +-{config.rotation_deg}")
    if abs(params.shear_deg) > config.shear_deg + tol:
        raise ValueError(f"shear {params.shear_deg} outside +-{config.shear_deg}")
    ty, tx = params.translate_px
    if abs(ty) > config.translate_frac * h + tol or abs(tx) > config.translate_frac * w + tol:
        raise ValueError(f"translation {params.translate_px} outside +-{config.translate_frac} of the image")


def _inverse_affine(params: SpatialParams, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Matrix/offset mapping output (row, col) to input (row, col).

    Forward map in (col=x, row=y) about the centre c: p' = c + t + R(theta) Sh(p - c), with
    positive angles counter-clockwise on screen.
    """
    h, w = shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    th = math.radians(params.rotation_deg)
    cos, sin = math.cos(th), math.sin(th)
    # (row, col) form of the screen rotation: row' = cos*row - sin*col, col' = sin*row + cos*col
    rot = np.array([[cos, -sin], [sin, cos]])
    shear = np.array([[1.0, 0.0], [math.tan(math.radians(params.shear_deg)), 1.0]])
    fwd = rot @ shear
    inv = np.linalg.inv(fwd)
    t = np.asarray(params.translate_px, dtype=np.float64)
    return inv, c - inv @ (c + t)


def _flip(a: np.ndarray, params: SpatialParams) -> np.ndarray:
    if params.flip_v:
        a = a[..., ::-1, :]
    if params.flip_h:
        a = a[..., :, ::-1]
    return a


def _affine_is_identity(params: SpatialParams) -> bool:
    return not (params.rotation_deg or params.shear_deg or any(params.translate_px))


def _sampling_grid(mat: np.ndarray, off: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) coordinate of every output pixel, each shaped (H*W,)."""
    h, w = shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src = mat @ np.stack([rr.ravel(), cc.ravel()]) + off[:, None]
    return src[0], src[1]


def _gather(flat: np.ndarray, r: np.ndarray, c: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """flat[..., r*W + c] with zeros where (r, c) falls outside the grid."""
    h, w = shape
    inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    idx = np.where(inside, r * w + c, 0)
    return np.where(inside, flat[..., idx], 0)


def warp_bilinear(a: np.ndarray, mat: np.ndarray, off: np.ndarray) -> np.ndarray:
    """Bilinear resampling of (..., H, W) arrays; taps outside the image read 0."""
    shape = a.shape[-2:]
    sr, sc = _sampling_grid(mat, off, shape)
    r0, c0 = np.floor(sr), np.floor(sc)
    fr, fc = sr - r0, sc - c0
    r0, c0 = r0.astype(np.int64), c0.astype(np.int64)
    flat = a.reshape(a.shape[:-2] + (-1,)).astype(np.float64)
    out = ((1 - fr) * (1 - fc) * _gather(flat, r0, c0, shape) + (1 - fr) * fc * _gather(flat, r0, c0 + 1, shape)
           + fr * (1 - fc) * _gather(flat, r0 + 1, c0, shape) + fr * fc * _gather(flat, r0 + 1, c0 + 1, shape))
    return out.reshape(a.shape)


def warp_nearest(a: np.ndarray, mat: np.ndarray, off: np.ndarray) -> np.ndarray:
    """Nearest-neighbour resampling (round half up); outside pixels read 0."""
    shape = a.shape[-2:]
    sr, sc = _sampling_grid(mat, off, shape)
    r, c = np.floor(sr + 0.5).astype(np.int64), np.floor(sc + 0.5).astype(np.int64)
    flat = a.reshape(a.shape[:-2] + (-1,))
    return _gather(flat, r, c, shape).astype(a.dtype).reshape(a.shape)


def transform_arrays(params: SpatialParams, images: Iterable[np.ndarray] = (), labels: Iterable[np.ndarray] = ()):
    """Apply one map to images bilinearly and to label maps by nearest neighbour.

    Arrays may carry any leading axes; the last two are (rows, cols) and must
    agree across all inputs. Returns (list of images, list of labels);
    outside-the-source pixels are 0.
    """
    images, labels = list(images), list(labels)
    shapes = {np.shape(a)[-2:] for a in images + labels}
    if len(shapes) != 1:
        raise ValueError(f"arrays disagree in spatial size: {sorted(shapes)}")
    shape = shapes.pop()
    out_img = [np.ascontiguousarray(_flip(np.asarray(im), params)) for im in images]
    out_lab = [np.ascontiguousarray(_flip(np.asarray(lb), params)) for lb in labels]
    if _affine_is_identity(params):
        return out_img, out_lab
    mat, off = _inverse_affine(params, shape)
    return [warp_bilinear(im, mat, off) for im in out_img], [warp_nearest(lb, mat, off) for lb in out_lab]


def spatial_transform(sample: AugmentedSample, params: SpatialParams, strict: bool = False,
                      config: AugmentationConfig | None = None) -> AugmentedSample:
    """Pixel-aligned affine augmentation of a sample.

    With ``strict`` the parameters must fall inside the ranges of ``config``
    (defaults when omitted).
    """
    if strict:
        check_spatial_params(params, sample.gt.shape, config or AugmentationConfig())
    (pca, tsr), (mask, depth) = transform_arrays(
        params, [sample.pca.channels, sample.tsr.channels], [sample.gt.class_mask, sample.gt.depth_map])
    gt = GroundTruth(mask, depth, sample.gt.class_depths, sample.gt.max_depth_mm)
    prov = Provenance(**{**asdict(sample.provenance), "spatial": asdict(params)})
    return AugmentedSample(PcaTensor(pca, sample.pca.singular_values),
                           TsrTensor(tsr, sample.tsr.degree, sample.tsr.reference_time_s, sample.tsr.epsilon),
                           gt, prov, sample.split)


# -- dataset level ----------------------------------------------------------

def replica_rng(seed: int, source_id: str, replica: int) -> np.random.Generator:
    """Per-(sequence, replica) stream, independent of generation order."""
    key = zlib.crc32(source_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, int(replica)]))


def replay(seq: ThermalSequence, gt: GroundTruth, prov: Provenance, config: AugmentationConfig,
           split: str = "train") -> AugmentedSample:
    """Rebuild a sample from its provenance record."""
    if prov.frame_indices is not None:
        seq = take_frames(seq, prov.frame_indices)
    if prov.noise_seed is not None:
        seq = add_gaussian_noise(seq, config.noise_variance, np.random.default_rng(prov.noise_seed))
    pca, tsr = compress(seq, config.pca_components, config.tsr_degree)
    return AugmentedSample(pca, tsr, gt, prov, split)


def make_replica(seq: ThermalSequence, gt: GroundTruth, config: AugmentationConfig, replica: int,
                 split: str = "train") -> AugmentedSample:
    rng = replica_rng(config.seed, seq.id, replica)
    indices = sample_segment_indices(seq.n_t, config.n_segments, rng)
    noise_seed = int(rng.integers(2 ** 63))
    prov = Provenance(seq.id, replica, [int(i) for i in indices], noise_seed)
    return replay(seq, gt, prov, config, split)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("THERMOFUSE_THREADS", "1")))
    except ValueError:
        return 1


def augment_sequences(items: Iterable[tuple[ThermalSequence, GroundTruth, str]], config: AugmentationConfig,
                      workers: int | None = None) -> Iterator[AugmentedSample]:
    """Emit ``factor`` replicas per train/val sequence and the test sequences as-is.

    Output order is (input order, replica index) regardless of ``workers``.
    """
    workers = workers or default_workers()
    jobs = []
    for seq, gt, split in items:
        if split in ("train", "val"):
            jobs.extend((seq, gt, r, split) for r in range(config.factor))
        else:
            jobs.append((seq, gt, None, split))

    def run(job):
        seq, gt, r, split = job
        if r is None:
            return replay(seq, gt, Provenance(seq.id), config, split)
        return make_replica(seq, gt, config, r, split)

    if workers == 1:
        yield from map(run, jobs)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(run, jobs)


def augment_dataset(index: DatasetIndex, config: AugmentationConfig, root=".",
                    workers: int | None = None) -> Iterator[AugmentedSample]:
    def items():
        for entry in index.entries:
            if entry.split is None:
                raise ValueError("index has no split assignment; run split_dataset first")
            seq_p, gt_p = index.resolve(root, entry)
            yield fileio.load_sequence(seq_p), fileio.load_ground_truth(gt_p), entry.split
    return augment_sequences(items(), config, workers)


def write_samples(samples: Iterable[AugmentedSample], outdir, config: AugmentationConfig | None = None) -> dict:
    """Persist samples under outdir/{train,val,test}/ with a provenance manifest."""
    outdir = Path(outdir)
    records = []
    written_gt = set()
    for s in samples:
        split_dir = outdir / s.split
        split_dir.mkdir(parents=True, exist_ok=True)
        src = s.provenance.source_id
        name = src if s.provenance.replica is None else f"{src}_r{s.provenance.replica:04d}"
        gt_stem = split_dir / f"{src}_gt"
        if (s.split, src) not in written_gt:
            fileio.save_ground_truth(s.gt, gt_stem)
            written_gt.add((s.split, src))
        fileio.save_modality(s.pca.channels, split_dir / f"{name}_pca.ptmod", modality="pca", id=name,
                             extra={"singular_values": [float(v) for v in s.pca.singular_values]})
        fileio.save_modality(s.tsr.channels, split_dir / f"{name}_tsr.ptmod", modality="tsr", id=name,
                             extra={"degree": s.tsr.degree, "reference_time_s": s.tsr.reference_time_s,
                                    "epsilon": s.tsr.epsilon})
        records.append({"split": s.split, "name": name,
                        "pca": f"{s.split}/{name}_pca.ptmod", "tsr": f"{s.split}/{name}_tsr.ptmod",
                        "ground_truth": f"{s.split}/{src}_gt", "provenance": asdict(s.provenance)})
    manifest = {"config": asdict(config) if config else None, "samples": records}
    (outdir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return manifest
