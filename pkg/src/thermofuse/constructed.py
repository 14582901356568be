"""Modality-separated toy data for checking that fusion uses both inputs.

The image is divided into a fixed 2x2 grid of cells. Each cell holds at most
one circular defect placed at a random position inside it.

* PCA channel 0 is the exact defect mask; the other PCA channels are noise.
* TSR channel 0 is the depth of the cell's defect painted over the whole
  cell (0 for empty cells); the other TSR channels are noise.

So the PCA input says where defects are but not how deep, and the TSR input
says how deep the defect in each cell is but not where it sits in the cell.
"""

from __future__ import annotations

import numpy as np

from thermofuse.training import ArraySample

DEFAULT_DEPTHS = (0.5, 1.0, 1.5, 2.0)


def _cell_sample(rng: np.random.Generator, size: int, depths, radius, occupancy: float):
    half = size // 2
    mask = np.zeros((size, size), dtype=np.int64)
    depth = np.zeros((size, size))
    painted = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    for cy in (0, half):
        for cx in (0, half):
            if rng.random() >= occupancy:
                continue
            r = rng.uniform(*radius)
            lo, hi = r + 1.0, half - 2.0 - r
            py, px = cy + rng.uniform(lo, hi), cx + rng.uniform(lo, hi)
            k = int(rng.integers(len(depths)))
            disk = (yy - py) ** 2 + (xx - px) ** 2 <= r * r
            mask[disk] = k + 1
            depth[disk] = depths[k]
            painted[cy:cy + half, cx:cx + half] = depths[k]
    return mask, depth, painted


def fusion_probe_samples(counts=(192, 32, 32), size: int = 32, seed: int = 0, depths=DEFAULT_DEPTHS,
                         radius=(3.0, 5.0), occupancy: float = 0.75, noise_std: float = 1.0,
                         pca_channels: int = 10, tsr_channels: int = 6) -> list[ArraySample]:
    """Samples for the train/val/test splits in ``counts``; one seeded stream per sample."""
    if size % 2 or size // 2 < 2 * radius[1] + 4:
        raise ValueError("cells too small for the requested defect radius")
    out = []
    n_total = sum(counts)
    children = np.random.SeedSequence(seed).spawn(n_total)
    splits = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    for i, (child, split) in enumerate(zip(children, splits)):
        rng = np.random.default_rng(child)
        mask, depth, painted = _cell_sample(rng, size, depths, radius, occupancy)
        pca = rng.normal(0.0, noise_std, size=(pca_channels, size, size))
        tsr = rng.normal(0.0, noise_std, size=(tsr_channels, size, size))
        pca[0] = (mask > 0).astype(np.float64)
        tsr[0] = painted
        out.append(ArraySample(f"probe_{i:04d}", pca.astype(np.float32), tsr.astype(np.float32),
                               mask, depth.astype(np.float32), split))
    return out


def median_depth_floor(samples) -> float:
    """Depth MAE of the best depth-blind predictor that knows the mask exactly.

    Without depth information the error-minimising constant on defect
    pixels is the median of their depths; sound pixels cost nothing. The
    result is that median's total absolute error divided by all pixels.
    """
    d = np.concatenate([s.depth[s.mask > 0] for s in samples]).astype(np.float64)
    n = sum(s.mask.size for s in samples)
    if d.size == 0:
        return 0.0
    return float(np.abs(d - np.median(d)).sum() / n)
