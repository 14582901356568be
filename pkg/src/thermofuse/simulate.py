"""Synthetic pulse-thermography sequences.

Each pixel follows the 1-D adiabatic-plate response to an instantaneous
surface pulse,

    dT(t) = (Q / L) * (1 + 2 * sum_{j=1..J} exp(-j^2 pi^2 alpha t / L^2)),

with L the plate thickness on sound pixels and the remaining wall thickness
(defect depth) inside a back-drilled defect footprint. Lateral conduction is
ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from thermofuse.sequence import GroundTruth, InvariantError, ThermalSequence

N_SERIES_TERMS = 50
TAIL_TOLERANCE = 1e-12


@dataclass(frozen=True)
class Defect:
    center: tuple[float, float]  # (row, col) in pixels
    radius_px: float
    depth_mm: float


@dataclass
class SpecimenSpec:
    plate_thickness_mm: float = 2.5
    thermal_diffusivity_mm2_s: float = 0.08
    defects: list[Defect] = field(default_factory=list)
    pulse_energy_au: float = 2.5
    noise_std_au: float = 0.0
    class_depths: list[float] | None = None

    def __post_init__(self):
        self.defects = [d if isinstance(d, Defect) else Defect(tuple(d[0]), float(d[1]), float(d[2]))
                        for d in self.defects]
        if not self.plate_thickness_mm > 0:
            raise InvariantError("plate thickness must be positive")
        if not self.thermal_diffusivity_mm2_s > 0:
            raise InvariantError("thermal diffusivity must be positive")
        if self.noise_std_au < 0:
            raise InvariantError("noise std must be non-negative")
        for d in self.defects:
            if not 0 < d.depth_mm < self.plate_thickness_mm:
                raise InvariantError(f"defect depth {d.depth_mm} outside (0, {self.plate_thickness_mm})")
            if not d.radius_px > 0:
                raise InvariantError("defect radius must be positive")

    def resolved_class_depths(self) -> list[float]:
        if self.class_depths is not None:
            return [0.0] + [float(d) for d in self.class_depths if d != 0]
        return [0.0] + sorted({d.depth_mm for d in self.defects})


def surface_rise(t, thickness_mm, diffusivity_mm2_s, energy_au, n_terms: int = N_SERIES_TERMS) -> np.ndarray:
    """Truncated reflection series; broadcasts over ``t`` and ``thickness_mm``."""
    t = np.asarray(t, dtype=np.float64)
    L = np.asarray(thickness_mm, dtype=np.float64)
    j = np.arange(1, n_terms + 1, dtype=np.float64)
    rate = (math.pi ** 2) * diffusivity_mm2_s * np.multiply.outer(t / L ** 2, j ** 2)
    return (energy_au / L) * (1.0 + 2.0 * np.exp(-rate).sum(axis=-1))


def footprint(n_y: int, n_x: int, defect: Defect) -> np.ndarray:
    rows, cols = np.mgrid[0:n_y, 0:n_x]
    cy, cx = defect.center
    return (rows - cy) ** 2 + (cols - cx) ** 2 <= defect.radius_px ** 2


def rasterize(spec: SpecimenSpec, n_y: int, n_x: int) -> tuple[np.ndarray, GroundTruth]:
    """Effective wall thickness per pixel plus the matching ground truth.

    Overlapping footprints keep the shallowest defect.
    """
    class_depths = spec.resolved_class_depths()
    thickness = np.full((n_y, n_x), spec.plate_thickness_mm, dtype=np.float64)
    for d in spec.defects:
        inside = footprint(n_y, n_x, d)
        thickness[inside] = np.minimum(thickness[inside], d.depth_mm)
    depth = np.where(thickness < spec.plate_thickness_mm, thickness, 0.0)
    mask = np.zeros((n_y, n_x), dtype=np.int64)
    for c, dep in enumerate(class_depths[1:], start=1):
        mask[depth == dep] = c
    if np.any((mask == 0) & (depth > 0)):
        raise InvariantError("defect depth missing from class_depths")
    gt = GroundTruth(mask, depth.astype(np.float32), class_depths,
                     max_depth_mm=max(2.5, spec.plate_thickness_mm))
    return thickness, gt


def simulate_pulse_sequence(spec: SpecimenSpec, n_t: int, n_y: int, n_x: int, frame_rate: float,
                            seed=None, *, pulse_frame: int = 2, id: str = "") -> tuple[ThermalSequence, GroundTruth]:
    """Render one inspection sequence and its ground truth.

    Frames 0..pulse_frame (inclusive) hold the ambient level 0; the flash
    frame itself is the cold reference because the series is singular at t=0.
    Frame k > pulse_frame is sampled at t = (k - pulse_frame) / frame_rate.
    Noise is added last, i.i.d. per sample, and is the only use of ``seed``.
    """
    if n_t < 2:
        raise InvariantError("need at least 2 frames")
    if not 0 <= pulse_frame < n_t - 1:
        raise InvariantError("pulse_frame must leave at least one post-pulse frame")
    t = np.arange(1, n_t - pulse_frame, dtype=np.float64) / frame_rate
    tail = math.exp(-((N_SERIES_TERMS + 1) ** 2) * math.pi ** 2 * spec.thermal_diffusivity_mm2_s
                    * t[0] / spec.plate_thickness_mm ** 2)
    if tail > TAIL_TOLERANCE:
        raise InvariantError(f"first frame too early for a {N_SERIES_TERMS}-term series (tail {tail:.1e})")

    thickness, gt = rasterize(spec, n_y, n_x)
    frames = np.zeros((n_t, n_y, n_x), dtype=np.float64)
    levels, inverse = np.unique(thickness, return_inverse=True)
    traces = surface_rise(t[:, None], levels[None, :], spec.thermal_diffusivity_mm2_s, spec.pulse_energy_au)
    frames[pulse_frame + 1:] = traces[:, inverse.reshape(n_y, n_x)]
    if spec.noise_std_au > 0:
        rng = np.random.default_rng(seed)
        frames += rng.normal(0.0, spec.noise_std_au, size=frames.shape)
    return ThermalSequence(frames.astype(np.float32), frame_rate, pulse_frame, id), gt


@dataclass
class GeneratorConfig:
    """Distribution of random specimens for dataset generation."""

    n_y: int = 64
    n_x: int = 64
    n_t: int = 150
    frame_rate_hz: float = 2.0
    pulse_frame: int = 2
    plate_thickness_mm: float = 2.5
    thermal_diffusivity_mm2_s: float = 0.08
    pulse_energy_au: float = 2.5
    noise_std_au: float = 0.02
    class_depths: list[float] = field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0])
    n_defects: tuple[int, int] = (2, 4)
    radius_px: tuple[float, float] = (4.0, 9.0)
    margin_px: float = 2.0

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        known = dict(d)
        for k in ("n_defects", "radius_px"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)


def random_specimen(cfg: GeneratorConfig, rng: np.random.Generator) -> SpecimenSpec:
    """Non-overlapping circular defects with depths drawn from ``cfg.class_depths``."""
    count = int(rng.integers(cfg.n_defects[0], cfg.n_defects[1] + 1))
    defects: list[Defect] = []
    attempts = 0
    while len(defects) < count and attempts < 1000:
        attempts += 1
        r = float(rng.uniform(*cfg.radius_px))
        lo = r + cfg.margin_px
        if 2 * lo >= min(cfg.n_y, cfg.n_x):
            continue
        cy = float(rng.uniform(lo, cfg.n_y - 1 - lo))
        cx = float(rng.uniform(lo, cfg.n_x - 1 - lo))
        if any(math.hypot(cy - d.center[0], cx - d.center[1]) < r + d.radius_px + cfg.margin_px for d in defects):
            continue
        depth = float(cfg.class_depths[int(rng.integers(len(cfg.class_depths)))])
        defects.append(Defect((cy, cx), r, depth))
    return SpecimenSpec(cfg.plate_thickness_mm, cfg.thermal_diffusivity_mm2_s, defects,
                        cfg.pulse_energy_au, cfg.noise_std_au, list(cfg.class_depths))


def generate_dataset(cfg: GeneratorConfig, count: int, seed: int) -> list[tuple[ThermalSequence, GroundTruth]]:
    """``count`` specimens; specimen i uses its own stream spawned from ``seed``."""
    out = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        rng = np.random.default_rng(child)
        spec = random_specimen(cfg, rng)
        noise_seed = int(rng.integers(2 ** 63))
        out.append(simulate_pulse_sequence(spec, cfg.n_t, cfg.n_y, cfg.n_x, cfg.frame_rate_hz, noise_seed,
                                           pulse_frame=cfg.pulse_frame, id=f"seq_{i:04d}"))
    return out
