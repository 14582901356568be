"""Thermal sequence and ground-truth containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_MAX_DEPTH_MM = 2.5


class InvariantError(ValueError):
    """A container was built from values that break its invariants."""


@dataclass
class ThermalSequence:
    """Time-ordered stack of thermograms.

    ``frames`` has shape (n_t, n_y, n_x) and is stored as float32. Frame
    ``pulse_frame`` is the flash instant; ``times_s`` optionally overrides the
    uniform timestamps derived from the frame rate (used after frame sampling,
    where the retained frames are no longer evenly spaced).
    """

    frames: np.ndarray
    frame_rate_hz: float
    pulse_frame: int = 0
    id: str = ""
    times_s: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise InvariantError(f"frames must be 3-D (n_t, n_y, n_x), got shape {self.frames.shape}")
        n_t, n_y, n_x = self.frames.shape
        if n_t < 2:
            raise InvariantError(f"need at least 2 frames, got {n_t}")
        if n_y < 1 or n_x < 1:
            raise InvariantError(f"empty frame size {n_y}x{n_x}")
        if not (np.isfinite(self.frame_rate_hz) and self.frame_rate_hz > 0):
            raise InvariantError(f"frame rate must be positive, got {self.frame_rate_hz}")
        self.pulse_frame = int(self.pulse_frame)
        if not 0 <= self.pulse_frame < n_t:
            raise InvariantError(f"pulse_frame {self.pulse_frame} outside [0, {n_t})")
        if not np.isfinite(self.frames).all():
            raise InvariantError("frames contain non-finite samples")
        if self.times_s is not None:
            self.times_s = np.asarray(self.times_s, dtype=np.float64)
            if self.times_s.shape != (n_t,):
                raise InvariantError("times_s must hold one timestamp per frame")
            if np.any(np.diff(self.times_s) <= 0):
                raise InvariantError("times_s must be strictly increasing")

    @property
    def n_t(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape

    def times(self) -> np.ndarray:
        """Seconds relative to the flash for every frame."""
        if self.times_s is not None:
            return self.times_s
        return (np.arange(self.n_t) - self.pulse_frame) / float(self.frame_rate_hz)

    def replace(self, **changes) -> "ThermalSequence":
        kw = dict(frames=self.frames, frame_rate_hz=self.frame_rate_hz,
                  pulse_frame=self.pulse_frame, id=self.id, times_s=self.times_s)
        kw.update(changes)
        return ThermalSequence(**kw)


@dataclass
class GroundTruth:
    """Per-pixel class labels and defect depths (mm) for one specimen.

    Label 0 is sound material; label c > 0 is the defect class whose depth is
    ``class_depths[c]``.
    """

    class_mask: np.ndarray
    depth_map: np.ndarray
    class_depths: list[float]
    max_depth_mm: float = DEFAULT_MAX_DEPTH_MM

    def __post_init__(self):
        self.class_mask = np.asarray(self.class_mask).astype(np.int64)
        self.depth_map = np.asarray(self.depth_map, dtype=np.float32)
        self.class_depths = [float(d) for d in self.class_depths]
        if self.class_mask.ndim != 2 or self.class_mask.shape != self.depth_map.shape:
            raise InvariantError("class_mask and depth_map must be 2-D arrays of equal shape")
        if len(self.class_depths) < 1 or self.class_depths[0] != 0.0:
            raise InvariantError("class_depths[0] must be 0 (sound material)")
        if self.class_mask.min(initial=0) < 0 or self.class_mask.max(initial=0) >= self.n_classes:
            raise InvariantError(f"labels must lie in [0, {self.n_classes})")
        if not np.isfinite(self.depth_map).all():
            raise InvariantError("depth_map contains non-finite values")
        if self.depth_map.min(initial=0) < 0 or self.depth_map.max(initial=0) > self.max_depth_mm:
            raise InvariantError(f"depths must lie in [0, {self.max_depth_mm}] mm")
        if np.any((self.class_mask == 0) != (self.depth_map == 0)):
            raise InvariantError("depth_map must be 0 exactly where class_mask is 0")

    @property
    def n_classes(self) -> int:
        return len(self.class_depths)

    @property
    def shape(self) -> tuple[int, int]:
        return self.class_mask.shape

    def binary_mask(self) -> np.ndarray:
        return (self.class_mask > 0).astype(np.int64)
