"""PCA and TSR compression of thermal sequences into network inputs.

PCA: each pixel's temporal response is standardized, the (pixels x time)
matrix is decomposed by SVD and every pixel response is projected onto the
leading temporal singular directions, giving one image per component.

TSR: every pixel's post-pulse rise is fitted by a degree-n polynomial in
log-log space; the n+1 coefficients become image channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from thermofuse.sequence import ThermalSequence

EPS_STD = 1e-8
EPS_LOG = 1e-9
DEFAULT_PCA_COMPONENTS = 10
DEFAULT_TSR_DEGREE = 5


@dataclass
class StandardizedMatrix:
    data: np.ndarray         # (n_t, P), float64
    pixel_means: np.ndarray  # (P,)
    pixel_stds: np.ndarray   # (P,)
    image_shape: tuple[int, int]


@dataclass
class PcaTensor:
    channels: np.ndarray         # (J, n_y, n_x)
    singular_values: np.ndarray  # (J,), descending

    @property
    def n_components(self) -> int:
        return self.channels.shape[0]


@dataclass
class TsrTensor:
    channels: np.ndarray  # (n+1, n_y, n_x), a_0 first
    degree: int
    reference_time_s: float = 1.0
    epsilon: float = EPS_LOG


def standardize(seq, image_shape: tuple[int, int] | None = None) -> StandardizedMatrix:
    """Per-pixel temporal z-score of a sequence (or of an (n_t, P) matrix).

    Pixels whose trace is exactly constant map to an all-zero column.
    """
    if isinstance(seq, ThermalSequence):
        n_t, n_y, n_x = seq.shape
        X = seq.frames.reshape(n_t, n_y * n_x).astype(np.float64)
        image_shape = (n_y, n_x)
    else:
        X = np.asarray(seq, dtype=np.float64)
        X = X.reshape(X.shape[0], -1)
        image_shape = image_shape or (1, X.shape[1])
    mean = X.mean(axis=0)
    std = X.std(axis=0, ddof=1)
    data = (X - mean) / np.maximum(std, EPS_STD)
    data[:, np.all(X == X[0], axis=0)] = 0.0
    return StandardizedMatrix(data, mean, std, tuple(image_shape))


def _fix_signs(vt: np.ndarray) -> np.ndarray:
    """Flip rows so each row's largest-magnitude entry is positive."""
    pivot = vt[np.arange(vt.shape[0]), np.argmax(np.abs(vt), axis=1)]
    return np.where(pivot < 0, -1.0, 1.0)


def pca_images(std: StandardizedMatrix, J: int = DEFAULT_PCA_COMPONENTS) -> PcaTensor:
    A = std.data.T  # pixels x time
    P, n_t = A.shape
    if not 1 <= J <= min(n_t, P):
        raise ValueError(f"J={J} must lie in [1, min(n_t, P)] = [1, {min(n_t, P)}]")
    # tall case: the triangular factor has the same singular values and right vectors
    core = np.linalg.qr(A, mode="r") if P > n_t else A
    _, s, vt = np.linalg.svd(core, full_matrices=False)
    vt = vt[:J] * _fix_signs(vt[:J])[:, None]
    channels = (A @ vt.T).T.reshape(J, *std.image_shape)
    return PcaTensor(channels, s[:J].copy())


# -- TSR ------------------------------------------------------------------------

class RankDeficientError(ValueError):
    pass


def _log_design(times, degree: int, reference_time_s: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size < degree + 1:
        raise ValueError(f"need at least {degree + 1} samples for a degree-{degree} fit")
    if np.any(times <= 0) or np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly positive and increasing")
    V = np.vander(np.log(times / reference_time_s), degree + 1, increasing=True)
    Q, R = np.linalg.qr(V)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-12 * max(diag.max(), 1e-300):
        raise RankDeficientError("log-time design matrix is rank deficient")
    return Q, R


def _qr_solve(Q: np.ndarray, R: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Solve R a = Q^T Y column by column.

    Reductions are explicit elementwise loops so one column gives bit-identical
    results whether it is solved alone or inside a batch.
    """
    n_s, n_c = Q.shape
    rhs = np.zeros((n_c, Y.shape[1]))
    for k in range(n_s):
        rhs += Q[k][:, None] * Y[k][None, :]
    coef = np.zeros_like(rhs)
    for i in range(n_c - 1, -1, -1):
        acc = rhs[i].copy()
        for j in range(i + 1, n_c):
            acc -= R[i, j] * coef[j]
        coef[i] = acc / R[i, i]
    return coef


def _log_rise(delta_t) -> np.ndarray:
    return np.log(np.maximum(np.asarray(delta_t, dtype=np.float64), EPS_LOG))


def tsr_fit_pixel(times, delta_t, degree: int = DEFAULT_TSR_DEGREE, reference_time_s: float = 1.0) -> np.ndarray:
    """Coefficients a_0..a_n of ln(dT) ~ sum_i a_i ln(t)^i (least squares via QR)."""
    Q, R = _log_design(times, degree, reference_time_s)
    y = _log_rise(delta_t)
    if y.shape != (Q.shape[0],):
        raise ValueError("times and delta_t lengths differ")
    return _qr_solve(Q, R, y[:, None])[:, 0]


def tsr_fit_many(times, delta_t: np.ndarray, degree: int = DEFAULT_TSR_DEGREE,
                 reference_time_s: float = 1.0) -> np.ndarray:
    """Fit every column of ``delta_t`` (n_samples, P); returns (n+1, P)."""
    Q, R = _log_design(times, degree, reference_time_s)
    return _qr_solve(Q, R, _log_rise(delta_t))


def post_pulse_rise(seq: ThermalSequence) -> tuple[np.ndarray, np.ndarray]:
    """Times (s) and rises relative to the flash frame for frames after it."""
    k0 = seq.pulse_frame
    frames = seq.frames.astype(np.float64)
    rise = frames[k0 + 1:] - frames[k0]
    return seq.times()[k0 + 1:], rise


def tsr_images(seq: ThermalSequence, degree: int = DEFAULT_TSR_DEGREE, reference_time_s: float = 1.0) -> TsrTensor:
    n_post = seq.n_t - seq.pulse_frame - 1
    if n_post < degree + 2:
        raise ValueError(f"{n_post} post-pulse frames; degree {degree} needs at least {degree + 2}")
    times, rise = post_pulse_rise(seq)
    n_y, n_x = seq.shape[1:]
    coef = tsr_fit_many(times, rise.reshape(len(times), -1), degree, reference_time_s)
    return TsrTensor(coef.reshape(degree + 1, n_y, n_x), degree, reference_time_s, EPS_LOG)


def compress(seq: ThermalSequence, J: int = DEFAULT_PCA_COMPONENTS,
             degree: int = DEFAULT_TSR_DEGREE) -> tuple[PcaTensor, TsrTensor]:
    return pca_images(standardize(seq), J), tsr_images(seq, degree)
