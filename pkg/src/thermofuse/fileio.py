"""On-disk formats.

PTSEQ1 thermal sequences, PTMOD1 modality tensors, binary PGM class masks,
little-endian PFM depth maps and the JSON class-depth sidecar.

A PTSEQ1/PTMOD1 file is one line of UTF-8 JSON terminated by a single 0x0A
byte, followed by little-endian float32 samples (time- or channel-major, then
row-major).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from thermofuse.sequence import GroundTruth, InvariantError, ThermalSequence

SEQ_MAGIC = "PTSEQ1"
MOD_MAGIC = "PTMOD1"
_F32 = np.dtype("<f4")


class LoadError(Exception):
    """Base class for file decoding failures."""


class HeaderError(LoadError):
    pass


class PayloadSizeError(LoadError):
    pass


class NonFiniteError(LoadError):
    pass


class HeaderInvariantError(LoadError, InvariantError):
    """Header fields decode but violate container invariants (e.g. n_t = 0)."""


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8") + b"\n"


def _split_header(raw: bytes, magic: str) -> tuple[dict, bytes]:
    nl = raw.find(b"\n")
    if nl < 0:
        raise HeaderError("missing header terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise HeaderError(f"bad magic, expected {magic!r}")
    return header, raw[nl + 1:]


def _int_field(header: dict, key: str) -> int:
    value = header.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise HeaderError(f"header field {key!r} must be an integer")
    return value


def _decode_payload(payload: bytes, dims: tuple[int, ...]) -> np.ndarray:
    expected = int(np.prod(dims)) * _F32.itemsize
    if len(payload) != expected:
        raise PayloadSizeError(f"payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=_F32).reshape(dims)
    if not np.isfinite(data).all():
        raise NonFiniteError("payload contains non-finite samples")
    return data.astype(np.float32)


def encode_sequence(seq: ThermalSequence) -> bytes:
    n_t, n_y, n_x = seq.shape
    header = {
        "magic": SEQ_MAGIC,
        "n_t": n_t,
        "n_y": n_y,
        "n_x": n_x,
        "frame_rate_hz": float(seq.frame_rate_hz),
        "pulse_frame": int(seq.pulse_frame),
        "id": seq.id,
    }
    if seq.times_s is not None:
        header["times_s"] = [float(t) for t in seq.times_s]
    return _dump_header(header) + np.ascontiguousarray(seq.frames, dtype=_F32).tobytes()


def decode_sequence(raw: bytes) -> ThermalSequence:
    header, payload = _split_header(raw, SEQ_MAGIC)
    n_t, n_y, n_x = (_int_field(header, k) for k in ("n_t", "n_y", "n_x"))
    pulse = _int_field(header, "pulse_frame")
    rate = header.get("frame_rate_hz")
    if not isinstance(rate, (int, float)) or isinstance(rate, bool):
        raise HeaderError("header field 'frame_rate_hz' must be a number")
    if n_t < 2 or n_y < 1 or n_x < 1:
        raise HeaderInvariantError(f"invalid dimensions n_t={n_t}, n_y={n_y}, n_x={n_x}")
    if not 0 <= pulse < n_t or rate <= 0:
        raise HeaderInvariantError("pulse_frame or frame_rate_hz out of range")
    frames = _decode_payload(payload, (n_t, n_y, n_x))
    try:
        return ThermalSequence(frames, float(rate), pulse, str(header.get("id", "")),
                               times_s=header.get("times_s"))
    except InvariantError as exc:
        raise HeaderInvariantError(str(exc)) from None


def save_sequence(seq: ThermalSequence, path) -> None:
    Path(path).write_bytes(encode_sequence(seq))


def load_sequence(path) -> ThermalSequence:
    return decode_sequence(Path(path).read_bytes())


# -- modality tensors ---------------------------------------------------------

def save_modality(channels: np.ndarray, path, *, modality: str, id: str = "", extra: dict | None = None) -> None:
    if modality not in ("pca", "tsr"):
        raise ValueError(f"unknown modality {modality!r}")
    channels = np.asarray(channels)
    n_c, n_y, n_x = channels.shape
    header = {"magic": MOD_MAGIC, "n_c": n_c, "n_y": n_y, "n_x": n_x,
              "modality": modality, "id": id, "extra": extra or {}}
    Path(path).write_bytes(_dump_header(header) + np.ascontiguousarray(channels, dtype=_F32).tobytes())


def load_modality(path) -> tuple[np.ndarray, dict]:
    header, payload = _split_header(Path(path).read_bytes(), MOD_MAGIC)
    n_c, n_y, n_x = (_int_field(header, k) for k in ("n_c", "n_y", "n_x"))
    if header.get("modality") not in ("pca", "tsr"):
        raise HeaderError("header field 'modality' must be 'pca' or 'tsr'")
    if n_c < 1 or n_y < 1 or n_x < 1:
        raise HeaderInvariantError(f"invalid dimensions {n_c}x{n_y}x{n_x}")
    return _decode_payload(payload, (n_c, n_y, n_x)), header


# -- PGM / PFM ----------------------------------------------------------------

def _pnm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise HeaderError("truncated PNM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def save_pgm(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("PGM needs a 2-D label array")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("labels must fit in 0..255")
    h, w = labels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + labels.astype(np.uint8).tobytes())


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pnm_tokens(raw, 4)
    if magic != b"P5" or int(maxval) != 255:
        raise HeaderError("only binary P5 PGM with maxval 255 is supported")
    w, h = int(w), int(h)
    body = raw[pos:]
    if len(body) != w * h:
        raise PayloadSizeError(f"PGM body has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.int64)


def save_pfm(values: np.ndarray, path) -> None:
    """Greyscale PFM, little-endian (scale -1.0), rows stored bottom-to-top."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValueError("PFM needs a 2-D array")
    h, w = values.shape
    body = np.ascontiguousarray(values[::-1], dtype=_F32).tobytes()
    Path(path).write_bytes(b"Pf\n%d %d\n-1.0\n" % (w, h) + body)


def load_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (magic, w, h, scale), pos = _pnm_tokens(raw, 4)
    if magic != b"Pf":
        raise HeaderError("only greyscale 'Pf' PFM is supported")
    if float(scale) >= 0:
        raise HeaderError("big-endian PFM is not supported")
    w, h = int(w), int(h)
    body = raw[pos:]
    if len(body) != w * h * 4:
        raise PayloadSizeError(f"PFM body has {len(body)} bytes, expected {w * h * 4}")
    return np.frombuffer(body, dtype=_F32).reshape(h, w)[::-1].astype(np.float32)


# -- ground truth -------------------------------------------------------------

def ground_truth_paths(stem) -> tuple[Path, Path, Path]:
    stem = str(stem)
    return Path(stem + "_mask.pgm"), Path(stem + "_depth.pfm"), Path(stem + "_classes.json")


def save_ground_truth(gt: GroundTruth, stem) -> None:
    mask_p, depth_p, cls_p = ground_truth_paths(stem)
    save_pgm(gt.class_mask, mask_p)
    save_pfm(gt.depth_map, depth_p)
    cls_p.write_text(json.dumps({"class_depths": gt.class_depths, "max_depth_mm": gt.max_depth_mm}))


def load_ground_truth(stem) -> GroundTruth:
    mask_p, depth_p, cls_p = ground_truth_paths(stem)
    meta = json.loads(cls_p.read_text())
    return GroundTruth(load_pgm(mask_p), load_pfm(depth_p), meta["class_depths"],
                       meta.get("max_depth_mm", 2.5))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
