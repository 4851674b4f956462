"""Latent grids, time-frequency masks, and the sphere geometry they live on.

Everything downstream (sampling, morphing, guidance) manipulates these two
value types. All operations are pure: inputs are never mutated and outputs
are freshly allocated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

# Angles below this are treated as collinear (SLERP falls back to LERP);
# angles within this of pi are rejected as antipodal.
COLLINEAR_EPS = 1e-6


class ShapeMismatchError(ValueError):
    """Two grids or masks that must be shape-compatible are not."""


class DegenerateGeometryError(ValueError):
    """Sphere operation undefined for the given inputs (zero norm, antipodal)."""


class MaskTransformError(ValueError):
    """A mask transform would leave no masked cell inside the grid."""


@dataclass(frozen=True)
class LatentGrid:
    """A (channels, time, freq) block of real latent values.

    The array is frozen after construction; derive new grids instead of
    mutating in place.
    """

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeMismatchError(f"latent grid must be 3-d (C,T,F), got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeMismatchError("latent grid must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("latent grid contains non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def time_len(self) -> int:
        return self.values.shape[1]

    @property
    def freq_len(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @classmethod
    def zeros(cls, channels: int, time_len: int, freq_len: int) -> "LatentGrid":
        return cls(np.zeros((channels, time_len, freq_len)))

    def __add__(self, other: "LatentGrid") -> "LatentGrid":
        _check_same_shape(self, other)
        return LatentGrid(self.values + other.values)

    def __sub__(self, other: "LatentGrid") -> "LatentGrid":
        _check_same_shape(self, other)
        return LatentGrid(self.values - other.values)

    def __mul__(self, scalar: float) -> "LatentGrid":
        return LatentGrid(self.values * float(scalar))

    __rmul__ = __mul__


def _check_same_shape(a: LatentGrid, b: LatentGrid) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"incompatible latent shapes {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class TFMask:
    """Boolean time-frequency region, time-major: bits[t, f]."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits, dtype=bool)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatchError(f"mask must be 2-d (time, freq) with positive dims, got {arr.shape}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def time_len(self) -> int:
        return self.bits.shape[0]

    @property
    def freq_len(self) -> int:
        return self.bits.shape[1]

    def popcount(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not self.bits.any()

    def complement(self) -> "TFMask":
        return TFMask(~self.bits)

    @classmethod
    def empty(cls, time_len: int, freq_len: int) -> "TFMask":
        return cls(np.zeros((time_len, freq_len), dtype=bool))

    @classmethod
    def full(cls, time_len: int, freq_len: int) -> "TFMask":
        return cls(np.ones((time_len, freq_len), dtype=bool))

    @classmethod
    def from_rect(cls, time_len: int, freq_len: int, t0: int, t1: int, f0: int, f1: int) -> "TFMask":
        bits = np.zeros((time_len, freq_len), dtype=bool)
        bits[t0:t1, f0:f1] = True
        return cls(bits)


_TRANSFORM_KINDS = ("translate_time", "translate_freq", "scale_time")


@dataclass(frozen=True)
class MaskTransform:
    """Geometric mask edit: shift in time/freq or stretch along time.

    amount is a signed cell count for translations and a positive scale
    factor for scale_time.
    """

    kind: str
    amount: float

    def __post_init__(self):
        if self.kind not in _TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "scale_time":
            if not (self.amount > 0):
                raise ValueError("scale factor must be > 0")
        else:
            if self.amount != int(self.amount):
                raise ValueError("translation amount must be an integer cell count")
        object.__setattr__(self, "amount", float(self.amount))


def slerp(z_a: LatentGrid, z_b: LatentGrid, alpha: float) -> LatentGrid:
    """Spherical linear interpolation between two latent grids.

    Interpolates over the flattened grids:
        sin((1-a)*w)/sin(w) * z_a + sin(a*w)/sin(w) * z_b
    with w the angle between them. Falls back to LERP when the grids are
    nearly collinear; rejects antipodal pairs where the path is undefined.
    """
    _check_same_shape(z_a, z_b)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    a = z_a.flat()
    b = z_b.flat()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateGeometryError("slerp undefined for zero-norm input")
    cos_w = float(np.dot(a, b) / (na * nb))
    cos_w = min(1.0, max(-1.0, cos_w))
    omega = math.acos(cos_w)
    if omega < COLLINEAR_EPS:
        out = (1.0 - alpha) * a + alpha * b
    elif math.pi - omega < COLLINEAR_EPS:
        raise DegenerateGeometryError("slerp undefined for antipodal inputs")
    else:
        sin_w = math.sin(omega)
        out = (math.sin((1.0 - alpha) * omega) / sin_w) * a + (math.sin(alpha * omega) / sin_w) * b
    return LatentGrid(out.reshape(z_a.shape))


def geodesic_distance(z_a: LatentGrid, z_b: LatentGrid) -> float:
    """Arc length between the direction vectors of two grids, in [0, pi]."""
    _check_same_shape(z_a, z_b)
    a = z_a.flat()
    b = z_b.flat()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateGeometryError("geodesic distance undefined for zero-norm input")
    cos_w = float(np.dot(a, b) / (na * nb))
    return math.acos(min(1.0, max(-1.0, cos_w)))


def tangent_project(g: LatentGrid, z: LatentGrid) -> LatentGrid:
    """Remove from g its component along z: g - (<g,z>/<z,z>) z."""
    _check_same_shape(g, z)
    zf = z.flat()
    zz = float(np.dot(zf, zf))
    if zz == 0.0:
        raise DegenerateGeometryError("tangent projection undefined for zero-norm base point")
    gf = g.flat()
    coef = float(np.dot(gf, zf)) / zz
    return LatentGrid((gf - coef * zf).reshape(g.shape))


def mask_downsample(m: TFMask, target_time: int, target_freq: int) -> TFMask:
    """Coarsen a mask; a target cell is set iff >= 50% of its block is set.

    Target dims must not exceed the source dims. Block boundaries follow
    the integer partition floor(i*src/target), so full and empty masks are
    preserved exactly.
    """
    if target_time < 1 or target_freq < 1:
        raise ValueError("target dims must be >= 1")
    if target_time > m.time_len or target_freq > m.freq_len:
        raise ValueError(
            f"mask_downsample cannot upsample: target ({target_time},{target_freq}) "
            f"exceeds source ({m.time_len},{m.freq_len})"
        )
    src = m.bits
    t_bounds = [(i * m.time_len) // target_time for i in range(target_time + 1)]
    f_bounds = [(j * m.freq_len) // target_freq for j in range(target_freq + 1)]
    out = np.zeros((target_time, target_freq), dtype=bool)
    for i in range(target_time):
        for j in range(target_freq):
            block = src[t_bounds[i]:t_bounds[i + 1], f_bounds[j]:f_bounds[j + 1]]
            out[i, j] = block.sum() * 2 >= block.size
    return TFMask(out)


def apply_mask_transform(m: TFMask, t: MaskTransform) -> TFMask:
    """Translate or time-stretch a mask, clipping at the grid bounds."""
    if t.kind == "translate_time":
        out = _translate(m.bits, int(t.amount), axis=0)
    elif t.kind == "translate_freq":
        out = _translate(m.bits, int(t.amount), axis=1)
    else:
        out = _scale_time(m.bits, t.amount)
    if not out.any():
        raise MaskTransformError(f"transform {t.kind} by {t.amount} maps mask fully out of bounds")
    return TFMask(out)


def transform_cell_map(m: TFMask, t: MaskTransform) -> dict[tuple[int, int], tuple[int, int]]:
    """Cell correspondence of a transform: target cell -> source cell.

    Covers exactly the cells of apply_mask_transform(m, t); used to align
    guidance regions for geometric edits.
    """
    out: dict[tuple[int, int], tuple[int, int]] = {}
    if t.kind in ("translate_time", "translate_freq"):
        dt = int(t.amount) if t.kind == "translate_time" else 0
        df = int(t.amount) if t.kind == "translate_freq" else 0
        for ti, fi in zip(*np.nonzero(m.bits)):
            tn, fn = int(ti) + dt, int(fi) + df
            if 0 <= tn < m.time_len and 0 <= fn < m.freq_len:
                out[(tn, fn)] = (int(ti), int(fi))
    else:
        rows = np.nonzero(m.bits.any(axis=1))[0]
        t0, t1 = int(rows[0]), int(rows[-1]) + 1
        length = t1 - t0
        new_len = max(1, int(round(length * t.amount)))
        center = (t0 + t1) / 2.0
        new_t0 = int(round(center - new_len / 2.0))
        for u in range(new_len):
            tn = new_t0 + u
            if not (0 <= tn < m.time_len):
                continue
            src_row = t0 + min(length - 1, max(0, int(math.floor((u + 0.5) * length / new_len))))
            for fi in np.nonzero(m.bits[src_row])[0]:
                out[(tn, int(fi))] = (src_row, int(fi))
    return out


def _translate(bits: np.ndarray, amount: int, axis: int) -> np.ndarray:
    out = np.zeros_like(bits)
    if amount == 0:
        return bits.copy()
    n = bits.shape[axis]
    if abs(amount) >= n:
        return out
    src = [slice(None), slice(None)]
    dst = [slice(None), slice(None)]
    if amount > 0:
        src[axis] = slice(0, n - amount)
        dst[axis] = slice(amount, n)
    else:
        src[axis] = slice(-amount, n)
        dst[axis] = slice(0, n + amount)
    out[tuple(dst)] = bits[tuple(src)]
    return out


def _scale_time(bits: np.ndarray, factor: float) -> np.ndarray:
    """Nearest-neighbor time rescale of the masked bounding box about its center."""
    out = np.zeros_like(bits)
    rows = np.nonzero(bits.any(axis=1))[0]
    if rows.size == 0:
        return out
    t0, t1 = int(rows[0]), int(rows[-1]) + 1
    length = t1 - t0
    new_len = max(1, int(round(length * factor)))
    center = (t0 + t1) / 2.0
    new_t0 = int(round(center - new_len / 2.0))
    for u in range(new_len):
        tn = new_t0 + u
        if not (0 <= tn < bits.shape[0]):
            continue
        src_row = t0 + min(length - 1, max(0, int(math.floor((u + 0.5) * length / new_len))))
        out[tn] = bits[src_row]
    return out


# --- mask JSON exchange -----------------------------------------------------
#
# {"time_len": int, "freq_len": int,
#  "rects": [{"t0": int, "t1": int, "f0": int, "f1": int}, ...]}
# Rects are half-open and combined by union.


def mask_to_json(m: TFMask) -> str:
    return json.dumps(mask_to_dict(m))


def mask_to_dict(m: TFMask) -> dict:
    rects = []
    # Row runs merged across consecutive time rows when the span matches.
    open_runs: dict[tuple[int, int], int] = {}  # (f0, f1) -> t0
    for t in range(m.time_len + 1):
        row_runs = set()
        if t < m.time_len:
            row = m.bits[t]
            f = 0
            while f < m.freq_len:
                if row[f]:
                    f0 = f
                    while f < m.freq_len and row[f]:
                        f += 1
                    row_runs.add((f0, f))
                else:
                    f += 1
        for span in list(open_runs):
            if span not in row_runs:
                t0 = open_runs.pop(span)
                rects.append({"t0": t0, "t1": t, "f0": span[0], "f1": span[1]})
        for span in row_runs:
            if span not in open_runs:
                open_runs[span] = t
    rects.sort(key=lambda r: (r["t0"], r["f0"], r["t1"], r["f1"]))
    return {"time_len": m.time_len, "freq_len": m.freq_len, "rects": rects}


def mask_from_json(text: str | bytes) -> TFMask:
    return mask_from_dict(json.loads(text))


def mask_from_dict(obj: dict) -> TFMask:
    try:
        time_len = int(obj["time_len"])
        freq_len = int(obj["freq_len"])
        rects = obj.get("rects", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"bad mask JSON: {exc}") from exc
    if time_len < 1 or freq_len < 1:
        raise ValueError("mask dims must be positive")
    bits = np.zeros((time_len, freq_len), dtype=bool)
    for r in rects:
        t0, t1 = int(r["t0"]), int(r["t1"])
        f0, f1 = int(r["f0"]), int(r["f1"])
        if not (0 <= t0 <= t1 <= time_len and 0 <= f0 <= f1 <= freq_len):
            raise ValueError(f"rect out of bounds: {r}")
        bits[t0:t1, f0:f1] = True
    return TFMask(bits)
