"""Masked feature-similarity energies and their injection into the sampler.

Energies are evaluated over aligned time-frequency regions of decoder
feature taps. The reference branch is always treated as a constant
(stop-gradient): gradient functions return cotangents for the current
branch only, which the caller pushes through the model VJP to get a
latent-space direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from morphix.latent_core import LatentGrid, TFMask, mask_downsample
from morphix.sampling import NoiseSchedule


class EmptyRegionError(ValueError):
    """A guidance mask has no cells left at the feature resolution."""


@dataclass(frozen=True)
class GuidanceWeights:
    """Strengths of the content/edit energy terms and the guidance step size.

    The underlying method leaves these free; the defaults here are artifact
    choices, not published values.
    """

    w_content: float = 1.0
    w_edit: float = 1.0
    eta_guidance: float = 1.0
    tap_layers: tuple[int, ...] = (2, 3)

    def __post_init__(self):
        if self.w_content < 0 or self.w_edit < 0 or self.eta_guidance < 0:
            raise ValueError("guidance weights must be >= 0")
        if not self.tap_layers:
            raise ValueError("at least one tap layer required")

    def to_dict(self) -> dict:
        return {"w_content": self.w_content, "w_edit": self.w_edit,
                "eta": self.eta_guidance, "layers": list(self.tap_layers)}

    @classmethod
    def from_dict(cls, obj: dict) -> "GuidanceWeights":
        return cls(
            w_content=float(obj.get("w_content", 1.0)),
            w_edit=float(obj.get("w_edit", 1.0)),
            eta_guidance=float(obj.get("eta", 1.0)),
            tap_layers=tuple(int(x) for x in obj.get("layers", (2, 3))),
        )


class RegionPair:
    """An edit region on the current grid paired with a reference region.

    Alignment maps each masked cell of the current region to a reference
    cell by bounding-box translation, nearest-neighbor resampled when the
    boxes differ in size. Masks are given at full spectrogram resolution
    and downsampled on demand to each feature resolution.
    """

    def __init__(self, mask_c: TFMask, mask_r: TFMask):
        if mask_c.is_empty() or mask_r.is_empty():
            raise EmptyRegionError("region masks must be nonempty")
        self.mask_c = mask_c
        self.mask_r = mask_r
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def aligned_cells(self, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        """(cells_c, cells_r): equal-length (K, 2) row/col index arrays at h x w."""
        key = (h, w)
        if key in self._cache:
            return self._cache[key]
        mc = mask_downsample(self.mask_c, h, w)
        mr = mask_downsample(self.mask_r, h, w)
        if mc.is_empty() or mr.is_empty():
            raise EmptyRegionError(f"mask vanished at feature resolution {h}x{w}")
        cells_c = np.argwhere(mc.bits)
        if np.array_equal(mc.bits, mr.bits):
            pair = (cells_c, cells_c.copy())
        else:
            bc = _bbox(mc.bits)
            br = _bbox(mr.bits)
            rel_t = (cells_c[:, 0] - bc[0] + 0.5) / (bc[1] - bc[0])
            rel_f = (cells_c[:, 1] - bc[2] + 0.5) / (bc[3] - bc[2])
            rt = np.clip(br[0] + np.floor(rel_t * (br[1] - br[0])).astype(int), br[0], br[1] - 1)
            rf = np.clip(br[2] + np.floor(rel_f * (br[3] - br[2])).astype(int), br[2], br[3] - 1)
            pair = (cells_c, np.stack([rt, rf], axis=1))
        self._cache[key] = pair
        return pair

    def identity_on_current(self, complement: bool = False) -> "RegionPair":
        """Region pair comparing the current grid against itself (content term)."""
        m = self.mask_c.complement() if complement else self.mask_c
        return RegionPair(m, m)


def _bbox(bits: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.nonzero(bits.any(axis=1))[0]
    cols = np.nonzero(bits.any(axis=0))[0]
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def _gather(tap: np.ndarray, cells: np.ndarray) -> np.ndarray:
    # (C, K) channel-major view of the masked feature values
    return tap[:, cells[:, 0], cells[:, 1]]


def _cosine(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float, float]:
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        return 0.0, nx, ny, 0.0
    c = float(np.dot(x, y) / (nx * ny))
    return min(1.0, max(-1.0, c)), nx, ny, 1.0

def masked_similarity(f_c: np.ndarray, m_c: TFMask, f_r: np.ndarray, m_r: TFMask) -> float:
    """0.5 cos + 0.5 over the aligned masked cells of two feature grids.

    Masks are taken at the grids' own resolution. Gradients flow through
    the first argument only (use masked_similarity_grad).
    """
    h, w = f_c.shape[1:]
    pair = RegionPair(m_c, m_r)
    cells_c, cells_r = pair.aligned_cells(h, w)
    x = _gather(f_c, cells_c).ravel()
    y = _gather(f_r, cells_r).ravel()
    cos, *_ = _cosine(x, y)
    return 0.5 * cos + 0.5


def _sim_and_grad(f_c: np.ndarray, cells_c: np.ndarray, f_r: np.ndarray,
                  cells_r: np.ndarray) -> tuple[float, np.ndarray]:
    """Similarity and its gradient w.r.t. f_c, scattered to the full grid."""
    x = _gather(f_c, cells_c).ravel()
    y = _gather(f_r, cells_r).ravel()
    cos, nx, ny, ok = _cosine(x, y)
    grad = np.zeros_like(f_c)
    if ok:
        gvec = 0.5 * (y / (nx * ny) - cos * x / (nx * nx))
        gmat = gvec.reshape(f_c.shape[0], -1)
        np.add.at(grad, (slice(None), cells_c[:, 0], cells_c[:, 1]), gmat)
    return 0.5 * cos + 0.5, grad


def _pooled_sim_and_grad(f_c: np.ndarray, cells_c: np.ndarray, f_r: np.ndarray,
                         cells_r: np.ndarray) -> tuple[float, np.ndarray]:
    """Similarity of spatially mean-pooled masked features, with gradient."""
    px = _gather(f_c, cells_c).mean(axis=1)
    py = _gather(f_r, cells_r).mean(axis=1)
    cos, nx, ny, ok = _cosine(px, py)
    grad = np.zeros_like(f_c)
    if ok:
        gp = 0.5 * (py / (nx * ny) - cos * px / (nx * nx))
        k = cells_c.shape[0]
        np.add.at(grad, (slice(None), cells_c[:, 0], cells_c[:, 1]),
                  np.repeat(gp[:, None] / k, k, axis=1))
    return 0.5 * cos + 0.5, grad


def _layer_cells(regions: RegionPair, tap: np.ndarray):
    return regions.aligned_cells(tap.shape[1], tap.shape[2])


def consistency_energy(taps_c: Mapping[int, np.ndarray], taps_r: Mapping[int, np.ndarray],
                       regions: RegionPair, layers: Sequence[int]) -> float:
    """Sum over layers of 1 / (1 + 4 sim); lower means more similar."""
    return consistency_energy_grad(taps_c, taps_r, regions, layers)[0]


def consistency_energy_grad(taps_c, taps_r, regions: RegionPair, layers: Sequence[int]):
    total = 0.0
    grads: dict[int, np.ndarray] = {}
    for layer in layers:
        cells_c, cells_r = _layer_cells(regions, taps_c[layer])
        sim, gsim = _sim_and_grad(taps_c[layer], cells_c, taps_r[layer], cells_r)
        total += 1.0 / (1.0 + 4.0 * sim)
        grads[layer] = (-4.0 / (1.0 + 4.0 * sim) ** 2) * gsim
    return total, grads


def contrast_energy(taps_c, taps_r, regions: RegionPair, layers: Sequence[int]) -> float:
    """Mean over layers of the pooled-feature similarity; minimizing it
    pushes the current region away from the reference."""
    return contrast_energy_grad(taps_c, taps_r, regions, layers)[0]


def contrast_energy_grad(taps_c, taps_r, regions: RegionPair, layers: Sequence[int]):
    total = 0.0
    grads: dict[int, np.ndarray] = {}
    n = len(layers)
    for layer in layers:
        cells_c, cells_r = _layer_cells(regions, taps_c[layer])
        sim, gsim = _pooled_sim_and_grad(taps_c[layer], cells_c, taps_r[layer], cells_r)
        total += sim / n
        grads[layer] = gsim / n
    return total, grads


def task_energy(kind: str, taps_now, taps_source, taps_reference,
                regions: RegionPair, w: GuidanceWeights) -> float:
    return task_energy_grad(kind, taps_now, taps_source, taps_reference, regions, w)[0]


def task_energy_grad(kind: str, taps_now, taps_source, taps_reference,
                     regions: RegionPair, w: GuidanceWeights):
    """Energy and cotangents (w.r.t. the current taps) for one edit task.

    add    : pull the edit region toward the source there and toward the
             aligned reference region.
    remove : pull the complement toward the source (preserve the rest) and
             push the edit region away from the reference globally.
    """
    if kind not in ("add", "remove"):
        raise ValueError(f"task energy defined for add/remove, got {kind!r}")
    layers = w.tap_layers
    total = 0.0
    grads: dict[int, np.ndarray] = {layer: np.zeros_like(taps_now[layer]) for layer in layers}
    if w.w_content > 0.0:
        content_pair = regions.identity_on_current(complement=(kind == "remove"))
        e, g = consistency_energy_grad(taps_now, taps_source, content_pair, layers)
        total += w.w_content * e
        for layer in layers:
            grads[layer] += w.w_content * g[layer]
    if w.w_edit > 0.0:
        if kind == "add":
            e, g = consistency_energy_grad(taps_now, taps_reference, regions, layers)
        else:
            e, g = contrast_energy_grad(taps_now, taps_reference, regions, layers)
        total += w.w_edit * e
        for layer in layers:
            grads[layer] += w.w_edit * g[layer]
    return total, grads


def guided_epsilon(eps: LatentGrid, grad_e: LatentGrid, t: int, s: NoiseSchedule,
                   eta_guidance: float) -> LatentGrid:
    """Shift the noise prediction along the energy gradient.

    Minimizing E means a score correction of -grad E, which enters the
    epsilon parameterization as +sqrt(1 - alpha_bar_t) grad E.
    """
    if eps.shape != grad_e.shape:
        raise ValueError("epsilon / gradient shape mismatch")
    if eta_guidance == 0.0:
        return eps
    return LatentGrid(eps.values + eta_guidance * math.sqrt(1.0 - s.alpha_bar[s._check(t)]) * grad_e.values)
