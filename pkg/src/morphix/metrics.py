"""Objective surrogate metrics and the synthetic edit benchmark generator.

Embeddings are handcrafted 64-band log energies (a stand-in for a learned
audio classifier), so the Frechet / KL numbers are structurally comparable
but not on any published scale. The benchmark generator composes tone,
chirp, and noise-burst events into (source, reference, target) triples with
exact constructive targets and ground-truth masks.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from morphix.audio import LOG_FLOOR, Spectrogram
from morphix.latent_core import MaskTransform, TFMask, mask_from_dict, mask_to_dict

EMBED_DIM = 64
KL_LOADING = 1e-6


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.shape != (EMBED_DIM,) or cov.shape != (EMBED_DIM, EMBED_DIM):
            raise ValueError("stats must be 64-dim")
        if not np.allclose(cov, cov.T, atol=1e-9):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))


def embed_spectrogram(s: Spectrogram) -> np.ndarray:
    """(frames, 64) log-band energies over a uniform split of the bins."""
    mag2 = np.exp(2.0 * s.values.astype(np.float64))
    bounds = [(i * s.bins) // EMBED_DIM for i in range(EMBED_DIM + 1)]
    bands = np.stack([mag2[:, bounds[i]:bounds[i + 1]].mean(axis=1)
                      for i in range(EMBED_DIM)], axis=1)
    return np.log(np.maximum(bands, LOG_FLOOR ** 2))


def gaussian_stats(embeddings: np.ndarray) -> GaussianStats:
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != EMBED_DIM:
        raise ValueError("embeddings must be (n, 64)")
    mean = emb.mean(axis=0)
    centered = emb - mean
    cov = centered.T @ centered / emb.shape[0]
    return GaussianStats(mean=mean, cov=cov)


def _psd_sqrt_eigs(m: np.ndarray) -> np.ndarray:
    eigs = np.linalg.eigvalsh(0.5 * (m + m.T))
    return np.sqrt(np.maximum(eigs, 0.0))


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))."""
    eigs_a, vecs_a = np.linalg.eigh(a.cov)
    root_a = (vecs_a * np.sqrt(np.maximum(eigs_a, 0.0))) @ vecs_a.T
    inner = root_a @ b.cov @ root_a
    tr_cross = float(_psd_sqrt_eigs(inner).sum())
    d = a.mean - b.mean
    val = float(d @ d + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_cross)
    return max(0.0, val)


def kl_divergence(a: GaussianStats, b: GaussianStats) -> float:
    """Gaussian KL(a || b) with diagonal loading for stability."""
    k = EMBED_DIM
    sa = a.cov + KL_LOADING * np.eye(k)
    sb = b.cov + KL_LOADING * np.eye(k)
    sb_inv = np.linalg.inv(sb)
    d = b.mean - a.mean
    _, logdet_a = np.linalg.slogdet(sa)
    _, logdet_b = np.linalg.slogdet(sb)
    val = 0.5 * (np.trace(sb_inv @ sa) + d @ sb_inv @ d - k + logdet_b - logdet_a)
    return max(0.0, float(val))


def masked_spectral_distance(a: Spectrogram, b: Spectrogram, m: TFMask) -> tuple[float, float]:
    """(masked, unmasked) RMS log-magnitude difference."""
    if a.values.shape != b.values.shape:
        raise ValueError("spectrogram shapes differ")
    if (m.time_len, m.freq_len) != (a.frames, a.bins):
        raise ValueError("mask dims do not match spectrograms")
    diff = (a.values.astype(np.float64) - b.values.astype(np.float64)) ** 2
    sel = m.bits
    masked = math.sqrt(diff[sel].mean()) if sel.any() else 0.0
    unmasked = math.sqrt(diff[~sel].mean()) if (~sel).any() else 0.0
    return masked, unmasked


# --- synthetic edit benchmark -------------------------------------------------

EDITSET_FRAMES = 64
EDITSET_BINS = 64
_EDITSET_NFFT = 2 * (EDITSET_BINS - 1)
_EDITSET_HOP = 32
_EDITSET_SR = 16000
_FLOOR = math.log(LOG_FLOOR)

TASK_CYCLE = ("add", "remove", "replace", "move", "stretch", "pitch_shift")


@dataclass
class EditTriple:
    kind: str
    source: Spectrogram
    target: Spectrogram
    mask_c: TFMask
    mask_r: TFMask
    reference: Optional[Spectrogram] = None
    reference_out: Optional[Spectrogram] = None
    transform: Optional[MaskTransform] = None
    seed: int = 0

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        for s in (self.source, self.target, self.reference, self.reference_out):
            h.update(b"\x00" if s is None else s.values.tobytes())
        h.update(self.mask_c.bits.tobytes())
        h.update(self.mask_r.bits.tobytes())
        if self.transform is not None:
            h.update(f"{self.transform.kind}:{self.transform.amount}".encode())
        return h.hexdigest()


def _blank() -> np.ndarray:
    return np.full((EDITSET_FRAMES, EDITSET_BINS), _FLOOR)


def _smooth_background(rng: np.random.Generator) -> np.ndarray:
    """Quiet bed, smoothed so 4x4 pooling loses little."""
    noise = rng.normal(0.0, 1.0, size=(EDITSET_FRAMES // 8 + 1, EDITSET_BINS // 8 + 1))
    t_idx = np.linspace(0, noise.shape[0] - 1.001, EDITSET_FRAMES)
    f_idx = np.linspace(0, noise.shape[1] - 1.001, EDITSET_BINS)
    ti, fi = np.meshgrid(t_idx, f_idx, indexing="ij")
    t0, f0 = ti.astype(int), fi.astype(int)
    tw, fw = ti - t0, fi - f0
    smooth = ((1 - tw) * (1 - fw) * noise[t0, f0] + tw * (1 - fw) * noise[t0 + 1, f0]
              + (1 - tw) * fw * noise[t0, f0 + 1] + tw * fw * noise[t0 + 1, f0 + 1])
    return _FLOOR + 1.5 + 0.8 * smooth


def _event_pattern(rng: np.random.Generator, kind: str, t_len: int, f_len: int) -> np.ndarray:
    """Log-magnitude pattern of one event, on a (t_len, f_len) patch."""
    amp = rng.uniform(1.0, 2.0)
    patch = np.full((t_len, f_len), -np.inf)
    if kind == "tone":
        row = f_len // 2
        patch[:, max(0, row - 1):row + 2] = amp
    elif kind == "chirp":
        for i in range(t_len):
            j = int(round(i * (f_len - 1) / max(1, t_len - 1)))
            patch[i, max(0, j - 1):j + 2] = amp
    else:  # noise burst
        patch[:, :] = amp - 0.5 + rng.uniform(0.0, 0.5, size=(t_len, f_len))
    return patch


def _place(canvas: np.ndarray, patch: np.ndarray, t0: int, f0: int) -> np.ndarray:
    """Additively mix a patch into a log-magnitude canvas."""
    out = canvas.copy()
    t1 = t0 + patch.shape[0]
    f1 = f0 + patch.shape[1]
    region = out[t0:t1, f0:f1]
    out[t0:t1, f0:f1] = np.logaddexp(region, patch)
    return out


def _spg(values: np.ndarray) -> Spectrogram:
    return Spectrogram(values=values.astype(np.float32), hop=_EDITSET_HOP,
                       n_fft=_EDITSET_NFFT, sample_rate=_EDITSET_SR)


def _rand_rect(rng: np.random.Generator, t_len: int, f_len: int) -> tuple[int, int]:
    t0 = int(rng.integers(8, EDITSET_FRAMES - t_len - 8))
    f0 = int(rng.integers(8, EDITSET_BINS - f_len - 8))
    return t0, f0


def make_synthetic_editset(seed: int, n: int) -> list[EditTriple]:
    """Deterministic benchmark triples cycling through the six edit kinds."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for i in range(n):
        kind = TASK_CYCLE[i % len(TASK_CYCLE)]
        out.append(_make_triple(kind, seed * 100003 + i))
    return out


def _make_triple(kind: str, seed: int) -> EditTriple:
    rng = np.random.default_rng(seed)
    bg = _smooth_background(rng)
    ev_kind = ("tone", "chirp", "noise")[int(rng.integers(0, 3))]
    t_len = int(rng.integers(16, 25))
    f_len = int(rng.integers(12, 21))
    patch = _event_pattern(rng, ev_kind, t_len, f_len)

    if kind == "add":
        tc, fc = _rand_rect(rng, t_len, f_len)
        tr, fr = _rand_rect(rng, t_len, f_len)
        source = bg
        reference = _place(_blank(), patch, tr, fr)
        target = _place(bg, patch, tc, fc)
        mask_c = TFMask.from_rect(EDITSET_FRAMES, EDITSET_BINS, tc, tc + t_len, fc, fc + f_len)
        mask_r = TFMask.from_rect(EDITSET_FRAMES, EDITSET_BINS, tr, tr + t_len, fr, fr + f_len)
        return EditTriple(kind, _spg(source), _spg(target), mask_c, mask_r,
                          reference=_spg(reference), seed=seed)

    if kind == "remove":
        tc, fc = _rand_rect(rng, t_len, f_len)
        source = _place(bg, patch, tc, fc)
        # reference: clipped sub-span of the event, placed where it occurred
        clip_len = max(4, t_len // 2)
        reference = _place(_blank(), patch[:clip_len], tc, fc)
        mask_c = TFMask.from_rect(EDITSET_FRAMES, EDITSET_BINS, tc, tc + t_len, fc, fc + f_len)
        mask_r = TFMask.from_rect(EDITSET_FRAMES, EDITSET_BINS, tc, tc + clip_len, fc, fc + f_len)
        return EditTriple(kind, _spg(source), _spg(bg), mask_c, mask_r,
                          reference=_spg(reference), seed=seed)

    if kind == "replace":
        other_kind = ("tone", "chirp", "noise")[int(rng.integers(0, 3))]
        patch_b = _event_pattern(rng, other_kind, t_len, f_len)
        tc, fc = _rand_rect(rng, t_len, f_len)
        tr, fr = _rand_rect(rng, t_len, f_len)
        source = _place(bg, patch, tc, fc)
        target = _place(bg, patch_b, tc, fc)
        ref_out = _place(_blank(), patch, tc, fc)
        ref_in = _place(_blank(), patch_b, tr, fr)
        mask_c = TFMask.from_rect(EDITSET_FRAMES, EDITSET_BINS, tc, tc + t_len, fc, fc + f_len)
        mask_r = TFMask.from_rect(EDITSET_FRAMES, EDITSET_BINS, tr, tr + t_len, fr, fr + f_len)
        return EditTriple(kind, _spg(source), _spg(target), mask_c, mask_r,
                          reference=_spg(ref_in), reference_out=_spg(ref_out), seed=seed)

    # geometric kinds: central placement keeps shifted/stretched events in bounds
    margin = 14
    tc = int(rng.integers(margin, EDITSET_FRAMES - t_len - margin + 1))
    fc = int(rng.integers(margin, EDITSET_BINS - f_len - margin + 1))
    source = _place(bg, patch, tc, fc)
    mask_c = TFMask.from_rect(EDITSET_FRAMES, EDITSET_BINS, tc, tc + t_len, fc, fc + f_len)
    if kind == "move":
        shift = int(rng.integers(6, 12)) * (1 if tc + t_len / 2 < EDITSET_FRAMES / 2 else -1)
        transform = MaskTransform("translate_time", shift)
        target = _place(bg, patch, tc + shift, fc)
    elif kind == "pitch_shift":
        shift = int(rng.integers(6, 12)) * (1 if fc + f_len / 2 < EDITSET_BINS / 2 else -1)
        transform = MaskTransform("translate_freq", shift)
        target = _place(bg, patch, tc, fc + shift)
    elif kind == "stretch":
        factor = 1.5
        transform = MaskTransform("scale_time", factor)
        new_len = int(round(t_len * factor))
        rows = np.clip(np.floor((np.arange(new_len) + 0.5) * t_len / new_len).astype(int), 0, t_len - 1)
        stretched = patch[rows]
        center = tc + t_len / 2.0
        new_t0 = int(round(center - new_len / 2.0))
        target = _place(bg, stretched, new_t0, fc)
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return EditTriple(kind, _spg(source), _spg(target), mask_c, mask_r=mask_c,
                      transform=transform, seed=seed)


# --- storage ------------------------------------------------------------------

def save_editset(triples: list[EditTriple], root) -> None:
    import os
    from morphix.audio import save_spectrogram
    os.makedirs(root, exist_ok=True)
    for i, tr in enumerate(triples):
        d = os.path.join(root, f"case_{i:04d}")
        os.makedirs(d, exist_ok=True)
        save_spectrogram(tr.source, os.path.join(d, "source.spg"))
        save_spectrogram(tr.target, os.path.join(d, "target.spg"))
        manifest = {
            "kind": tr.kind,
            "seed": tr.seed,
            "mask_c": mask_to_dict(tr.mask_c),
            "mask_r": mask_to_dict(tr.mask_r),
        }
        if tr.reference is not None:
            save_spectrogram(tr.reference, os.path.join(d, "reference.spg"))
        if tr.reference_out is not None:
            save_spectrogram(tr.reference_out, os.path.join(d, "reference_out.spg"))
        if tr.transform is not None:
            manifest["transform"] = {"kind": tr.transform.kind, "amount": tr.transform.amount}
        with open(os.path.join(d, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)


def load_editset(root) -> list[EditTriple]:
    import os
    from morphix.audio import load_spectrogram
    out = []
    for name in sorted(os.listdir(root)):
        d = os.path.join(root, name)
        if not os.path.isdir(d):
            continue
        with open(os.path.join(d, "manifest.json")) as fh:
            manifest = json.load(fh)
        tr = EditTriple(
            kind=manifest["kind"],
            source=load_spectrogram(os.path.join(d, "source.spg")),
            target=load_spectrogram(os.path.join(d, "target.spg")),
            mask_c=mask_from_dict(manifest["mask_c"]),
            mask_r=mask_from_dict(manifest["mask_r"]),
            seed=manifest.get("seed", 0),
        )
        ref_path = os.path.join(d, "reference.spg")
        if os.path.exists(ref_path):
            tr.reference = load_spectrogram(ref_path)
        out_path = os.path.join(d, "reference_out.spg")
        if os.path.exists(out_path):
            tr.reference_out = load_spectrogram(out_path)
        if "transform" in manifest:
            tr.transform = MaskTransform(manifest["transform"]["kind"], manifest["transform"]["amount"])
        out.append(tr)
    return out
