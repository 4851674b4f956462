"""Waveform <-> spectrogram conversion, file formats, and the latent bridge.

The latent bridge is a deterministic stand-in for a learned autoencoder:
each 4x4 spectrogram patch pools into 4 channel values (one per frequency
row of the patch), and the inverse broadcasts them back. It is exactly
invertible on pooled content, which keeps spatial reasoning about masks
valid at latent resolution.
"""

from __future__ import annotations

import io
import math
import os
import struct
import wave
from dataclasses import dataclass

import numpy as np

from morphix.latent_core import LatentGrid, TFMask

LOG_FLOOR = 1e-5
BRIDGE_FACTOR = 4

SPG_MAGIC = b"SPG1"
SPG_VERSION = 1


class AudioFormatError(ValueError):
    """Bytes do not parse as the expected audio/spectrogram format."""


@dataclass(frozen=True)
class Waveform:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("waveform must be mono (1-d)")
        if not np.all(np.isfinite(arr)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 512
    hop: int = 128

    def __post_init__(self):
        if self.hop > self.n_fft:
            raise ValueError("hop must be <= n_fft")
        if self.n_fft < 8 or self.n_fft % 2:
            raise ValueError("n_fft must be even and >= 8")

    def to_dict(self) -> dict:
        return {"n_fft": self.n_fft, "hop": self.hop}

    @classmethod
    def from_dict(cls, obj: dict) -> "StftConfig":
        return cls(n_fft=int(obj.get("n_fft", 512)), hop=int(obj.get("hop", 128)))


@dataclass(frozen=True)
class Spectrogram:
    """Log-magnitude STFT frames; values are float32, ln(max(mag, 1e-5))."""

    values: np.ndarray  # (frames, bins)
    hop: int
    n_fft: int
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError("spectrogram must be 2-d (frames, bins)")
        if arr.shape[1] != self.n_fft // 2 + 1:
            raise ValueError(f"bins {arr.shape[1]} != n_fft/2+1 = {self.n_fft // 2 + 1}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("spectrogram contains non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    def magnitudes(self) -> np.ndarray:
        return np.exp(self.values.astype(np.float64))

    def replace_values(self, values: np.ndarray) -> "Spectrogram":
        return Spectrogram(values=values, hop=self.hop, n_fft=self.n_fft,
                           sample_rate=self.sample_rate)


def _hann(n: int) -> np.ndarray:
    # periodic Hann, COLA at hop = n/4
    return 0.5 - 0.5 * np.cos(2.0 * math.pi * np.arange(n) / n)


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Hann-windowed magnitude STFT, reflect center-padded, log-compressed."""
    if w.samples.size < cfg.n_fft:
        raise ValueError(f"waveform shorter than one FFT frame ({cfg.n_fft} samples)")
    pad = cfg.n_fft // 2
    x = np.pad(w.samples, (pad, pad), mode="reflect")
    n_frames = 1 + (x.size - cfg.n_fft) // cfg.hop
    win = _hann(cfg.n_fft)
    frames = np.stack([x[i * cfg.hop:i * cfg.hop + cfg.n_fft] * win for i in range(n_frames)])
    mag = np.abs(np.fft.rfft(frames, axis=1))
    logmag = np.log(np.maximum(mag, LOG_FLOOR))
    return Spectrogram(values=logmag.astype(np.float32), hop=cfg.hop,
                       n_fft=cfg.n_fft, sample_rate=w.sample_rate)


def _istft(spec_complex: np.ndarray, n_fft: int, hop: int, out_len: int) -> np.ndarray:
    win = _hann(n_fft)
    n_frames = spec_complex.shape[0]
    total = n_fft + (n_frames - 1) * hop
    acc = np.zeros(total)
    norm = np.zeros(total)
    frames = np.fft.irfft(spec_complex, n=n_fft, axis=1)
    for i in range(n_frames):
        acc[i * hop:i * hop + n_fft] += frames[i] * win
        norm[i * hop:i * hop + n_fft] += win * win
    acc = acc / np.maximum(norm, 1e-12)
    pad = n_fft // 2
    return acc[pad:pad + out_len]


def griffin_lim(s: Spectrogram, iters: int = 32, seed: int = 0,
                momentum: float = 0.99) -> Waveform:
    """Iterative phase reconstruction from the stored magnitudes.

    Random initial phase drawn from the seed; deterministic per seed. The
    momentum term is the standard fast-Griffin-Lim acceleration; the
    reconstruction matches the source magnitudes, while the waveform phase
    is inherently ambiguous (any time shift is an equally valid answer).
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    rng = np.random.default_rng(seed)
    mag = s.magnitudes()
    phase = rng.uniform(0.0, 2.0 * math.pi, size=mag.shape)
    out_len = (s.frames - 1) * s.hop
    if out_len < s.n_fft:
        out_len = s.n_fft
    cfg = StftConfig(n_fft=s.n_fft, hop=s.hop)
    angles = np.exp(1j * phase)
    prev = None
    for _ in range(iters):
        x = _istft(mag * angles, s.n_fft, s.hop, out_len)
        rebuilt = _stft_complex(x, cfg)[:s.frames]
        update = rebuilt if prev is None else rebuilt - (momentum / (1.0 + momentum)) * prev
        angles = update / np.maximum(np.abs(update), 1e-16)
        prev = rebuilt
    x = _istft(mag * angles, s.n_fft, s.hop, out_len)
    peak = np.abs(x).max()
    if peak > 1.0:
        x = x / peak
    return Waveform(sample_rate=s.sample_rate, samples=x)


def _stft_complex(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    pad = cfg.n_fft // 2
    xp = np.pad(x, (pad, pad), mode="reflect")
    n_frames = 1 + (xp.size - cfg.n_fft) // cfg.hop
    win = _hann(cfg.n_fft)
    frames = np.stack([xp[i * cfg.hop:i * cfg.hop + cfg.n_fft] * win for i in range(n_frames)])
    return np.fft.rfft(frames, axis=1)


# --- latent bridge -----------------------------------------------------------

def spectrogram_to_latent(s: Spectrogram) -> LatentGrid:
    """Pool each 4x4 patch into 4 per-frequency-row channel values."""
    t, f = s.frames, s.bins
    if t % BRIDGE_FACTOR or f % BRIDGE_FACTOR:
        raise ValueError(f"spectrogram dims ({t},{f}) not divisible by {BRIDGE_FACTOR}")
    vals = s.values.astype(np.float64)
    tt, ff = t // BRIDGE_FACTOR, f // BRIDGE_FACTOR
    blocks = vals.reshape(tt, BRIDGE_FACTOR, ff, BRIDGE_FACTOR)
    # channel k = mean over the patch's time cells of frequency row k
    latent = blocks.mean(axis=1).transpose(2, 0, 1)  # (4, tt, ff)
    return LatentGrid(latent)


def latent_to_spectrogram(z: LatentGrid, like: Spectrogram) -> Spectrogram:
    """Broadcast latent values back to full spectrogram resolution."""
    c, tt, ff = z.shape
    if c != BRIDGE_FACTOR:
        raise ValueError(f"latent must have {BRIDGE_FACTOR} channels")
    if tt * BRIDGE_FACTOR != like.frames or ff * BRIDGE_FACTOR != like.bins:
        raise ValueError("latent dims do not match the target spectrogram")
    blocks = z.values.transpose(1, 2, 0)  # (tt, ff, 4)
    vals = np.repeat(blocks[:, None, :, :], BRIDGE_FACTOR, axis=1)  # (tt, 4, ff, 4ch)
    vals = vals.reshape(like.frames, like.bins)
    return like.replace_values(vals.astype(np.float32))


def latent_mask(m: TFMask, z_shape: tuple[int, int, int]) -> TFMask:
    """Downsample a spectrogram-resolution mask to latent resolution."""
    from morphix.latent_core import mask_downsample
    return mask_downsample(m, z_shape[1], z_shape[2])


# --- file formats ------------------------------------------------------------

def spectrogram_to_bytes(s: Spectrogram) -> bytes:
    buf = io.BytesIO()
    buf.write(SPG_MAGIC)
    buf.write(struct.pack("<6I", SPG_VERSION, s.frames, s.bins, s.hop, s.n_fft, s.sample_rate))
    buf.write(s.values.astype("<f4").tobytes())
    return buf.getvalue()


def spectrogram_from_bytes(data: bytes) -> Spectrogram:
    if len(data) < 28:
        raise AudioFormatError("truncated spectrogram file")
    if data[:4] != SPG_MAGIC:
        raise AudioFormatError("bad spectrogram magic")
    version, frames, bins, hop, n_fft, sr = struct.unpack("<6I", data[4:28])
    if version != SPG_VERSION:
        raise AudioFormatError(f"unsupported spectrogram version {version}")
    need = 28 + 4 * frames * bins
    if len(data) != need:
        raise AudioFormatError(f"spectrogram payload size mismatch ({len(data)} != {need})")
    vals = np.frombuffer(data[28:], dtype="<f4").reshape(frames, bins)
    return Spectrogram(values=vals.copy(), hop=hop, n_fft=n_fft, sample_rate=sr)


def save_spectrogram(s: Spectrogram, path) -> None:
    _atomic_write(path, spectrogram_to_bytes(s))


def load_spectrogram(path) -> Spectrogram:
    with open(path, "rb") as fh:
        return spectrogram_from_bytes(fh.read())


def waveform_to_bytes(w: Waveform) -> bytes:
    clipped = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())
    return buf.getvalue()


def waveform_from_bytes(data: bytes) -> Waveform:
    try:
        with wave.open(io.BytesIO(data), "rb") as wf:
            if wf.getnchannels() != 1:
                raise AudioFormatError("only mono WAV supported")
            if wf.getsampwidth() != 2:
                raise AudioFormatError("only 16-bit PCM WAV supported")
            sr = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"bad WAV file: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(sample_rate=sr, samples=samples)


def save_waveform(w: Waveform, path) -> None:
    _atomic_write(path, waveform_to_bytes(w))


def load_waveform(path) -> Waveform:
    with open(path, "rb") as fh:
        return waveform_from_bytes(fh.read())


# --- rendering ---------------------------------------------------------------

_VIRIDIS_ANCHORS = np.array([
    [68, 1, 84], [71, 44, 122], [59, 81, 139], [44, 113, 142],
    [33, 144, 141], [39, 173, 129], [92, 200, 99], [170, 220, 50], [253, 231, 37],
], dtype=np.float64)


def _colormap(x: np.ndarray) -> np.ndarray:
    """Map [0,1] to a viridis-like RGB ramp."""
    pos = np.clip(x, 0.0, 1.0) * (len(_VIRIDIS_ANCHORS) - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_VIRIDIS_ANCHORS) - 1)
    frac = (pos - lo)[..., None]
    return (1.0 - frac) * _VIRIDIS_ANCHORS[lo] + frac * _VIRIDIS_ANCHORS[hi]


def render_png(s: Spectrogram, mask: TFMask | None = None,
               vmin: float | None = None, vmax: float | None = None) -> bytes:
    """Render the spectrogram (freq up, time right) as PNG bytes.

    An optional mask is overlaid at 50% blend in white.
    """
    from PIL import Image

    vals = s.values.astype(np.float64)
    lo = float(vals.min()) if vmin is None else vmin
    hi = float(vals.max()) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    norm = (vals - lo) / span
    rgb = _colormap(norm)
    if mask is not None:
        if (mask.time_len, mask.freq_len) != (s.frames, s.bins):
            raise ValueError("mask dims do not match spectrogram")
        sel = mask.bits
        rgb[sel] = 0.5 * rgb[sel] + 0.5 * np.array([255.0, 255.0, 255.0])
    img = np.flipud(rgb.transpose(1, 0, 2)).astype(np.uint8)  # rows = freq desc
    im = Image.fromarray(img, mode="RGB")
    out = io.BytesIO()
    im.save(out, format="PNG")
    return out.getvalue()


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
