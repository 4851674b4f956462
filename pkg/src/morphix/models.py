"""Denoiser contract and its two reference implementations.

AnalyticGaussianModel is a closed-form optimal denoiser for x0 ~ N(mu, s2 I),
used as a verification oracle. ToyDenoiser is a small trainable conv
encoder/decoder with a self-attention layer per decoder stage; torch supplies
its autodiff (VJP) and training machinery.

Parameters live on the float32 grid (snapped after init and after every
optimizer step) while all computation runs in float64, so checkpoints that
store 32-bit floats round-trip bit-exactly. Attention keys/values are also
quantized to the float32 grid in the forward pass, which lets the trajectory
bank cache them losslessly. torch is pinned to a single thread to keep runs
reproducible.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from morphix.latent_core import LatentGrid
from morphix.sampling import EPSILON, V_PREDICTION, NoiseSchedule, make_schedule

torch.set_num_threads(1)

KVHook = Callable[[int, np.ndarray, np.ndarray], Optional[tuple[np.ndarray, np.ndarray]]]

CHECKPOINT_MAGIC = b"MRXM"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not parse as a valid model file."""


@dataclass(frozen=True)
class Condition:
    """Class-label conditioning; class_id None is the unconditional null token."""

    class_id: Optional[int] = None


def _class_index(cond, num_classes: int) -> int:
    """Map a Condition (or None) to an embedding row; the last row is the null token."""
    if cond is None or cond.class_id is None:
        return num_classes
    cid = int(cond.class_id)
    if not 0 <= cid < num_classes:
        raise ValueError(f"class id {cid} outside vocabulary of size {num_classes}")
    return cid


class AnalyticGaussianModel:
    """Optimal epsilon-predictor for data drawn from N(mu, s2 I).

    eps*(x_t, t) = sqrt(1-ab_t) (x_t - sqrt(ab_t) mu) / (ab_t s2 + 1 - ab_t).
    Feature taps are a single identity view of the latent (layer 0), so the
    VJP of any tap functional is the cotangent itself.
    """

    prediction_kind = EPSILON
    has_attention = False
    tap_layers: tuple[int, ...] = (0,)

    def __init__(self, mean: LatentGrid, var: float, schedule: NoiseSchedule):
        if var < 0:
            raise ValueError("variance must be >= 0")
        self.mean = mean
        self.var = float(var)
        self.schedule = schedule
        self.latent_shape = mean.shape

    def predict(self, z: LatentGrid, t: int, cond=None) -> LatentGrid:
        return self.predict_with_features(z, t, cond)[0]

    def predict_with_features(self, z: LatentGrid, t: int, cond=None,
                              want_taps: Sequence[int] = (), kv_hook: KVHook | None = None):
        if z.shape != self.latent_shape:
            raise ValueError(f"latent shape {z.shape} != model shape {self.latent_shape}")
        for layer in want_taps:
            if layer not in self.tap_layers:
                raise ValueError(f"undeclared tap layer {layer}")
        ab = self.schedule.alpha_bar[self.schedule._check(t)]
        denom = ab * self.var + (1.0 - ab)
        if denom == 0.0:
            pred = LatentGrid(np.zeros(z.shape))
        else:
            pred = LatentGrid(math.sqrt(1.0 - ab) * (z.values - math.sqrt(ab) * self.mean.values) / denom)
        taps = {0: z.values.copy()} if 0 in want_taps else {}
        return pred, taps

    def vjp_wrt_latent(self, z: LatentGrid, t: int, cond,
                       tap_cotangents: Mapping[int, np.ndarray], kv_hook: KVHook | None = None) -> LatentGrid:
        grad = np.zeros(z.shape)
        for layer, cot in tap_cotangents.items():
            if layer not in self.tap_layers:
                raise ValueError(f"undeclared tap layer {layer}")
            cot = np.asarray(cot, dtype=np.float64)
            if cot.shape != z.shape:
                raise ValueError(f"cotangent shape {cot.shape} != tap shape {z.shape}")
            grad = grad + cot
        return LatentGrid(grad)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.mean.values.tobytes())
        h.update(struct.pack("<d", self.var))
        return h.hexdigest()


def _quantize_f32(x: torch.Tensor) -> torch.Tensor:
    return x.to(torch.float32).to(torch.float64)


class _SelfAttention2d(nn.Module):
    """Single-head scaled dot-product attention over the spatial grid."""

    def __init__(self, channels: int, layer_index: int):
        super().__init__()
        self.layer_index = layer_index
        self.channels = channels
        self.to_q = nn.Linear(channels, channels, dtype=torch.float64)
        self.to_k = nn.Linear(channels, channels, dtype=torch.float64)
        self.to_v = nn.Linear(channels, channels, dtype=torch.float64)
        self.proj = nn.Linear(channels, channels, dtype=torch.float64)

    def forward(self, x: torch.Tensor, kv_hook: KVHook | None = None,
                attn_out: Optional[dict] = None) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).transpose(1, 2)  # (B, N, C)
        q = self.to_q(tokens)
        k = _quantize_f32(self.to_k(tokens))
        v = _quantize_f32(self.to_v(tokens))
        if kv_hook is not None:
            if b != 1:
                raise ValueError("K/V hooks require a single-item batch")
            replacement = kv_hook(self.layer_index,
                                  k[0].detach().cpu().numpy(),
                                  v[0].detach().cpu().numpy())
            if replacement is not None:
                k_new, v_new = replacement
                if k_new.shape != (h * w, c) or v_new.shape != (h * w, c):
                    raise ValueError("injected K/V shape mismatch")
                k = torch.from_numpy(np.asarray(k_new, dtype=np.float64)).unsqueeze(0)
                v = torch.from_numpy(np.asarray(v_new, dtype=np.float64)).unsqueeze(0)
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        if attn_out is not None:
            attn_out[self.layer_index] = weights.detach()
        out = self.proj(weights @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ToyDenoiser(nn.Module):
    """Small conv encoder/decoder with timestep+class embedding.

    Three decoder stages at rising resolution, each ending in a
    self-attention layer; those attention outputs are the feature taps
    (layers 1..3). Latent dims must be divisible by 4.
    """

    has_attention = True
    tap_layers: tuple[int, ...] = (1, 2, 3)

    def __init__(self, latent_shape: tuple[int, int, int] = (4, 32, 32),
                 base_ch: int = 32, emb_dim: int = 64, num_classes: int = 2,
                 prediction_kind: str = EPSILON, seed: int = 0,
                 schedule_steps: int = 1000):
        super().__init__()
        c, h, w = latent_shape
        if h % 4 != 0 or w % 4 != 0:
            raise ValueError("latent dims must be divisible by 4")
        if prediction_kind not in (EPSILON, V_PREDICTION):
            raise ValueError(f"unknown prediction kind {prediction_kind!r}")
        self.latent_shape = latent_shape
        self.base_ch = base_ch
        self.emb_dim = emb_dim
        self.num_classes = num_classes
        self.prediction_kind = prediction_kind
        self.seed = seed
        self.schedule_steps = schedule_steps

        kw = {"dtype": torch.float64}
        ch = base_ch
        self.class_emb = nn.Embedding(num_classes + 1, emb_dim, **kw)
        self.t_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim, **kw), nn.SiLU(),
                                   nn.Linear(emb_dim, emb_dim, **kw))
        self.enc0 = nn.Conv2d(c, ch, 3, padding=1, **kw)
        self.enc1 = nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1, **kw)
        self.enc2 = nn.Conv2d(2 * ch, 2 * ch, 3, stride=2, padding=1, **kw)
        self.mid = nn.Conv2d(2 * ch, 2 * ch, 3, padding=1, **kw)
        self.emb_mid = nn.Linear(emb_dim, 2 * ch, **kw)
        self.dec1 = nn.Conv2d(2 * ch, 2 * ch, 3, padding=1, **kw)
        self.emb1 = nn.Linear(emb_dim, 2 * ch, **kw)
        self.attn1 = _SelfAttention2d(2 * ch, 1)
        self.up1 = nn.Conv2d(2 * ch, 2 * ch, 3, padding=1, **kw)
        self.dec2 = nn.Conv2d(2 * ch, 2 * ch, 3, padding=1, **kw)
        self.emb2 = nn.Linear(emb_dim, 2 * ch, **kw)
        self.attn2 = _SelfAttention2d(2 * ch, 2)
        self.up2 = nn.Conv2d(2 * ch, ch, 3, padding=1, **kw)
        self.dec3 = nn.Conv2d(ch, ch, 3, padding=1, **kw)
        self.emb3 = nn.Linear(emb_dim, ch, **kw)
        self.attn3 = _SelfAttention2d(ch, 3)
        self.out = nn.Conv2d(ch, c, 3, padding=1, **kw)

        self._init_params(seed)

    def _init_params(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.dim() == 4 else 1)
                std = 1.0 / math.sqrt(fan_in)
                if name.startswith("out."):
                    std *= 0.01  # near-zero initial prediction
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * std)
            else:
                with torch.no_grad():
                    p.zero_()
        self.snap_params()

    def snap_params(self) -> None:
        """Round every parameter to the nearest float32 value."""
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(_quantize_f32(p))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        half = self.emb_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
        args = t[:, None].to(torch.float64) * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=1)

    def forward_batch(self, x: torch.Tensor, t: torch.Tensor, class_idx: torch.Tensor,
                      want_taps: Sequence[int] = (), kv_hook: KVHook | None = None,
                      attn_out: Optional[dict] = None):
        emb = self.t_mlp(self._time_embedding(t)) + self.class_emb(class_idx)
        x0 = F.silu(self.enc0(x))
        x1 = F.silu(self.enc1(x0))
        x2 = F.silu(self.enc2(x1))
        hmid = F.silu(self.mid(x2) + self.emb_mid(emb)[:, :, None, None])

        taps: dict[int, torch.Tensor] = {}
        h1 = F.silu(self.dec1(hmid) + self.emb1(emb)[:, :, None, None]) + x2
        h1 = self.attn1(h1, kv_hook=kv_hook, attn_out=attn_out)
        if 1 in want_taps:
            taps[1] = h1
        u1 = F.interpolate(h1, scale_factor=2, mode="nearest")
        u1 = F.silu(self.up1(u1)) + x1
        h2 = F.silu(self.dec2(u1) + self.emb2(emb)[:, :, None, None])
        h2 = self.attn2(h2, kv_hook=kv_hook, attn_out=attn_out)
        if 2 in want_taps:
            taps[2] = h2
        u2 = F.interpolate(h2, scale_factor=2, mode="nearest")
        u2 = F.silu(self.up2(u2)) + x0
        h3 = F.silu(self.dec3(u2) + self.emb3(emb)[:, :, None, None])
        h3 = self.attn3(h3, kv_hook=kv_hook, attn_out=attn_out)
        if 3 in want_taps:
            taps[3] = h3
        return self.out(h3), taps

    def _check_inputs(self, z: LatentGrid, want_taps: Sequence[int]) -> None:
        if z.shape != self.latent_shape:
            raise ValueError(f"latent shape {z.shape} != model shape {self.latent_shape}")
        for layer in want_taps:
            if layer not in self.tap_layers:
                raise ValueError(f"undeclared tap layer {layer}")

    def predict(self, z: LatentGrid, t: int, cond=None) -> LatentGrid:
        return self.predict_with_features(z, t, cond)[0]

    def predict_with_features(self, z: LatentGrid, t: int, cond=None,
                              want_taps: Sequence[int] = (), kv_hook: KVHook | None = None):
        self._check_inputs(z, want_taps)
        idx = _class_index(cond, self.num_classes)
        with torch.no_grad():
            x = torch.from_numpy(z.values.copy()).unsqueeze(0)
            tt = torch.tensor([float(t)], dtype=torch.float64)
            ci = torch.tensor([idx], dtype=torch.long)
            pred, taps = self.forward_batch(x, tt, ci, want_taps=want_taps, kv_hook=kv_hook)
        out = {layer: taps[layer][0].numpy().copy() for layer in taps}
        return LatentGrid(pred[0].numpy()), out

    def vjp_wrt_latent(self, z: LatentGrid, t: int, cond,
                       tap_cotangents: Mapping[int, np.ndarray], kv_hook: KVHook | None = None) -> LatentGrid:
        """Gradient w.r.t. z of sum_l <cotangent_l, tap_l(z)>."""
        self._check_inputs(z, tuple(tap_cotangents))
        idx = _class_index(cond, self.num_classes)
        x = torch.from_numpy(z.values.copy()).unsqueeze(0).requires_grad_(True)
        tt = torch.tensor([float(t)], dtype=torch.float64)
        ci = torch.tensor([idx], dtype=torch.long)
        _, taps = self.forward_batch(x, tt, ci, want_taps=tuple(tap_cotangents), kv_hook=kv_hook)
        total = x.new_zeros(())
        for layer, cot in tap_cotangents.items():
            cot = np.asarray(cot, dtype=np.float64)
            if cot.shape != tuple(taps[layer].shape[1:]):
                raise ValueError(f"cotangent shape {cot.shape} != tap shape {tuple(taps[layer].shape[1:])}")
            total = total + (torch.from_numpy(cot).unsqueeze(0) * taps[layer]).sum()
        (grad,) = torch.autograd.grad(total, x)
        return LatentGrid(grad[0].numpy())

    def attention_weights(self, z: LatentGrid, t: int, cond=None) -> dict[int, np.ndarray]:
        """Per-layer softmax attention matrices, for contract checks."""
        out: dict[int, np.ndarray] = {}
        idx = _class_index(cond, self.num_classes)
        with torch.no_grad():
            x = torch.from_numpy(z.values.copy()).unsqueeze(0)
            tt = torch.tensor([float(t)], dtype=torch.float64)
            ci = torch.tensor([idx], dtype=torch.long)
            self.forward_batch(x, tt, ci, attn_out=out)
        return {layer: w[0].numpy() for layer, w in out.items()}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().numpy().astype("<f4").tobytes())
        return h.hexdigest()


def make_two_class_dataset(latent_shape: tuple[int, int, int] = (4, 32, 32),
                           noise_std: float = 0.1):
    """Synthetic corpus: class 0 draws horizontal spectral tracks, class 1
    vertical ones. Returns sampler(rng) -> (x0 array, class_id)."""
    c, h, w = latent_shape

    def sampler(rng: np.random.Generator):
        class_id = int(rng.integers(0, 2))
        x = rng.normal(0.0, noise_std, size=latent_shape)
        n_tracks = int(rng.integers(1, 4))
        for _ in range(n_tracks):
            amp = rng.uniform(0.8, 1.6)
            if class_id == 0:
                row = int(rng.integers(0, w))
                x[:, :, row] += amp
            else:
                col = int(rng.integers(0, h))
                x[:, col, :] += amp
        return x - x.mean(), class_id

    return sampler


def toy_train(model: ToyDenoiser, dataset, steps: int, seed: int,
              schedule: NoiseSchedule | None = None, batch_size: int = 8,
              lr: float = 1e-3, p_uncond: float = 0.1) -> list[float]:
    """Denoising-MSE training; returns the per-step loss trace.

    Deterministic per seed: all randomness (batches, timesteps, noise,
    conditioning dropout) is drawn from one numpy generator.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return []
    schedule = schedule or make_schedule(model.schedule_steps, "linear")
    rng = np.random.default_rng(seed)
    optim = torch.optim.Adam(model.parameters(), lr=lr)
    trace: list[float] = []
    for _ in range(steps):
        xs, cls = [], []
        for _ in range(batch_size):
            x0, cid = dataset(rng)
            if x0.shape != model.latent_shape:
                raise ValueError(f"dataset shape {x0.shape} drifted from model shape {model.latent_shape}")
            xs.append(x0)
            cls.append(model.num_classes if rng.random() < p_uncond else cid)
        x0_b = torch.from_numpy(np.stack(xs).astype(np.float64))
        t_b = rng.integers(1, schedule.steps + 1, size=batch_size)
        eps_b = torch.from_numpy(rng.standard_normal(x0_b.shape))
        ab = torch.from_numpy(schedule.alpha_bar[t_b])[:, None, None, None]
        x_t = torch.sqrt(ab) * x0_b + torch.sqrt(1.0 - ab) * eps_b
        if model.prediction_kind == EPSILON:
            target = eps_b
        else:
            target = torch.sqrt(ab) * eps_b - torch.sqrt(1.0 - ab) * x0_b
        pred, _ = model.forward_batch(x_t, torch.from_numpy(t_b.astype(np.float64)),
                                      torch.from_numpy(np.asarray(cls, dtype=np.int64)))
        loss = ((pred - target) ** 2).mean()
        optim.zero_grad()
        loss.backward()
        optim.step()
        model.snap_params()
        trace.append(float(loss.detach()))
    return trace


def smoothed_loss(trace: Sequence[float], window: int = 100) -> tuple[float, float]:
    """(initial, final) window means of a loss trace."""
    if not trace:
        raise ValueError("empty trace")
    k = min(window, len(trace))
    return float(np.mean(trace[:k])), float(np.mean(trace[-k:]))


# --- checkpoint serialization ------------------------------------------------

def save_checkpoint(model: ToyDenoiser, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IB", CHECKPOINT_VERSION, 0 if model.prediction_kind == EPSILON else 1))
    c, h, w = model.latent_shape
    buf.write(struct.pack("<6I", c, h, w, model.base_ch, model.emb_dim, model.num_classes))
    buf.write(struct.pack("<qI", model.seed, model.schedule_steps))
    params = sorted(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        arr = p.detach().numpy()
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    data = buf.getvalue()
    _atomic_write(path, data)


def load_checkpoint(path) -> ToyDenoiser:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)

    def read(n: int) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise CheckpointFormatError("truncated checkpoint file")
        return chunk

    if read(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    version, kind_code = struct.unpack("<IB", read(5))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    c, h, w, base_ch, emb_dim, num_classes = struct.unpack("<6I", read(24))
    seed, schedule_steps = struct.unpack("<qI", read(12))
    kind = EPSILON if kind_code == 0 else V_PREDICTION
    model = ToyDenoiser(latent_shape=(c, h, w), base_ch=base_ch, emb_dim=emb_dim,
                        num_classes=num_classes, prediction_kind=kind, seed=seed,
                        schedule_steps=schedule_steps)
    (n_tensors,) = struct.unpack("<I", read(4))
    loaded = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", read(2))
        name = read(name_len).decode()
        (ndim,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(read(4 * count), dtype="<f4").reshape(shape)
        loaded[name] = arr
    if buf.read(1):
        raise CheckpointFormatError("trailing bytes in checkpoint")
    own = dict(model.named_parameters())
    if set(own) != set(loaded):
        raise CheckpointFormatError("parameter name set mismatch")
    with torch.no_grad():
        for name, p in own.items():
            if tuple(p.shape) != loaded[name].shape:
                raise CheckpointFormatError(f"shape mismatch for {name}")
            p.copy_(torch.from_numpy(loaded[name].astype(np.float64)))
    return model


def _atomic_write(path, data: bytes) -> None:
    import os
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
