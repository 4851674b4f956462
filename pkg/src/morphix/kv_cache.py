"""Trajectory memory bank: attention K/V and rung latents from inversion.

A bank is written by one inversion (or recording sampling) run and then
frozen; during edited sampling its K/V replace the native ones at the
substitution layers, while queries stay native. Records are indexed by
inference-step ordinal, which both loops share. Everything is stored as
float32, matching the quantization the model applies to K/V in its own
forward pass, so caching is lossless.
"""

from __future__ import annotations

import io
import struct
from typing import Optional, Sequence

import numpy as np

from morphix.latent_core import LatentGrid

BANK_MAGIC = b"MRXB"
BANK_VERSION = 1


class BankFormatError(ValueError):
    """Bank bytes do not parse as a valid trajectory bank file."""


class TrajectoryBank:
    def __init__(self, num_steps: int, tap_layers: Sequence[int],
                 substitution_layers: Sequence[int] = (2, 3)):
        if num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        self.num_steps = int(num_steps)
        self.tap_layers = tuple(int(x) for x in tap_layers)
        self.substitution_layers = tuple(int(x) for x in substitution_layers)
        self._records: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self._rung_latents: list[Optional[np.ndarray]] = [None] * (self.num_steps + 1)

    # --- recording ---------------------------------------------------------

    def record(self, step: int, layer: int, keys: np.ndarray, values: np.ndarray) -> None:
        if not 0 <= step < self.num_steps:
            raise ValueError(f"step {step} out of range [0, {self.num_steps})")
        if (step, layer) in self._records:
            raise ValueError(f"duplicate K/V record at step={step} layer={layer}")
        k = np.ascontiguousarray(keys, dtype=np.float32)
        v = np.ascontiguousarray(values, dtype=np.float32)
        if k.shape != v.shape or k.ndim != 2:
            raise ValueError("keys/values must be matching (tokens, channels) grids")
        existing = next((kk for (s, l), (kk, _) in self._records.items() if l == layer), None)
        if existing is not None and existing.shape != k.shape:
            raise ValueError(f"K/V shape drift at layer {layer}")
        self._records[(step, layer)] = (k, v)

    def recorder(self, step: int):
        """kv_hook that records tap layers and never substitutes."""
        def hook(layer: int, keys: np.ndarray, values: np.ndarray):
            if layer in self.tap_layers:
                self.record(step, layer, keys, values)
            return None
        return hook

    def set_rung_latent(self, rung: int, z: LatentGrid) -> None:
        if not 0 <= rung <= self.num_steps:
            raise ValueError(f"rung {rung} out of range")
        self._rung_latents[rung] = z.values.astype(np.float32)

    # --- lookup ------------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self._records)

    @property
    def is_complete(self) -> bool:
        return self.size == self.num_steps * len(self.tap_layers)

    def has_rung_latents(self) -> bool:
        return all(x is not None for x in self._rung_latents)

    def rung_latent(self, rung: int) -> LatentGrid:
        arr = self._rung_latents[rung]
        if arr is None:
            raise ValueError(f"no latent recorded at rung {rung}")
        return LatentGrid(arr.astype(np.float64))

    def lookup(self, step: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self._records[(step, layer)]
        except KeyError:
            raise ValueError(f"missing K/V record at step={step} layer={layer}") from None

    def inject(self, step: int, layer: int, native_keys: np.ndarray,
               native_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cached K/V for substitution layers, native K/V otherwise."""
        if layer not in self.substitution_layers:
            return native_keys, native_values
        k, v = self.lookup(step, layer)
        return k.astype(np.float64), v.astype(np.float64)

    def injector(self, step: int):
        """kv_hook that substitutes cached K/V at the substitution layers."""
        def hook(layer: int, keys: np.ndarray, values: np.ndarray):
            if layer not in self.substitution_layers:
                return None
            k, v = self.lookup(step, layer)
            return k.astype(np.float64), v.astype(np.float64)
        return hook

    # --- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(BANK_MAGIC)
        buf.write(struct.pack("<II", BANK_VERSION, self.num_steps))
        buf.write(struct.pack("<I", len(self.tap_layers)))
        buf.write(struct.pack(f"<{len(self.tap_layers)}I", *self.tap_layers) if self.tap_layers else b"")
        buf.write(struct.pack("<I", len(self.substitution_layers)))
        if self.substitution_layers:
            buf.write(struct.pack(f"<{len(self.substitution_layers)}I", *self.substitution_layers))
        flags = 1 if any(x is not None for x in self._rung_latents) else 0
        buf.write(struct.pack("<I", flags))
        buf.write(struct.pack("<I", len(self._records)))
        for (step, layer) in sorted(self._records):
            k, v = self._records[(step, layer)]
            buf.write(struct.pack("<IIII", step, layer, k.shape[0], k.shape[1]))
            buf.write(k.astype("<f4").tobytes())
            buf.write(v.astype("<f4").tobytes())
        if flags & 1:
            for arr in self._rung_latents:
                if arr is None:
                    buf.write(struct.pack("<B", 0))
                else:
                    buf.write(struct.pack("<B", 1))
                    buf.write(struct.pack("<III", *arr.shape))
                    buf.write(arr.astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrajectoryBank":
        buf = io.BytesIO(data)

        def read(n: int) -> bytes:
            chunk = buf.read(n)
            if len(chunk) != n:
                raise BankFormatError("truncated bank file")
            return chunk

        if read(4) != BANK_MAGIC:
            raise BankFormatError("bad bank magic")
        version, num_steps = struct.unpack("<II", read(8))
        if version != BANK_VERSION:
            raise BankFormatError(f"unsupported bank version {version}")
        (n_layers,) = struct.unpack("<I", read(4))
        layers = struct.unpack(f"<{n_layers}I", read(4 * n_layers)) if n_layers else ()
        (n_sub,) = struct.unpack("<I", read(4))
        subs = struct.unpack(f"<{n_sub}I", read(4 * n_sub)) if n_sub else ()
        (flags,) = struct.unpack("<I", read(4))
        bank = cls(num_steps, layers, subs)
        (n_records,) = struct.unpack("<I", read(4))
        for _ in range(n_records):
            step, layer, n_tok, n_ch = struct.unpack("<IIII", read(16))
            count = n_tok * n_ch
            k = np.frombuffer(read(4 * count), dtype="<f4").reshape(n_tok, n_ch)
            v = np.frombuffer(read(4 * count), dtype="<f4").reshape(n_tok, n_ch)
            bank._records[(step, layer)] = (k.copy(), v.copy())
        if flags & 1:
            for rung in range(num_steps + 1):
                (present,) = struct.unpack("<B", read(1))
                if present:
                    c, t, f = struct.unpack("<III", read(12))
                    arr = np.frombuffer(read(4 * c * t * f), dtype="<f4").reshape(c, t, f)
                    bank._rung_latents[rung] = arr.copy()
        if buf.read(1):
            raise BankFormatError("trailing bytes in bank file")
        return bank


def save_bank(bank: TrajectoryBank, path) -> None:
    import os
    data = bank.to_bytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_bank(path) -> TrajectoryBank:
    with open(path, "rb") as fh:
        return TrajectoryBank.from_bytes(fh.read())
