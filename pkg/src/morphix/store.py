"""Content-addressed asset store on local disk.

Asset ids are the hex SHA-256 of the bytes, so identical uploads land on
the identical id and results are cacheable. Writes go through a temp file
plus atomic rename; reads are lock-free.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Optional

ASSET_KINDS = ("waveform", "spectrogram", "latent", "bank", "checkpoint", "blob")


class UnknownAssetError(KeyError):
    """No asset stored under the given id."""


@dataclass(frozen=True)
class AssetInfo:
    id: str
    kind: str
    size: int
    meta: dict


def sniff_kind(data: bytes) -> str:
    if data[:4] == b"RIFF":
        return "waveform"
    if data[:4] == b"SPG1":
        return "spectrogram"
    if data[:4] == b"MRXB":
        return "bank"
    if data[:4] == b"MRXM":
        return "checkpoint"
    if data[:6] == b"\x93NUMPY":
        return "latent"
    return "blob"


class AssetStore:
    def __init__(self, data_dir: str):
        self.data_dir = data_dir
        self.objects = os.path.join(data_dir, "objects")
        os.makedirs(self.objects, exist_ok=True)

    def _bin(self, asset_id: str) -> str:
        return os.path.join(self.objects, f"{asset_id}.bin")

    def _meta(self, asset_id: str) -> str:
        return os.path.join(self.objects, f"{asset_id}.json")

    def put(self, data: bytes, kind: Optional[str] = None, meta: Optional[dict] = None) -> str:
        asset_id = hashlib.sha256(data).hexdigest()
        if not os.path.exists(self._bin(asset_id)):
            self._atomic(self._bin(asset_id), data)
            info = {"kind": kind or sniff_kind(data), "size": len(data), "meta": meta or {}}
            self._atomic(self._meta(asset_id), json.dumps(info, sort_keys=True).encode())
        return asset_id

    def get(self, asset_id: str) -> bytes:
        try:
            with open(self._bin(asset_id), "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            raise UnknownAssetError(asset_id) from None

    def exists(self, asset_id: str) -> bool:
        return os.path.exists(self._bin(asset_id))

    def info(self, asset_id: str) -> AssetInfo:
        try:
            with open(self._meta(asset_id)) as fh:
                obj = json.load(fh)
        except FileNotFoundError:
            raise UnknownAssetError(asset_id) from None
        return AssetInfo(id=asset_id, kind=obj.get("kind", "blob"),
                         size=obj.get("size", 0), meta=obj.get("meta", {}))

    @staticmethod
    def _atomic(path: str, data: bytes) -> None:
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
