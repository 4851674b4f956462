"""Application configuration shared by the CLI and the HTTP service.

JSON file with sections {sampler, guidance, morph, stft, model, service};
MORPHIX_DATA_DIR overrides service.data_dir.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from morphix.audio import StftConfig
from morphix.guidance import GuidanceWeights
from morphix.latent_core import LatentGrid
from morphix.morphing import MorphConfig
from morphix.sampling import NoiseSchedule, SamplerConfig, make_schedule

ENV_DATA_DIR = "MORPHIX_DATA_DIR"


@dataclass
class ServiceConfig:
    port: int = 8765
    workers: int = 2
    data_dir: str = "./morphix-data"


@dataclass
class ModelConfig:
    kind: str = "analytic"            # analytic | checkpoint
    var: float = 1.0
    mean: float = 0.0
    latent_shape: tuple[int, int, int] = (4, 16, 16)
    checkpoint: str | None = None


@dataclass
class AppConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    schedule: NoiseSchedule = field(default_factory=lambda: make_schedule(1000, "linear"))
    guidance: GuidanceWeights = field(default_factory=GuidanceWeights)
    morph: MorphConfig = field(default_factory=MorphConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)

    def build_model(self):
        if self.model.kind == "analytic":
            from morphix.models import AnalyticGaussianModel
            mean = LatentGrid(np.full(self.model.latent_shape, self.model.mean))
            return AnalyticGaussianModel(mean, self.model.var, self.schedule)
        if self.model.kind == "checkpoint":
            from morphix.models import load_checkpoint
            if not self.model.checkpoint:
                raise ValueError("model.kind=checkpoint requires model.checkpoint path")
            return load_checkpoint(self.model.checkpoint)
        raise ValueError(f"unknown model kind {self.model.kind!r}")


def load_config(path: str | None = None) -> AppConfig:
    obj = {}
    if path:
        with open(path) as fh:
            obj = json.load(fh)
    cfg = AppConfig()
    if "sampler" in obj:
        from morphix.sampling import sampler_config_from_dict
        cfg.sampler, cfg.schedule = sampler_config_from_dict(obj["sampler"])
    if "guidance" in obj:
        cfg.guidance = GuidanceWeights.from_dict(obj["guidance"])
    if "morph" in obj:
        m = obj["morph"]
        cfg.morph = MorphConfig(
            alpha=float(m.get("alpha", 0.5)), n_iter=int(m.get("n_iter", 100)),
            lr=float(m.get("lr", 1e-4)), use_penalty=bool(m.get("use_penalty", True)),
            use_tangent=bool(m.get("use_tangent", True)),
            clip_max_norm=float(m.get("clip_max_norm", 1.0)))
    if "stft" in obj:
        cfg.stft = StftConfig.from_dict(obj["stft"])
    if "model" in obj:
        m = obj["model"]
        cfg.model = ModelConfig(
            kind=m.get("kind", "analytic"), var=float(m.get("var", 1.0)),
            mean=float(m.get("mean", 0.0)),
            latent_shape=tuple(m.get("latent_shape", (4, 16, 16))),
            checkpoint=m.get("checkpoint"))
    if "service" in obj:
        s = obj["service"]
        cfg.service = ServiceConfig(
            port=int(s.get("port", 8765)), workers=int(s.get("workers", 2)),
            data_dir=s.get("data_dir", "./morphix-data"))
    env_dir = os.environ.get(ENV_DATA_DIR)
    if env_dir:
        cfg.service.data_dir = env_dir
    return cfg
