"""Benchmark runner: edits every triple of an editset and scores the results."""

from __future__ import annotations

from morphix.config import AppConfig
from morphix.editor import EditEngine, EditRequest
from morphix.metrics import (
    EditTriple,
    embed_spectrogram,
    frechet_distance,
    gaussian_stats,
    kl_divergence,
    masked_spectral_distance,
)
from morphix.sampling import SamplerConfig


def request_for_triple(tr: EditTriple, cfg: AppConfig, seed: int | None = None,
                       model=None) -> EditRequest:
    sampler = SamplerConfig(
        num_inference_steps=cfg.sampler.num_inference_steps,
        eta=cfg.sampler.eta, cfg_scale=cfg.sampler.cfg_scale,
        seed=cfg.sampler.seed if seed is None else seed)
    weights = cfg.guidance
    if model is not None:
        layers = tuple(l for l in weights.tap_layers if l in model.tap_layers)
        if not layers:
            layers = tuple(model.tap_layers)
        if layers != weights.tap_layers:
            from dataclasses import replace
            weights = replace(weights, tap_layers=layers)
    common = dict(source="source", mask_c=tr.mask_c, mask_r=tr.mask_r,
                  weights=weights, sampler=sampler, morph=cfg.morph)
    if tr.kind in ("add", "remove"):
        return EditRequest(kind=tr.kind, reference="reference", **common)
    if tr.kind == "replace":
        return EditRequest(kind="replace", reference="reference",
                           reference_out="reference_out", **common)
    return EditRequest(kind=tr.kind, transform=tr.transform, **common)


def assets_for_triple(tr: EditTriple) -> dict:
    assets = {"source": tr.source}
    if tr.reference is not None:
        assets["reference"] = tr.reference
    if tr.reference_out is not None:
        assets["reference_out"] = tr.reference_out
    return assets


def run_benchmark(triples: list[EditTriple], cfg: AppConfig) -> list[dict]:
    engine = EditEngine(cfg.build_model(), cfg.schedule)
    rows = []
    for i, tr in enumerate(triples):
        req = request_for_triple(tr, cfg, model=engine.model)
        result = engine.run(req, assets_for_triple(tr))
        stats_out = gaussian_stats(embed_spectrogram(result.spectrogram))
        stats_tgt = gaussian_stats(embed_spectrogram(tr.target))
        masked, unmasked = masked_spectral_distance(result.spectrogram, tr.target, tr.mask_c)
        rows.append({
            "case": i,
            "kind": tr.kind,
            "frechet": frechet_distance(stats_out, stats_tgt),
            "kl": kl_divergence(stats_out, stats_tgt),
            "masked_rms": masked,
            "unmasked_rms": unmasked,
        })
    return rows
