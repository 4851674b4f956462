"""Edit orchestration: the six region-edit tasks over the sampling stack.

Every task follows the same skeleton: invert the involved spectrogram
latents (recording trajectory banks), build a starting latent by morphing,
then re-sample with three hooks active:

  * energy guidance nudging the prediction toward/away from reference
    features inside the edit region,
  * attention K/V injection from a recorded bank,
  * trajectory-anchored compositing, which re-pins every latent cell
    outside the edit region to the source trajectory at the matching rung.

The compositing hook is what makes edits region-specific under any
denoiser: untouched cells follow the source's own inversion trajectory, so
they land on the source reconstruction regardless of how far the morph
moved the full latent.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from morphix.audio import (
    BRIDGE_FACTOR,
    LOG_FLOOR,
    Spectrogram,
    latent_to_spectrogram,
    spectrogram_to_latent,
)
from morphix.guidance import GuidanceWeights, RegionPair, guided_epsilon, task_energy_grad
from morphix.kv_cache import TrajectoryBank
from morphix.latent_core import (
    LatentGrid,
    MaskTransform,
    TFMask,
    apply_mask_transform,
    mask_downsample,
    mask_from_dict,
    mask_to_dict,
    transform_cell_map,
)
from morphix.morphing import MorphConfig, morph_add, optimize_removal
from morphix.sampling import (
    NoiseSchedule,
    SampleHooks,
    SamplerConfig,
    invert_loop,
    sample_loop,
)

EDIT_KINDS = ("add", "remove", "replace", "move", "stretch", "pitch_shift")
GEOMETRIC_KINDS = ("move", "stretch", "pitch_shift")

_KIND_TO_TRANSFORM = {"move": "translate_time", "stretch": "scale_time",
                      "pitch_shift": "translate_freq"}


class EditRequestError(ValueError):
    """Request fails task arity or mask validation."""


@dataclass(frozen=True)
class EditRequest:
    """One edit job.

    mask_c marks the edit region on the source; mask_r the event region on
    the reference recording (defaults to mask_c). For replace, the outgoing
    event is taken at mask_c in the outgoing reference and mask_r refers to
    the incoming reference. Geometric kinds take a transform instead of a
    reference.
    """

    kind: str
    source: str
    mask_c: TFMask
    mask_r: Optional[TFMask] = None
    reference: Optional[str] = None
    reference_out: Optional[str] = None
    alpha: float = 0.5
    weights: GuidanceWeights = field(default_factory=GuidanceWeights)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    morph: MorphConfig = field(default_factory=MorphConfig)
    transform: Optional[MaskTransform] = None
    kv_source: str = "source"
    composite: bool = True
    class_id: Optional[int] = None

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise EditRequestError(f"unknown edit kind {self.kind!r}")
        if self.kind in GEOMETRIC_KINDS:
            if self.transform is None:
                raise EditRequestError(f"{self.kind} requires a transform")
            if self.reference is not None:
                raise EditRequestError(f"{self.kind} takes no reference asset")
            if self.transform.kind != _KIND_TO_TRANSFORM[self.kind]:
                raise EditRequestError(
                    f"{self.kind} requires a {_KIND_TO_TRANSFORM[self.kind]} transform, "
                    f"got {self.transform.kind}")
        else:
            if self.reference is None:
                raise EditRequestError(f"{self.kind} requires a reference asset")
            if self.transform is not None:
                raise EditRequestError("transform is only valid for geometric edits")
            if self.kind == "replace" and self.reference_out is None:
                raise EditRequestError("replace requires an outgoing reference")
        if self.mask_c.is_empty():
            raise EditRequestError("edit mask is empty")
        if self.mask_r is not None and self.mask_r.is_empty():
            raise EditRequestError("reference mask is empty (nothing to edit against)")
        if not 0.0 <= self.alpha <= 1.0:
            raise EditRequestError("alpha must be in [0,1]")
        if self.kv_source not in ("source", "reference", "none"):
            raise EditRequestError(f"unknown kv_source {self.kv_source!r}")

    def to_dict(self, schedule: NoiseSchedule | None = None) -> dict:
        out = {
            "kind": self.kind,
            "source": self.source,
            "mask_c": mask_to_dict(self.mask_c),
            "alpha": self.alpha,
            "weights": self.weights.to_dict(),
            "sampler": self.sampler.to_dict(schedule),
            "morph": {
                "alpha": self.morph.alpha, "n_iter": self.morph.n_iter,
                "lr": self.morph.lr, "use_penalty": self.morph.use_penalty,
                "use_tangent": self.morph.use_tangent,
                "clip_max_norm": self.morph.clip_max_norm,
            },
            "kv_source": self.kv_source,
            "composite": self.composite,
        }
        if self.mask_r is not None:
            out["mask_r"] = mask_to_dict(self.mask_r)
        if self.reference is not None:
            out["reference"] = self.reference
        if self.reference_out is not None:
            out["reference_out"] = self.reference_out
        if self.transform is not None:
            out["transform"] = {"kind": self.transform.kind, "amount": self.transform.amount}
        if self.class_id is not None:
            out["class_id"] = self.class_id
        return out

    def canonical_hash(self, schedule: NoiseSchedule | None = None) -> str:
        text = json.dumps(self.to_dict(schedule), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def edit_request_from_dict(obj: Mapping) -> EditRequest:
    from morphix.sampling import sampler_config_from_dict

    try:
        kind = obj["kind"]
        source = obj["source"]
        mask_c = mask_from_dict(obj["mask_c"])
    except (KeyError, TypeError) as exc:
        raise EditRequestError(f"missing or bad request field: {exc}") from exc
    sampler = SamplerConfig()
    if "sampler" in obj:
        sampler, _ = sampler_config_from_dict(obj["sampler"])
    morph_obj = obj.get("morph", {})
    morph = MorphConfig(
        alpha=float(morph_obj.get("alpha", 0.5)),
        n_iter=int(morph_obj.get("n_iter", 100)),
        lr=float(morph_obj.get("lr", 1e-4)),
        use_penalty=bool(morph_obj.get("use_penalty", True)),
        use_tangent=bool(morph_obj.get("use_tangent", True)),
        clip_max_norm=float(morph_obj.get("clip_max_norm", 1.0)),
    )
    transform = None
    if obj.get("transform") is not None:
        transform = MaskTransform(obj["transform"]["kind"], obj["transform"]["amount"])
    return EditRequest(
        kind=kind,
        source=source,
        mask_c=mask_c,
        mask_r=mask_from_dict(obj["mask_r"]) if obj.get("mask_r") else None,
        reference=obj.get("reference"),
        reference_out=obj.get("reference_out"),
        alpha=float(obj.get("alpha", 0.5)),
        weights=GuidanceWeights.from_dict(obj.get("weights", {})),
        sampler=sampler,
        morph=morph,
        transform=transform,
        kv_source=obj.get("kv_source", "source"),
        composite=bool(obj.get("composite", True)),
        class_id=obj.get("class_id"),
    )


@dataclass
class EditResult:
    latent: LatentGrid
    spectrogram: Spectrogram
    energy_trace: list[float]
    elapsed: float
    provenance: dict
    morph_trace: Optional[list[tuple[float, float]]] = None  # (loss, penalty) per iter

    def trace_csv(self) -> str:
        lines = ["step,energy"]
        for i, e in enumerate(self.energy_trace):
            lines.append(f"{i},{e!r}")
        return "\n".join(lines) + "\n"

    def morph_trace_csv(self) -> str:
        lines = ["iter,loss,penalty"]
        for i, (l, pen) in enumerate(self.morph_trace or []):
            lines.append(f"{i},{l!r},{pen!r}")
        return "\n".join(lines) + "\n"


class EditEngine:
    """Runs edit requests against one model + schedule pair.

    The engine holds no per-job state; one instance can serve concurrent
    jobs as long as the model is immutable.
    """

    def __init__(self, model, schedule: NoiseSchedule):
        self.model = model
        self.schedule = schedule

    # --- latent bridging, tolerant of non-multiple-of-4 spectrograms --------

    def _croppable(self, s: Spectrogram) -> tuple[int, int]:
        t = (s.frames // BRIDGE_FACTOR) * BRIDGE_FACTOR
        f = (s.bins // BRIDGE_FACTOR) * BRIDGE_FACTOR
        if t == 0 or f == 0:
            raise EditRequestError("spectrogram too small for the latent bridge")
        return t, f

    def _to_latent(self, s: Spectrogram) -> LatentGrid:
        t, f = self._croppable(s)
        cropped = Spectrogram(values=s.values[:t, :f], hop=s.hop,
                              n_fft=2 * (f - 1), sample_rate=s.sample_rate)
        z = spectrogram_to_latent(cropped)
        # Center at the log floor so silence maps to zero. SLERP mixes with
        # coefficients that do not sum to 1, so a common DC offset would
        # otherwise bleed into every morph.
        z = LatentGrid(z.values - math.log(LOG_FLOOR))
        if hasattr(self.model, "latent_shape") and z.shape != self.model.latent_shape:
            raise EditRequestError(
                f"latent shape {z.shape} does not match model shape {self.model.latent_shape}")
        return z

    def _from_latent(self, z: LatentGrid, like: Spectrogram,
                     paste_mask: TFMask | None = None) -> Spectrogram:
        """Decode a latent; when a paste mask is given, only its cells take
        the decoded values and everything else keeps the source verbatim
        (the latent bridge pools 4x4 patches, so an unmasked paste would
        smear edits across patch boundaries)."""
        t, f = self._croppable(like)
        cropped_like = Spectrogram(values=like.values[:t, :f], hop=like.hop,
                                   n_fft=2 * (f - 1), sample_rate=like.sample_rate)
        inner = latent_to_spectrogram(LatentGrid(z.values + math.log(LOG_FLOOR)), cropped_like)
        vals = like.values.copy()
        if paste_mask is None:
            vals[:t, :f] = inner.values
        else:
            sel = paste_mask.bits[:t, :f]
            region = vals[:t, :f]
            region[sel] = inner.values[sel]
            vals[:t, :f] = region
        return like.replace_values(vals)

    def _crop_mask(self, m: TFMask, s: Spectrogram) -> TFMask:
        t, f = self._croppable(s)
        if (m.time_len, m.freq_len) != (s.frames, s.bins):
            raise EditRequestError(
                f"mask dims ({m.time_len},{m.freq_len}) do not match spectrogram "
                f"({s.frames},{s.bins})")
        cropped = TFMask(m.bits[:t, :f])
        if cropped.is_empty():
            raise EditRequestError("mask lies entirely in the cropped margin")
        return cropped

    # --- shared pipeline pieces ----------------------------------------------

    def _cond(self, req: EditRequest):
        from morphix.models import Condition
        return Condition(req.class_id) if req.class_id is not None else None

    def make_bank(self, num_steps: int, substitution_layers: tuple[int, ...] = (2, 3)) -> TrajectoryBank:
        taps = self.model.tap_layers if getattr(self.model, "has_attention", False) else ()
        subs = tuple(l for l in substitution_layers if l in taps)
        return TrajectoryBank(num_steps, taps, subs)

    def _bank(self, req: EditRequest) -> TrajectoryBank:
        return self.make_bank(req.sampler.num_inference_steps, req.weights.tap_layers)

    def _invert(self, z0: LatentGrid, req: EditRequest) -> tuple[LatentGrid, TrajectoryBank]:
        bank = self._bank(req)
        z_t = invert_loop(z0, self.model, self._cond(req), req.sampler, self.schedule, bank=bank)
        return z_t, bank

    def _guided_sample(self, z_start: LatentGrid, req: EditRequest, kind: str,
                       regions: Optional[RegionPair], comp_mask_spec: TFMask,
                       anchor_bank: TrajectoryBank, ref_bank: Optional[TrajectoryBank],
                       kv_bank: Optional[TrajectoryBank], trace: list[float]) -> LatentGrid:
        """Sampling with guidance, K/V injection, and trajectory compositing."""
        cond = self._cond(req)
        n = req.sampler.num_inference_steps
        model = self.model
        schedule = self.schedule
        w = req.weights
        guidance_on = (regions is not None and w.eta_guidance > 0.0
                       and (w.w_content > 0.0 or w.w_edit > 0.0))
        want = tuple(l for l in w.tap_layers if l in model.tap_layers) if guidance_on else ()
        if guidance_on and not want:
            raise EditRequestError(
                f"guidance layers {w.tap_layers} not declared by the model {model.tap_layers}")

        comp_mask = None
        if req.composite:
            lat_shape = z_start.shape
            bits = _strict_downsample(comp_mask_spec.bits, lat_shape[1], lat_shape[2])
            if not bits.any():
                # mask thinner than a latent cell: fall back to majority vote
                bits = mask_downsample(comp_mask_spec, lat_shape[1], lat_shape[2]).bits
            comp_mask = bits.astype(np.float64)[None, :, :]

        def modify_eps(j, t, z, eps, taps):
            if not guidance_on:
                return eps
            rung = n - j  # rung index of the prediction point (timestep rungs[n-j])
            src_taps = model.predict_with_features(
                anchor_bank.rung_latent(rung), t, cond, want_taps=want)[1]
            ref_taps = src_taps
            if ref_bank is not None:
                ref_taps = model.predict_with_features(
                    ref_bank.rung_latent(rung), t, cond, want_taps=want)[1]
            energy, cots = task_energy_grad(kind, taps, src_taps, ref_taps, regions, w)
            trace.append(energy)
            grad = model.vjp_wrt_latent(z, t, cond, cots)
            return guided_epsilon(eps, grad, t, schedule, w.eta_guidance)

        def modify_latent(j, t_prev, z):
            anchor = anchor_bank.rung_latent(n - j - 1)
            return LatentGrid(comp_mask * z.values + (1.0 - comp_mask) * anchor.values)

        hooks = SampleHooks(
            want_taps=want,
            modify_eps=modify_eps if guidance_on else None,
            kv_hook=kv_bank.injector if kv_bank is not None else None,
            modify_latent=modify_latent if comp_mask is not None else None,
        )
        return sample_loop(z_start, model, cond, req.sampler, schedule, hooks)

    # --- tasks ----------------------------------------------------------------

    def run(self, req: EditRequest, assets: Mapping[str, Spectrogram]) -> EditResult:
        t_start = time.perf_counter()
        source = assets[req.source]
        if req.kind == "add":
            result = self._run_add(req, source, assets[req.reference])
        elif req.kind == "remove":
            result = self._run_remove(req, source, assets[req.reference])
        elif req.kind == "replace":
            result = self._run_replace(req, source, assets[req.reference_out], assets[req.reference])
        else:
            result = self._run_geometric(req, source)
        latent, spec, trace = result[:3]
        morph_trace = result[3] if len(result) > 3 else None
        elapsed = time.perf_counter() - t_start
        prov = {
            "request_hash": req.canonical_hash(self.schedule),
            "seed": req.sampler.seed,
            "model": self.model.fingerprint() if hasattr(self.model, "fingerprint") else "unknown",
            "schedule": self.schedule.to_dict(),
        }
        return EditResult(latent=latent, spectrogram=spec, energy_trace=trace,
                          elapsed=elapsed, provenance=prov, morph_trace=morph_trace)

    def _run_add(self, req: EditRequest, source: Spectrogram, reference: Spectrogram):
        mask_r_raw = req.mask_r or req.mask_c
        if (reference.values.shape != source.values.shape
                or not np.array_equal(mask_r_raw.bits, req.mask_c.bits)):
            # Transport the reference event to the edit region: SLERP blends
            # spatially aligned cells, so the content must sit at the target
            # location before morphing.
            reference = _aligned_reference(reference, mask_r_raw, req.mask_c, source)
            mask_r_raw = req.mask_c
        mask_c = self._crop_mask(req.mask_c, source)
        mask_r = self._crop_mask(mask_r_raw, reference)
        z0_c = self._to_latent(source)
        z0_r = self._to_latent(reference)
        zt_c, bank_c = self._invert(z0_c, req)
        zt_r, bank_r = self._invert(z0_r, req)
        z_m = morph_add(zt_c, zt_r, req.alpha)
        regions = RegionPair(mask_c, mask_r)
        kv_bank = {"source": bank_c, "reference": bank_r, "none": None}[req.kv_source]
        trace: list[float] = []
        z0_edit = self._guided_sample(z_m, req, "add", regions, mask_c, bank_c, bank_r,
                                      kv_bank, trace)
        return z0_edit, self._from_latent(z0_edit, source, mask_c), trace

    def _run_remove(self, req: EditRequest, source: Spectrogram, reference: Spectrogram):
        mask_c = self._crop_mask(req.mask_c, source)
        mask_r = self._crop_mask(req.mask_r or req.mask_c, reference)
        z0_m = self._to_latent(source)
        z0_r = self._to_latent(reference)
        zt_m, bank_m = self._invert(z0_m, req)
        zt_r, bank_r = self._invert(z0_r, req)
        sol = optimize_removal(zt_m, zt_r, zt_m, req.morph)
        if sol.aborted:
            raise RuntimeError("removal optimizer aborted on non-finite loss")
        regions = RegionPair(mask_c, mask_r)
        kv_bank = {"source": bank_m, "reference": bank_r, "none": None}[req.kv_source]
        trace: list[float] = []
        z0_edit = self._guided_sample(sol.z_c_hat, req, "remove", regions, mask_c, bank_m,
                                      bank_r, kv_bank, trace)
        morph_trace = list(zip(sol.loss_trace, sol.penalty_trace))
        return z0_edit, self._from_latent(z0_edit, source, mask_c), trace, morph_trace

    def _run_replace(self, req: EditRequest, source: Spectrogram,
                     reference_out: Spectrogram, reference_in: Spectrogram):
        remove_req = replace(req, kind="remove", reference=req.reference_out,
                             reference_out=None, mask_r=req.mask_c)
        z1, spec1, trace1, morph_trace = self._run_remove(remove_req, source, reference_out)
        add_req = replace(req, kind="add", reference=req.reference, reference_out=None)
        z2, spec2, trace2 = self._run_add(add_req, spec1, reference_in)
        return z2, spec2, trace1 + trace2, morph_trace

    def _run_geometric(self, req: EditRequest, source: Spectrogram):
        mask_old = req.mask_c
        mask_new = apply_mask_transform(mask_old, req.transform)
        # Stage 1: remove the event from its original region, using the
        # masked crop of the source as its own reference recording.
        ref_event = _masked_crop(source, mask_old)
        remove_req = replace(req, kind="remove", reference="__event__",
                             mask_r=mask_old, transform=None)
        z1, spec1, trace1, morph_trace = self._run_remove(remove_req, source, ref_event)
        # Stage 2: add it back at the transformed region. The reference is the
        # source event transported along the transform's cell correspondence;
        # a reference-dominant blend re-inserts it at full strength.
        ref_moved = _transported_reference(source, mask_old, req.transform)
        add_req = replace(req, kind="add", reference="__moved__", mask_c=mask_new,
                          mask_r=mask_new, transform=None, alpha=max(req.alpha, 0.9))
        z2, spec2, trace2 = self._run_add(add_req, spec1, ref_moved)
        return z2, spec2, trace1 + trace2, morph_trace


def _strict_downsample(bits: np.ndarray, tt: int, ff: int) -> np.ndarray:
    """Latent cell is editable only if its whole spectrogram block is masked,
    so compositing never touches content outside the drawn region."""
    st, sf = bits.shape
    out = np.zeros((tt, ff), dtype=bool)
    tb = [(i * st) // tt for i in range(tt + 1)]
    fb = [(j * sf) // ff for j in range(ff + 1)]
    for i in range(tt):
        for j in range(ff):
            out[i, j] = bits[tb[i]:tb[i + 1], fb[j]:fb[j + 1]].all()
    return out


def _masked_crop(s: Spectrogram, m: TFMask) -> Spectrogram:
    """The masked region of s on an otherwise silent canvas."""
    vals = np.full_like(s.values, math.log(LOG_FLOOR))
    vals[m.bits] = s.values[m.bits]
    return s.replace_values(vals)


def _transported_reference(s: Spectrogram, m: TFMask, t: MaskTransform) -> Spectrogram:
    """Masked content of s moved along the transform's cell correspondence."""
    vals = np.full_like(s.values, math.log(LOG_FLOOR))
    for (tn, fn), (ts, fs) in transform_cell_map(m, t).items():
        vals[tn, fn] = s.values[ts, fs]
    return s.replace_values(vals)


def _aligned_reference(reference: Spectrogram, mask_r: TFMask, mask_c: TFMask,
                       source: Spectrogram) -> Spectrogram:
    """Reference content moved from its own region onto the source's edit
    region (bounding-box translation, nearest-neighbor on size mismatch),
    on an otherwise silent source-shaped canvas."""
    if (mask_r.time_len, mask_r.freq_len) != (reference.frames, reference.bins):
        raise EditRequestError("reference mask dims do not match the reference")
    if (mask_c.time_len, mask_c.freq_len) != (source.frames, source.bins):
        raise EditRequestError("edit mask dims do not match the source")
    cells_c = np.argwhere(mask_c.bits)
    rows_r = np.nonzero(mask_r.bits.any(axis=1))[0]
    cols_r = np.nonzero(mask_r.bits.any(axis=0))[0]
    rows_c = np.nonzero(mask_c.bits.any(axis=1))[0]
    cols_c = np.nonzero(mask_c.bits.any(axis=0))[0]
    t0c, t1c = int(rows_c[0]), int(rows_c[-1]) + 1
    f0c, f1c = int(cols_c[0]), int(cols_c[-1]) + 1
    t0r, t1r = int(rows_r[0]), int(rows_r[-1]) + 1
    f0r, f1r = int(cols_r[0]), int(cols_r[-1]) + 1
    rel_t = (cells_c[:, 0] - t0c + 0.5) / (t1c - t0c)
    rel_f = (cells_c[:, 1] - f0c + 0.5) / (f1c - f0c)
    rt = np.clip(t0r + np.floor(rel_t * (t1r - t0r)).astype(int), t0r, t1r - 1)
    rf = np.clip(f0r + np.floor(rel_f * (f1r - f0r)).astype(int), f0r, f1r - 1)
    vals = np.full_like(source.values, math.log(LOG_FLOOR))
    vals[cells_c[:, 0], cells_c[:, 1]] = reference.values[rt, rf]
    return source.replace_values(vals)
