"""Noise schedules and deterministic DDIM sampling / inversion loops.

Steps are indexed 0..T with alpha_bar[0] = 1 (clean data) and alpha_bar
strictly decreasing. Inference runs on a uniformly strided ladder of
num_inference_steps intervals whose lowest rung is t=0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from morphix.latent_core import LatentGrid, ShapeMismatchError

EPSILON = "epsilon"
V_PREDICTION = "v"
X0 = "x0"

_LINEAR_BETA_LO = 1e-4
_LINEAR_BETA_HI = 2e-2

# Fixed-point refinements per inversion step. Each refinement re-evaluates
# the prediction at the arrival rung, which is where the sampling loop will
# evaluate it on the way back down; without this the round trip drifts at
# first order in the step size.
INVERT_FIXED_POINT_ITERS = 3


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step alpha_bar table with derived sigma and phi tables."""

    steps: int
    alpha_bar: np.ndarray  # shape (steps+1,), alpha_bar[0] == 1.0
    shape: str = "linear"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.steps + 1,):
            raise ValueError(f"alpha_bar must have {self.steps + 1} entries, got {ab.shape}")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if not (ab[-1] > 0):
            raise ValueError("alpha_bar must stay positive")
        ab = ab.copy()
        ab.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)

    def sqrt_alpha_bar(self, t: int) -> float:
        return math.sqrt(self.alpha_bar[self._check(t)])

    def sigma(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar[self._check(t)])

    def phi(self, t: int) -> float:
        return math.atan2(self.sigma(t), self.sqrt_alpha_bar(t))

    def _check(self, t: int) -> int:
        if not 0 <= t <= self.steps:
            raise ValueError(f"step {t} out of range [0, {self.steps}]")
        return t

    def to_dict(self) -> dict:
        return {"T": self.steps, "shape": self.shape}


def make_schedule(steps: int, shape: str = "linear") -> NoiseSchedule:
    """Build a noise schedule of the given length and shape.

    linear: beta linearly spaced in [1e-4, 2e-2], alpha_bar = cumprod(1-beta).
    cosine: squared-cosine alpha_bar with the usual 0.999 beta cap.
    """
    if steps < 2:
        raise ValueError("schedule needs at least 2 steps")
    if shape == "linear":
        betas = np.linspace(_LINEAR_BETA_LO, _LINEAR_BETA_HI, steps)
    elif shape == "cosine":
        def f(t):
            return math.cos((t / steps + 0.008) / 1.008 * math.pi / 2.0) ** 2
        raw = np.array([f(t) / f(0) for t in range(steps + 1)])
        betas = np.minimum(1.0 - raw[1:] / raw[:-1], 0.999)
    else:
        raise ValueError(f"unknown schedule shape {shape!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(steps=steps, alpha_bar=alpha_bar, shape=shape)


@dataclass(frozen=True)
class SamplerConfig:
    """Inference-time sampler settings; identical configs reproduce bit-identical runs."""

    num_inference_steps: int = 50
    eta: float = 0.0
    cfg_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_inference_steps < 1:
            raise ValueError("num_inference_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")

    def to_dict(self, schedule: NoiseSchedule | None = None) -> dict:
        out = {
            "steps": self.num_inference_steps,
            "eta": self.eta,
            "cfg_scale": self.cfg_scale,
            "seed": self.seed,
        }
        if schedule is not None:
            out["schedule"] = schedule.to_dict()
        return out


def sampler_config_from_dict(obj: dict) -> tuple[SamplerConfig, NoiseSchedule]:
    sched = obj.get("schedule", {})
    schedule = make_schedule(int(sched.get("T", 1000)), sched.get("shape", "linear"))
    cfg = SamplerConfig(
        num_inference_steps=int(obj.get("steps", 50)),
        eta=float(obj.get("eta", 0.0)),
        cfg_scale=float(obj.get("cfg_scale", 1.0)),
        seed=int(obj.get("seed", 0)),
    )
    if cfg.num_inference_steps > schedule.steps:
        raise ValueError("num_inference_steps exceeds schedule length")
    return cfg, schedule


def sampler_config_from_json(text: str | bytes) -> tuple[SamplerConfig, NoiseSchedule]:
    return sampler_config_from_dict(json.loads(text))


def inference_ladder(schedule: NoiseSchedule, num_inference_steps: int) -> list[int]:
    """Uniformly strided rungs [0, ..., T], ascending, len = steps+1."""
    n = num_inference_steps
    if n > schedule.steps:
        raise ValueError("num_inference_steps exceeds schedule length")
    rungs = [round(schedule.steps * i / n) for i in range(n + 1)]
    if any(rungs[i + 1] <= rungs[i] for i in range(n)):
        raise ValueError("degenerate inference ladder")
    return rungs


def q_sample(x0: LatentGrid, t: int, eps: LatentGrid, s: NoiseSchedule) -> LatentGrid:
    """Forward noising: sqrt(ab_t) x0 + sqrt(1-ab_t) eps."""
    if not 1 <= t <= s.steps:
        raise ValueError(f"step {t} out of range [1, {s.steps}]")
    if x0.shape != eps.shape:
        raise ShapeMismatchError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    return LatentGrid(s.sqrt_alpha_bar(t) * x0.values + s.sigma(t) * eps.values)


def convert_prediction(
    pred: LatentGrid,
    from_kind: str,
    to_kind: str,
    x_t: LatentGrid,
    t: int,
    s: NoiseSchedule,
) -> LatentGrid:
    """Convert between epsilon / v / x0 parameterizations at step t.

    Uses x_t = cos(phi) x0 + sin(phi) eps and v = cos(phi) eps - sin(phi) x0,
    with cos(phi) = sqrt(alpha_bar) and sin(phi) = sqrt(1 - alpha_bar).
    """
    if from_kind not in (EPSILON, V_PREDICTION):
        raise ValueError(f"unknown source prediction kind {from_kind!r}")
    if to_kind not in (EPSILON, V_PREDICTION, X0):
        raise ValueError(f"unknown target prediction kind {to_kind!r}")
    if pred.shape != x_t.shape:
        raise ShapeMismatchError("prediction and latent shapes differ")
    s._check(t)
    c = s.sqrt_alpha_bar(t)
    sn = s.sigma(t)
    if from_kind == to_kind:
        return pred
    if from_kind == EPSILON:
        eps = pred.values
        x0 = (x_t.values - sn * eps) / c
    else:
        v = pred.values
        eps = c * v + sn * x_t.values
        x0 = c * x_t.values - sn * v
    if to_kind == EPSILON:
        return LatentGrid(eps)
    if to_kind == X0:
        return LatentGrid(x0)
    return LatentGrid(c * eps - sn * x0)


def ddim_sigma(s: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    """Stochasticity scale for the t -> t_prev step (eta=1 gives DDPM)."""
    ab_t = s.alpha_bar[t]
    ab_p = s.alpha_bar[t_prev]
    if 1.0 - ab_t == 0.0:
        return 0.0
    return eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)


def ddim_step(
    x_t: LatentGrid,
    pred: LatentGrid,
    kind: str,
    t: int,
    t_prev: int,
    s: NoiseSchedule,
    eta: float = 0.0,
    noise: Optional[LatentGrid] = None,
) -> LatentGrid:
    """One reverse step t -> t_prev.

    The prediction is converted to epsilon form internally; with eta=0 the
    step is deterministic and the noise argument is ignored.
    """
    if not (t > t_prev >= 0):
        raise ValueError(f"require t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    s._check(t)
    eps = convert_prediction(pred, kind, EPSILON, x_t, t, s).values
    ab_t = s.alpha_bar[t]
    ab_p = s.alpha_bar[t_prev]
    x0_pred = (x_t.values - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    sig = ddim_sigma(s, t, t_prev, eta)
    dir_coef = math.sqrt(max(0.0, 1.0 - ab_p - sig * sig))
    out = math.sqrt(ab_p) * x0_pred + dir_coef * eps
    if sig > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise grid")
        if noise.shape != x_t.shape:
            raise ShapeMismatchError("noise shape mismatch")
        out = out + sig * noise.values
    return LatentGrid(out)


def ddim_invert_step(
    x_t: LatentGrid,
    eps_pred: LatentGrid,
    t: int,
    t_next: int,
    s: NoiseSchedule,
) -> LatentGrid:
    """One inversion step t -> t_next (t_next > t), the algebraic inverse
    of the deterministic ddim_step under a frozen prediction."""
    if not t_next > t:
        raise ValueError(f"require t_next > t, got t={t}, t_next={t_next}")
    s._check(t_next)
    if eps_pred.shape != x_t.shape:
        raise ShapeMismatchError("prediction shape mismatch")
    ab_t = s.alpha_bar[t]
    ab_n = s.alpha_bar[t_next]
    x0_pred = (x_t.values - math.sqrt(1.0 - ab_t) * eps_pred.values) / math.sqrt(ab_t)
    return LatentGrid(math.sqrt(ab_n) * x0_pred + math.sqrt(1.0 - ab_n) * eps_pred.values)


def cfg_combine(eps_cond: LatentGrid, eps_uncond: LatentGrid, w: float) -> LatentGrid:
    """Classifier-free guidance: w * cond + (1 - w) * uncond."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeMismatchError("CFG operand shapes differ")
    return LatentGrid(w * eps_cond.values + (1.0 - w) * eps_uncond.values)


@dataclass
class SampleHooks:
    """Optional per-step intervention points for the sampling loop.

    want_taps      decoder feature layers to request from the model each step
    modify_eps     (step_idx, t, z_t, eps, taps) -> eps, applied after CFG
    kv_hook        (step_idx) -> (layer, K, V) -> (K, V) attention override
    modify_latent  (step_idx, t_prev, z_prev) -> z_prev, applied after the step
    on_step        (step_idx, t_prev, z_prev) observer, called last
    """

    want_taps: tuple[int, ...] = ()
    modify_eps: Optional[Callable] = None
    kv_hook: Optional[Callable] = None
    modify_latent: Optional[Callable] = None
    on_step: Optional[Callable] = None


def _model_epsilon(model, z: LatentGrid, t: int, cond, cfg: SamplerConfig, s: NoiseSchedule,
                   want_taps: Sequence[int] = (), kv_hook=None):
    """Model call + CFG combination, returning (eps, taps)."""
    pred, taps = model.predict_with_features(z, t, cond, want_taps=want_taps, kv_hook=kv_hook)
    eps = convert_prediction(pred, model.prediction_kind, EPSILON, z, t, s)
    if cfg.cfg_scale != 1.0 and cond is not None:
        pred_u, _ = model.predict_with_features(z, t, None, want_taps=())
        eps_u = convert_prediction(pred_u, model.prediction_kind, EPSILON, z, t, s)
        eps = cfg_combine(eps, eps_u, cfg.cfg_scale)
    return eps, taps


def sample_loop(
    z_T: LatentGrid,
    model,
    cond,
    cfg: SamplerConfig,
    s: NoiseSchedule,
    hooks: SampleHooks | None = None,
) -> LatentGrid:
    """Iterated DDIM sampling from the top rung down to t=0."""
    hooks = hooks or SampleHooks()
    rungs = inference_ladder(s, cfg.num_inference_steps)
    n = cfg.num_inference_steps
    rng = np.random.default_rng(cfg.seed) if cfg.eta > 0.0 else None
    z = z_T
    for j in range(n):
        t = rungs[n - j]
        t_prev = rungs[n - j - 1]
        kv = hooks.kv_hook(j) if hooks.kv_hook is not None else None
        eps, taps = _model_epsilon(model, z, t, cond, cfg, s, hooks.want_taps, kv)
        if hooks.modify_eps is not None:
            eps = hooks.modify_eps(j, t, z, eps, taps)
        noise = None
        if rng is not None:
            noise = LatentGrid(rng.standard_normal(z.shape))
        z = ddim_step(z, eps, EPSILON, t, t_prev, s, eta=cfg.eta, noise=noise)
        if hooks.modify_latent is not None:
            z = hooks.modify_latent(j, t_prev, z)
        if hooks.on_step is not None:
            hooks.on_step(j, t_prev, z)
    return z


def invert_loop(
    z_0: LatentGrid,
    model,
    cond,
    cfg: SamplerConfig,
    s: NoiseSchedule,
    bank=None,
    fixed_point_iters: int = INVERT_FIXED_POINT_ITERS,
) -> LatentGrid:
    """Iterated DDIM inversion from t=0 up to the top rung.

    Each interval refines the prediction at the arrival rung by fixed-point
    iteration so the recorded trajectory matches what sample_loop will see.
    CFG weight is forced to 1 during inversion. When a trajectory bank is
    given, rung latents and attention K/V at the model's tap layers are
    recorded into it (K/V ordinals aligned with sampling step indices).
    """
    rungs = inference_ladder(s, cfg.num_inference_steps)
    n = cfg.num_inference_steps
    if bank is not None:
        if bank.num_steps != n:
            raise ValueError(f"bank expects {bank.num_steps} steps, sampler uses {n}")
        if bank.tap_layers and fixed_point_iters < 1:
            raise ValueError("K/V recording requires at least one fixed-point iteration")
        bank.set_rung_latent(0, z_0)
    invert_cfg = SamplerConfig(num_inference_steps=n, eta=0.0, cfg_scale=1.0, seed=cfg.seed)
    z = z_0
    for i in range(n):
        t, t_next = rungs[i], rungs[i + 1]
        eps, _ = _model_epsilon(model, z, t, cond, invert_cfg, s)
        for k in range(max(0, fixed_point_iters)):
            z_next = ddim_invert_step(z, eps, t, t_next, s)
            kv = None
            if bank is not None and k == fixed_point_iters - 1:
                # Last refinement doubles as the recording pass: its state is
                # the closest match to the sampling-time state at rung t_next.
                kv = bank.recorder(n - 1 - i)
            eps, _ = _model_epsilon(model, z_next, t_next, cond, invert_cfg, s, kv_hook=kv)
        z = ddim_invert_step(z, eps, t, t_next, s)
        if bank is not None:
            bank.set_rung_latent(i + 1, z)
    return z
