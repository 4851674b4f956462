"""Latent morphing: SLERP addition and the gradient-descent removal optimizer.

The removal optimizer searches for delta corrections to the context and
reference latents so their spherical interpolation reproduces the observed
mixture latent. Gradients are closed-form (no score model involved), with
optional tangent-space projection and joint norm clipping before each step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from morphix.latent_core import (
    COLLINEAR_EPS,
    DegenerateGeometryError,
    LatentGrid,
    geodesic_distance,
    slerp,
)

_V_GUARD = 1e-30  # floor for 1 - v^2 in the arccos derivative


@dataclass(frozen=True)
class MorphConfig:
    """Knobs for the removal optimizer (alpha is the mix ratio inside it).

    lr_decay multiplies the step size every iteration; the default 1.0 is
    plain constant-step SGD. A decay < 1 is needed to settle onto the
    geodesic loss's conic minimum, where a constant step oscillates.
    """

    alpha: float = 0.5
    n_iter: int = 100
    lr: float = 1e-4
    use_penalty: bool = True
    use_tangent: bool = True
    clip_max_norm: float = 1.0
    lr_decay: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0,1]")
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.clip_max_norm > 0:
            raise ValueError("clip_max_norm must be > 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")


@dataclass
class RemovalSolution:
    z_c_hat: LatentGrid
    z_r_hat: LatentGrid
    loss_trace: list[float] = field(default_factory=list)
    penalty_trace: list[float] = field(default_factory=list)
    aborted: bool = False


def morph_add(z_c: LatentGrid, z_r: LatentGrid, alpha: float) -> LatentGrid:
    """Mixture latent for the addition task: SLERP from context to reference."""
    return slerp(z_c, z_r, alpha)


def removal_loss(z_c_hat: LatentGrid, z_r_hat: LatentGrid, z_m: LatentGrid,
                 alpha: float) -> tuple[float, float]:
    """(mixture loss, penalty) for candidate context/reference latents.

    loss    = geodesic distance between z_m and slerp(z_c_hat, z_r_hat, alpha)
    penalty = (sum of elementwise product)^2 / N^2, an independence prior.
    """
    mix = slerp(z_c_hat, z_r_hat, alpha)
    loss = geodesic_distance(z_m, mix)
    n = z_c_hat.values.size
    p = float(np.dot(z_c_hat.flat(), z_r_hat.flat()))
    return loss, (p * p) / (n * n)


def _loss_grads(a: np.ndarray, b: np.ndarray, zm: np.ndarray, alpha: float):
    """Value and gradients of the mixture loss w.r.t. the flattened latents."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateGeometryError("zero-norm latent in removal loss")
    u = float(np.dot(a, b) / (na * nb))
    u = min(1.0, max(-1.0, u))
    omega = math.acos(u)
    if math.pi - omega < COLLINEAR_EPS:
        raise DegenerateGeometryError("antipodal latents in removal loss")

    if omega < COLLINEAR_EPS:
        la, lb = 1.0 - alpha, alpha
        m = la * a + lb * b
        dm_da_scale = None  # lerp branch: constant coefficients
    else:
        sin_w = math.sin(omega)
        la = math.sin((1.0 - alpha) * omega) / sin_w
        lb = math.sin(alpha * omega) / sin_w
        m = la * a + lb * b
        cos_w = math.cos(omega)
        dla = ((1.0 - alpha) * math.cos((1.0 - alpha) * omega) * sin_w
               - math.sin((1.0 - alpha) * omega) * cos_w) / (sin_w * sin_w)
        dlb = (alpha * math.cos(alpha * omega) * sin_w
               - math.sin(alpha * omega) * cos_w) / (sin_w * sin_w)
        du_da = b / (na * nb) - u * a / (na * na)
        du_db = a / (na * nb) - u * b / (nb * nb)
        dfac = -1.0 / math.sqrt(max(1.0 - u * u, _V_GUARD))
        dw_da = dfac * du_da
        dw_db = dfac * du_db
        dm_da_scale = (dla, dlb, dw_da, dw_db)

    nm = np.linalg.norm(m)
    nzm = np.linalg.norm(zm)
    if nm == 0.0 or nzm == 0.0:
        raise DegenerateGeometryError("zero-norm mixture in removal loss")
    v = float(np.dot(zm, m) / (nzm * nm))
    v = min(1.0, max(-1.0, v))
    loss = math.acos(v)
    dv_dm = zm / (nzm * nm) - v * m / (nm * nm)
    g = -dv_dm / math.sqrt(max(1.0 - v * v, _V_GUARD))

    if dm_da_scale is None:
        ga = la * g
        gb = lb * g
    else:
        dla, dlb, dw_da, dw_db = dm_da_scale
        ring = dla * float(np.dot(g, a)) + dlb * float(np.dot(g, b))
        ga = la * g + ring * dw_da
        gb = lb * g + ring * dw_db
    return loss, ga, gb


def removal_loss_grad(z_c_hat: LatentGrid, z_r_hat: LatentGrid, z_m: LatentGrid,
                      alpha: float, use_penalty: bool = True):
    """(total, loss, penalty, grad_c, grad_r) with closed-form gradients."""
    a = z_c_hat.flat().copy()
    b = z_r_hat.flat().copy()
    zm = z_m.flat()
    loss, ga, gb = _loss_grads(a, b, zm, alpha)
    n = a.size
    p = float(np.dot(a, b))
    penalty = (p * p) / (n * n)
    if use_penalty:
        ga = ga + (2.0 * p / (n * n)) * b
        gb = gb + (2.0 * p / (n * n)) * a
        total = loss + penalty
    else:
        total = loss
    shape = z_c_hat.shape
    return total, loss, penalty, LatentGrid(ga.reshape(shape)), LatentGrid(gb.reshape(shape))


def optimize_removal(z_c_init: LatentGrid, z_r_init: LatentGrid, z_m: LatentGrid,
                     cfg: MorphConfig | None = None) -> RemovalSolution:
    """Gradient descent on delta corrections to the context/reference latents.

    Deltas start at zero; each iteration evaluates the total loss, takes the
    closed-form gradient, optionally projects it tangent to the current
    latent, clips the joint norm, and applies one SGD step.
    """
    cfg = cfg or MorphConfig()
    if z_c_init.shape != z_r_init.shape or z_c_init.shape != z_m.shape:
        raise ValueError("removal latents must share one shape")
    eps_c = np.zeros(z_c_init.shape)
    eps_r = np.zeros(z_r_init.shape)
    sol = RemovalSolution(z_c_hat=z_c_init, z_r_hat=z_r_init)
    lr = cfg.lr
    for _ in range(cfg.n_iter):
        a = LatentGrid(z_c_init.values + eps_c)
        b = LatentGrid(z_r_init.values + eps_r)
        total, loss, penalty, gc, gr = removal_loss_grad(a, b, z_m, cfg.alpha, cfg.use_penalty)
        sol.loss_trace.append(loss)
        sol.penalty_trace.append(penalty if cfg.use_penalty else 0.0)
        if not math.isfinite(total):
            sol.aborted = True
            break
        gc_v, gr_v = gc.values, gr.values
        if cfg.use_tangent:
            gc_v = _tangent(gc_v, a.values)
            gr_v = _tangent(gr_v, b.values)
        joint = math.sqrt(float((gc_v * gc_v).sum() + (gr_v * gr_v).sum()))
        if joint > cfg.clip_max_norm:
            scale = cfg.clip_max_norm / joint
            gc_v = gc_v * scale
            gr_v = gr_v * scale
        eps_c = eps_c - lr * gc_v
        eps_r = eps_r - lr * gr_v
        lr *= cfg.lr_decay
    sol.z_c_hat = LatentGrid(z_c_init.values + eps_c)
    sol.z_r_hat = LatentGrid(z_r_init.values + eps_r)
    return sol


def _tangent(g: np.ndarray, z: np.ndarray) -> np.ndarray:
    zz = float((z * z).sum())
    if zz == 0.0:
        return g
    return g - (float((g * z).sum()) / zz) * z


def traces_to_csv(sol: RemovalSolution) -> str:
    lines = ["iter,loss,penalty"]
    for i, (l, p) in enumerate(zip(sol.loss_trace, sol.penalty_trace)):
        lines.append(f"{i},{l!r},{p!r}")
    return "\n".join(lines) + "\n"
