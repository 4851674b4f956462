import math

import numpy as np
import pytest

from morphix.latent_core import LatentGrid
from morphix.sampling import make_schedule


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(1000, "linear")


def rand_grid(rng, shape=(2, 4, 4), scale=1.0):
    return LatentGrid(scale * rng.normal(size=shape))


def spearman(a, b):
    """Spearman rank correlation, no scipy needed."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ra = np.argsort(np.argsort(a)).astype(float)
    rb = np.argsort(np.argsort(b)).astype(float)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    return float((ra * rb).sum() / denom) if denom > 0 else 0.0


def grid_search_optimum(a0, b0, zm, alpha, use_penalty=True):
    """Brute-force oracle for the 2-element removal problem: two-stage grid
    search over the delta box [-0.5, 0.5]^4, refined to an effective step
    of 1e-3 around the coarse optimum."""
    val, pt = _scan(a0, b0, zm, alpha, np.zeros(4), 0.5, 0.025, use_penalty)
    val2, _ = _scan(a0, b0, zm, alpha, pt, 0.026, 1e-3, use_penalty)
    return min(val, val2)


def _scan(a0, b0, zm, alpha, center, half, step, use_penalty):
    axes = [np.clip(np.arange(c - half, c + half + step / 2, step), -0.5, 0.5)
            for c in center]
    d1, d2, d3, d4 = np.meshgrid(*axes, indexing="ij", sparse=True)
    a1 = a0.ravel()[0] + d1
    a2 = a0.ravel()[1] + d2
    b1 = b0.ravel()[0] + d3
    b2 = b0.ravel()[1] + d4
    na = np.sqrt(a1 ** 2 + a2 ** 2)
    nb = np.sqrt(b1 ** 2 + b2 ** 2)
    dot = a1 * b1 + a2 * b2
    u = np.clip(dot / (na * nb), -1.0, 1.0)
    w = np.arccos(u)
    sin_w = np.sin(w)
    small = sin_w < 1e-9
    la = np.where(small, 1.0 - alpha, np.sin((1 - alpha) * w) / np.where(small, 1.0, sin_w))
    lb = np.where(small, alpha, np.sin(alpha * w) / np.where(small, 1.0, sin_w))
    m1 = la * a1 + lb * b1
    m2 = la * a2 + lb * b2
    nm = np.sqrt(m1 ** 2 + m2 ** 2)
    z1, z2 = zm.ravel()
    nz = math.hypot(z1, z2)
    v = np.clip((z1 * m1 + z2 * m2) / (nz * nm), -1.0, 1.0)
    loss = np.arccos(v)
    if use_penalty:
        loss = loss + (dot ** 2) / 4.0
    idx = np.unravel_index(np.argmin(loss), loss.shape)
    pt = np.array([axes[i][idx[i]] for i in range(4)])
    return float(loss[idx]), pt
