import math

import numpy as np
import pytest

from morphix.audio import Spectrogram
from morphix.latent_core import TFMask
from morphix.metrics import (
    EMBED_DIM,
    GaussianStats,
    embed_spectrogram,
    frechet_distance,
    gaussian_stats,
    kl_divergence,
    load_editset,
    make_synthetic_editset,
    masked_spectral_distance,
    save_editset,
)

EDITSET_GOLDEN = "dfe76ba459d83c713deeb6405ab5f830c236d529b533b92a5ee739fa456e603d"


def rand_stats(rng, spread=1.0):
    mean = rng.normal(size=EMBED_DIM) * spread
    a = rng.normal(size=(EMBED_DIM, EMBED_DIM))
    cov = a @ a.T / EMBED_DIM
    return GaussianStats(mean=mean, cov=cov)


class TestFrechet:
    def test_identical_stats_zero(self):
        rng = np.random.default_rng(0)
        s = rand_stats(rng)
        assert frechet_distance(s, s) == pytest.approx(0.0, abs=1e-6)

    def test_mean_shift_closed_form(self):
        rng = np.random.default_rng(1)
        s = rand_stats(rng)
        d = rng.normal(size=EMBED_DIM)
        shifted = GaussianStats(mean=s.mean + d, cov=s.cov.copy())
        assert frechet_distance(s, shifted) == pytest.approx(float(d @ d), rel=1e-9, abs=1e-8)

    def test_diagonal_closed_form(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.1, 2.0, size=EMBED_DIM)
        q = rng.uniform(0.1, 2.0, size=EMBED_DIM)
        a = GaussianStats(mean=np.zeros(EMBED_DIM), cov=np.diag(p))
        b = GaussianStats(mean=np.zeros(EMBED_DIM), cov=np.diag(q))
        expect = float(((np.sqrt(p) - np.sqrt(q)) ** 2).sum())
        assert frechet_distance(a, b) == pytest.approx(expect, rel=1e-9)

    def test_symmetric_and_nonnegative_fuzz(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a = rand_stats(rng, spread=rng.uniform(0.1, 3.0))
            b = rand_stats(rng, spread=rng.uniform(0.1, 3.0))
            d_ab = frechet_distance(a, b)
            d_ba = frechet_distance(b, a)
            assert d_ab >= 0.0
            assert d_ab == pytest.approx(d_ba, abs=1e-9 * (1 + d_ab))
            assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-6)


class TestKl:
    def test_identical_stats_zero(self):
        rng = np.random.default_rng(4)
        s = rand_stats(rng)
        assert kl_divergence(s, s) == pytest.approx(0.0, abs=1e-6)

    def test_unit_covariance_mean_shift(self):
        rng = np.random.default_rng(5)
        d = rng.normal(size=EMBED_DIM)
        a = GaussianStats(mean=np.zeros(EMBED_DIM), cov=np.eye(EMBED_DIM))
        b = GaussianStats(mean=d, cov=np.eye(EMBED_DIM))
        assert kl_divergence(a, b) == pytest.approx(float(d @ d) / 2, rel=1e-5)

    def test_seeded_matches_direct_formula(self):
        rng = np.random.default_rng(6)
        a = rand_stats(rng)
        b = rand_stats(rng)
        got = kl_divergence(a, b)
        lam = 1e-6
        sa = a.cov + lam * np.eye(EMBED_DIM)
        sb = b.cov + lam * np.eye(EMBED_DIM)
        d = b.mean - a.mean
        expect = 0.5 * (np.trace(np.linalg.solve(sb, sa)) + d @ np.linalg.solve(sb, d)
                        - EMBED_DIM + np.linalg.slogdet(sb)[1] - np.linalg.slogdet(sa)[1])
        assert got == pytest.approx(float(expect), rel=1e-8)

    def test_nonnegative_fuzz(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            a = rand_stats(rng, spread=rng.uniform(0.1, 2.0))
            b = rand_stats(rng, spread=rng.uniform(0.1, 2.0))
            assert kl_divergence(a, b) >= 0.0


class TestMaskedSpectralDistance:
    def _spg(self, vals):
        return Spectrogram(values=np.asarray(vals, dtype=np.float32), hop=2,
                           n_fft=2 * (np.asarray(vals).shape[1] - 1), sample_rate=8000)

    def test_identical_gives_zeros(self):
        rng = np.random.default_rng(8)
        vals = rng.normal(size=(8, 9)).astype(np.float32)
        a = self._spg(vals)
        m = TFMask.from_rect(8, 9, 2, 5, 2, 5)
        assert masked_spectral_distance(a, self._spg(vals.copy()), m) == (0.0, 0.0)

    def test_unit_shift_inside_mask(self):
        rng = np.random.default_rng(9)
        vals = rng.normal(size=(8, 9)).astype(np.float32)
        m = TFMask.from_rect(8, 9, 2, 5, 2, 5)
        shifted = vals.copy()
        shifted[m.bits] += 1.0
        masked, unmasked = masked_spectral_distance(self._spg(vals), self._spg(shifted), m)
        assert masked == pytest.approx(1.0, rel=1e-6)
        assert unmasked == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(6, 5)).astype(np.float32)
        b = rng.normal(size=(6, 5)).astype(np.float32)
        bits = rng.random((6, 5)) < 0.5
        bits[0, 0] = True
        bits[1, 1] = False
        m = TFMask(bits)
        masked, unmasked = masked_spectral_distance(self._spg(a), self._spg(b), m)
        diff = (a.astype(np.float64) - b.astype(np.float64)) ** 2
        assert masked == pytest.approx(math.sqrt(diff[bits].mean()), rel=1e-9)
        assert unmasked == pytest.approx(math.sqrt(diff[~bits].mean()), rel=1e-9)


class TestEmbedding:
    def test_shape_and_finiteness(self):
        rng = np.random.default_rng(11)
        s = Spectrogram(values=rng.normal(size=(32, 64)).astype(np.float32),
                        hop=32, n_fft=126, sample_rate=16000)
        emb = embed_spectrogram(s)
        assert emb.shape == (32, EMBED_DIM)
        assert np.all(np.isfinite(emb))
        stats = gaussian_stats(emb)
        assert np.allclose(stats.cov, stats.cov.T, atol=1e-12)
        assert np.linalg.eigvalsh(stats.cov).min() >= -1e-9


class TestEditset:
    def test_pinned_fingerprint(self):
        tr = make_synthetic_editset(1, 1)[0]
        assert tr.fingerprint() == EDITSET_GOLDEN

    def test_determinism(self):
        a = make_synthetic_editset(12, 6)
        b = make_synthetic_editset(12, 6)
        for x, y in zip(a, b):
            assert x.fingerprint() == y.fingerprint()

    def test_task_cycle_and_nonempty_masks(self):
        triples = make_synthetic_editset(7, 12)
        kinds = [t.kind for t in triples]
        assert kinds[:6] == ["add", "remove", "replace", "move", "stretch", "pitch_shift"]
        for t in triples:
            assert not t.mask_c.is_empty()
            assert not t.mask_r.is_empty()

    def test_addition_target_is_constructive(self):
        triples = [t for t in make_synthetic_editset(3, 12) if t.kind == "add"]
        for tr in triples:
            src = tr.source.values.astype(np.float64)
            ref = tr.reference.values.astype(np.float64)
            tgt = tr.target.values.astype(np.float64)
            # outside the edit region the target equals the source exactly
            assert np.array_equal(tgt[~tr.mask_c.bits], src[~tr.mask_c.bits])
            # inside, the target is the log-domain mix of source and the
            # reference event content translated from mask_r to mask_c:
            # exp(target) = exp(source) + (exp(reference) - floor)
            event_mag = np.exp(ref[tr.mask_r.bits]) - 1e-5
            expect = np.log(np.exp(src[tr.mask_c.bits]) + event_mag)
            assert np.allclose(tgt[tr.mask_c.bits], expect, atol=2e-5)

    def test_removal_target_is_constructive(self):
        triples = [t for t in make_synthetic_editset(4, 12) if t.kind == "remove"]
        for tr in triples:
            src = tr.source.values.astype(np.float64)
            tgt = tr.target.values.astype(np.float64)
            assert np.array_equal(tgt[~tr.mask_c.bits], src[~tr.mask_c.bits])
            assert (tgt[tr.mask_c.bits] <= src[tr.mask_c.bits] + 1e-6).all()
            # the event is genuinely strong inside the region
            assert src[tr.mask_c.bits].max() - tgt[tr.mask_c.bits].max() > 0.5

    def test_save_load_round_trip(self, tmp_path):
        triples = make_synthetic_editset(5, 6)
        save_editset(triples, tmp_path / "es")
        again = load_editset(tmp_path / "es")
        assert len(again) == 6
        for a, b in zip(triples, again):
            assert a.fingerprint() == b.fingerprint()
