import numpy as np
import pytest

from morphix.guidance import (
    EmptyRegionError,
    GuidanceWeights,
    RegionPair,
    consistency_energy,
    consistency_energy_grad,
    contrast_energy,
    contrast_energy_grad,
    guided_epsilon,
    masked_similarity,
    task_energy,
    task_energy_grad,
)
from morphix.latent_core import LatentGrid, TFMask
from morphix.models import Condition, ToyDenoiser


def rect_mask(t_len=8, f_len=8, t0=2, t1=6, f0=2, f1=6):
    return TFMask.from_rect(t_len, f_len, t0, t1, f0, f1)


class TestMaskedSimilarity:
    def test_identical_features_give_one(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(3, 8, 8))
        m = rect_mask()
        assert masked_similarity(f, m, f.copy(), m) == pytest.approx(1.0, abs=1e-12)

    def test_opposite_features_give_zero(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(3, 8, 8))
        m = rect_mask()
        assert masked_similarity(f, m, -f, m) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_features_give_half(self):
        f = np.zeros((1, 4, 4))
        g = np.zeros((1, 4, 4))
        f[0, 0, 0] = 1.0
        g[0, 0, 1] = 1.0
        m = TFMask.full(4, 4)
        assert masked_similarity(f, m, g, m) == pytest.approx(0.5, abs=1e-12)

    def test_bounded_on_fuzzed_inputs(self):
        rng = np.random.default_rng(2)
        for _ in range(2000):
            c = int(rng.integers(1, 4))
            h = int(rng.integers(2, 7))
            w = int(rng.integers(2, 7))
            f = rng.normal(size=(c, h, w)) * rng.uniform(0, 100)
            g = rng.normal(size=(c, h, w)) * rng.uniform(0, 100)
            bits = rng.random((h, w)) < 0.5
            if not bits.any():
                bits[0, 0] = True
            m = TFMask(bits)
            s = masked_similarity(f, m, g, m)
            assert 0.0 <= s <= 1.0

    def test_zero_norm_degenerates_to_half(self):
        m = rect_mask(4, 4, 0, 2, 0, 2)
        f = np.zeros((1, 4, 4))
        g = np.ones((1, 4, 4))
        assert masked_similarity(f, m, g, m) == pytest.approx(0.5)

    def test_empty_mask_rejected(self):
        f = np.ones((1, 4, 4))
        with pytest.raises(EmptyRegionError):
            RegionPair(TFMask.empty(4, 4), TFMask.full(4, 4))


class TestRegionPair:
    def test_identity_alignment_for_equal_masks(self):
        m = rect_mask()
        pair = RegionPair(m, m)
        cc, cr = pair.aligned_cells(8, 8)
        assert np.array_equal(cc, cr)
        assert len(cc) == m.popcount()

    def test_translated_alignment_is_bijective(self):
        mc = rect_mask(16, 16, 2, 6, 3, 7)
        mr = rect_mask(16, 16, 9, 13, 8, 12)
        pair = RegionPair(mc, mr)
        cc, cr = pair.aligned_cells(16, 16)
        assert len(cc) == len(cr) == mc.popcount()
        # same-shape boxes: the map is a pure translation, hence bijective
        assert len({tuple(x) for x in cr.tolist()}) == len(cr)
        assert np.array_equal(cr - cc, np.tile([7, 5], (len(cc), 1)))

    def test_vanishing_mask_at_coarse_resolution_rejected(self):
        mc = TFMask.from_rect(64, 64, 0, 1, 0, 1)  # single cell
        pair = RegionPair(mc, mc)
        with pytest.raises(EmptyRegionError):
            pair.aligned_cells(8, 8)


class TestConsistencyEnergy:
    def test_closed_form_at_full_similarity(self):
        rng = np.random.default_rng(3)
        f = rng.normal(size=(2, 8, 8))
        taps = {2: f, 3: f * 2.0}
        m = rect_mask()
        pair = RegionPair(m, m)
        e = consistency_energy(taps, {2: f.copy(), 3: f.copy() * 2.0}, pair, (2, 3))
        assert e == pytest.approx(0.4, abs=1e-12)

    def test_closed_form_at_zero_similarity(self):
        # sim = 0 means opposite features (cos = -1)
        rng = np.random.default_rng(99)
        f = rng.normal(size=(1, 8, 8))
        m = rect_mask()
        pair = RegionPair(m, m)
        e = consistency_energy({2: f, 3: f}, {2: -f, 3: -f}, pair, (2, 3))
        assert e == pytest.approx(2.0, abs=1e-12)

    def test_matches_formula_on_seeded_taps(self):
        rng = np.random.default_rng(4)
        m = rect_mask()
        pair = RegionPair(m, m)
        taps_c = {l: rng.normal(size=(3, 8, 8)) for l in (2, 3)}
        taps_r = {l: rng.normal(size=(3, 8, 8)) for l in (2, 3)}
        e = consistency_energy(taps_c, taps_r, pair, (2, 3))
        ld = np.longdouble
        expect = ld(0)
        for l in (2, 3):
            x = taps_c[l][:, m.bits].astype(ld).ravel()
            y = taps_r[l][:, m.bits].astype(ld).ravel()
            sim = 0.5 * (x @ y) / (np.sqrt(x @ x) * np.sqrt(y @ y)) + 0.5
            expect += 1 / (1 + 4 * sim)
        assert e == pytest.approx(float(expect), rel=1e-12)

    def test_strictly_decreasing_in_similarity(self):
        # parameterized sweep: rotate one feature toward the reference
        rng = np.random.default_rng(5)
        m = rect_mask()
        pair = RegionPair(m, m)
        base = rng.normal(size=(1, 8, 8))
        other = rng.normal(size=(1, 8, 8))
        energies = []
        for lam in np.linspace(0.0, 1.0, 9):
            f = (1 - lam) * other + lam * base
            energies.append(consistency_energy({2: f}, {2: base}, pair, (2,)))
        assert all(b < a for a, b in zip(energies, energies[1:]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        m = rect_mask()
        pair = RegionPair(m, m)
        f = rng.normal(size=(2, 8, 8))
        ref = {2: rng.normal(size=(2, 8, 8))}
        _, grads = consistency_energy_grad({2: f}, ref, pair, (2,))
        h = 1e-6
        fd = np.zeros_like(f)
        for idx in np.ndindex(*f.shape):
            fp, fm = f.copy(), f.copy()
            fp[idx] += h
            fm[idx] -= h
            fd[idx] = (consistency_energy({2: fp}, ref, pair, (2,))
                       - consistency_energy({2: fm}, ref, pair, (2,))) / (2 * h)
        assert np.allclose(fd, grads[2], atol=1e-6)


class TestContrastEnergy:
    def test_identical_global_features_give_one(self):
        rng = np.random.default_rng(7)
        f = rng.normal(size=(2, 8, 8))
        m = rect_mask()
        pair = RegionPair(m, m)
        e = contrast_energy({2: f, 3: f}, {2: f.copy(), 3: f.copy()}, pair, (2, 3))
        assert e == pytest.approx(1.0, abs=1e-12)

    def test_opposite_global_features_give_zero(self):
        rng = np.random.default_rng(8)
        f = rng.normal(size=(2, 8, 8))
        m = rect_mask()
        pair = RegionPair(m, m)
        e = contrast_energy({2: f}, {2: -f}, pair, (2,))
        assert e == pytest.approx(0.0, abs=1e-12)

    def test_matches_pooled_formula(self):
        rng = np.random.default_rng(9)
        m = rect_mask()
        pair = RegionPair(m, m)
        fc = {2: rng.normal(size=(3, 8, 8)), 3: rng.normal(size=(3, 8, 8))}
        fr = {2: rng.normal(size=(3, 8, 8)), 3: rng.normal(size=(3, 8, 8))}
        e = contrast_energy(fc, fr, pair, (2, 3))
        expect = 0.0
        for l in (2, 3):
            px = fc[l][:, m.bits].mean(axis=1)
            py = fr[l][:, m.bits].mean(axis=1)
            cos = px @ py / (np.linalg.norm(px) * np.linalg.norm(py))
            expect += (0.5 * cos + 0.5) / 2
        assert e == pytest.approx(expect, rel=1e-10)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        m = rect_mask()
        pair = RegionPair(m, m)
        f = rng.normal(size=(2, 8, 8))
        ref = {2: rng.normal(size=(2, 8, 8))}
        _, grads = contrast_energy_grad({2: f}, ref, pair, (2,))
        h = 1e-6
        fd = np.zeros_like(f)
        for idx in np.ndindex(*f.shape):
            fp, fm = f.copy(), f.copy()
            fp[idx] += h
            fm[idx] -= h
            fd[idx] = (contrast_energy({2: fp}, ref, pair, (2,))
                       - contrast_energy({2: fm}, ref, pair, (2,))) / (2 * h)
        assert np.allclose(fd, grads[2], atol=1e-6)


class TestTaskEnergy:
    def test_zero_weights_zero_energy(self):
        rng = np.random.default_rng(11)
        m = rect_mask()
        pair = RegionPair(m, m)
        taps = {2: rng.normal(size=(1, 8, 8)), 3: rng.normal(size=(1, 8, 8))}
        w = GuidanceWeights(w_content=0.0, w_edit=0.0, eta_guidance=1.0, tap_layers=(2, 3))
        assert task_energy("add", taps, taps, taps, pair, w) == 0.0

    def test_all_similar_add_closed_form(self):
        rng = np.random.default_rng(12)
        m = rect_mask()
        pair = RegionPair(m, m)
        taps = {2: rng.normal(size=(1, 8, 8)), 3: rng.normal(size=(1, 8, 8))}
        w = GuidanceWeights(w_content=1.0, w_edit=1.0, tap_layers=(2, 3))
        e = task_energy("add", taps, {l: t.copy() for l, t in taps.items()},
                        {l: t.copy() for l, t in taps.items()}, pair, w)
        assert e == pytest.approx(0.8, abs=1e-12)

    def test_compositional_against_constituents(self):
        rng = np.random.default_rng(13)
        mc = rect_mask(8, 8, 1, 4, 1, 4)
        mr = rect_mask(8, 8, 4, 7, 4, 7)
        pair = RegionPair(mc, mr)
        now = {2: rng.normal(size=(2, 8, 8))}
        src = {2: rng.normal(size=(2, 8, 8))}
        ref = {2: rng.normal(size=(2, 8, 8))}
        w = GuidanceWeights(w_content=0.7, w_edit=1.3, tap_layers=(2,))
        e_add = task_energy("add", now, src, ref, pair, w)
        expect = 0.7 * consistency_energy(now, src, pair.identity_on_current(), (2,)) \
            + 1.3 * consistency_energy(now, ref, pair, (2,))
        assert e_add == pytest.approx(expect, rel=1e-12)
        e_rm = task_energy("remove", now, src, ref, pair, w)
        expect_rm = 0.7 * consistency_energy(now, src, pair.identity_on_current(complement=True), (2,)) \
            + 1.3 * contrast_energy(now, ref, pair, (2,))
        assert e_rm == pytest.approx(expect_rm, rel=1e-12)

    def test_no_gradient_leak_to_reference(self):
        rng = np.random.default_rng(14)
        m = rect_mask()
        pair = RegionPair(m, m)
        now = {2: rng.normal(size=(1, 8, 8))}
        src = {2: rng.normal(size=(1, 8, 8))}
        ref = {2: rng.normal(size=(1, 8, 8))}
        w = GuidanceWeights(tap_layers=(2,))
        e1, g1 = task_energy_grad("add", now, src, ref, pair, w)
        ref2 = {2: ref[2] + 0.5}
        e2, g2 = task_energy_grad("add", now, src, ref2, pair, w)
        assert e1 != e2  # energy sees the perturbation
        # cotangents cover the current branch only; the reference branch is
        # stop-gradient, so no reference gradient exists to leak
        assert set(g1) == {2} and set(g2) == {2}

    def test_unknown_kind_rejected(self):
        m = rect_mask()
        pair = RegionPair(m, m)
        with pytest.raises(ValueError):
            task_energy("replace", {}, {}, {}, pair, GuidanceWeights())


class TestTaskEnergyThroughModel:
    def test_gradient_through_vjp_matches_finite_differences(self, schedule):
        model = ToyDenoiser(latent_shape=(2, 8, 8), base_ch=8, emb_dim=16, seed=11)
        rng = np.random.default_rng(15)
        z = LatentGrid(rng.normal(size=(2, 8, 8)))
        mask = rect_mask(8, 8, 1, 7, 1, 7)
        pair = RegionPair(mask, mask)
        w = GuidanceWeights(w_content=1.0, w_edit=1.0, tap_layers=(2, 3))
        cond = Condition(0)
        t = 380
        src = model.predict_with_features(LatentGrid(rng.normal(size=(2, 8, 8))), t, cond,
                                          want_taps=(2, 3))[1]
        ref = model.predict_with_features(LatentGrid(rng.normal(size=(2, 8, 8))), t, cond,
                                          want_taps=(2, 3))[1]

        def energy_of(zv):
            taps = model.predict_with_features(LatentGrid(zv), t, cond, want_taps=(2, 3))[1]
            return task_energy("add", taps, src, ref, pair, w)

        taps_now = model.predict_with_features(z, t, cond, want_taps=(2, 3))[1]
        _, cots = task_energy_grad("add", taps_now, src, ref, pair, w)
        grad = model.vjp_wrt_latent(z, t, cond, cots)

        fd = np.zeros(z.shape)
        for idx in np.ndindex(*z.shape):
            h = 1e-3 * (1 + abs(z.values[idx]))
            zp, zm = z.values.copy(), z.values.copy()
            zp[idx] += h
            zm[idx] -= h
            fd[idx] = (energy_of(zp) - energy_of(zm)) / (2 * h)
        rel = np.abs(fd - grad.values).max() / (np.abs(fd).max() + 1e-12)
        assert rel <= 1e-2


class TestGuidedEpsilon:
    def test_zero_gradient_no_change(self, schedule):
        rng = np.random.default_rng(16)
        eps = LatentGrid(rng.normal(size=(1, 3, 3)))
        out = guided_epsilon(eps, LatentGrid(np.zeros((1, 3, 3))), 500, schedule, 1.0)
        assert np.array_equal(out.values, eps.values)

    def test_zero_eta_no_change(self, schedule):
        rng = np.random.default_rng(17)
        eps = LatentGrid(rng.normal(size=(1, 3, 3)))
        g = LatentGrid(rng.normal(size=(1, 3, 3)))
        out = guided_epsilon(eps, g, 500, schedule, 0.0)
        assert np.array_equal(out.values, eps.values)

    def test_quarter_variance_gives_half_coefficient(self):
        # alpha_bar = 0.75 -> sqrt(1 - 0.75) = 0.5
        from morphix.sampling import NoiseSchedule
        ab = np.concatenate([[1.0], np.linspace(0.9, 0.5, 10)])
        ab[5] = 0.75
        ab = np.sort(ab)[::-1].copy()
        s = NoiseSchedule(steps=10, alpha_bar=ab)
        t = int(np.where(s.alpha_bar == 0.75)[0][0])
        eps = LatentGrid(np.zeros((1, 2, 2)))
        g = LatentGrid(np.ones((1, 2, 2)))
        out = guided_epsilon(eps, g, t, s, 2.0)
        assert np.allclose(out.values, 2.0 * 0.5)


class TestGuidanceWeights:
    def test_json_round_trip(self):
        w = GuidanceWeights(w_content=0.5, w_edit=2.0, eta_guidance=3.0, tap_layers=(1, 3))
        again = GuidanceWeights.from_dict(w.to_dict())
        assert again == w

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            GuidanceWeights(w_content=-1.0)
