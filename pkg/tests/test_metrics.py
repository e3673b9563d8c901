import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracewarp import data as D
from tracewarp import deformation as dfm
from tracewarp import metrics as E
from tracewarp import model as M


def gaussian_2d(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_oracle(a, b, L=255.0):
    """Window-by-window SSIM with an explicit 2-D Gaussian weight."""
    w = gaussian_2d()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for r in range(a.shape[0] - 10):
        for c in range(a.shape[1] - 10):
            pa, pb = a[r:r + 11, c:c + 11], b[r:r + 11, c:c + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb = (w * (pa - ma) ** 2).sum(), (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def checkerboard(n=16):
    return 255.0 * (np.add.outer(np.arange(n), np.arange(n)) % 2)


def nmi_counting_oracle(a, b, bins=64):
    ia = np.minimum((a / 255.0 * bins).astype(int), bins - 1)
    ib = np.minimum((b / 255.0 * bins).astype(int), bins - 1)
    joint = np.bincount((ia * bins + ib).ravel(), minlength=bins * bins) / a.size

    def h(p):
        p = p[p > 0]
        return -(p * np.log(p)).sum()
    return (h(joint.reshape(bins, bins).sum(1)) + h(joint.reshape(bins, bins).sum(0))) / h(joint)


class TestSsim:
    def test_self_similarity_exactly_one(self):
        a = np.random.default_rng(0).uniform(0, 255, (24, 20))
        assert E.ssim(a, a) == 1.0

    def test_checkerboard_inverse_matches_oracle(self):
        a = checkerboard()
        val = E.ssim(a, 255 - a)
        assert val < 0
        assert val == pytest.approx(ssim_oracle(a, 255 - a), abs=1e-12)

    def test_random_images_match_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(0, 255, (14, 15)), rng.uniform(0, 255, (14, 15))
        assert E.ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-12)

    def test_constant_plus_epsilon(self):
        c1 = (0.01 * 255) ** 2
        mu = 100.0
        prev = 1.0
        for eps in (0.1, 1.0, 5.0, 20.0, 60.0):
            val = E.ssim(np.full((16, 16), mu), np.full((16, 16), mu + eps))
            closed = (2 * mu * (mu + eps) + c1) / (mu ** 2 + (mu + eps) ** 2 + c1)
            assert val == pytest.approx(closed, abs=1e-12)
            assert val < prev
            prev = val
        assert E.ssim(np.full((16, 16), mu), np.full((16, 16), mu + 1e-6)) == pytest.approx(1.0, abs=1e-12)

    def test_small_image_rejected(self):
        with pytest.raises(ValueError, match="window"):
            E.ssim(np.zeros((10, 30)), np.zeros((10, 30)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            E.ssim(np.zeros((16, 16)), np.zeros((16, 17)))


class TestPointMetrics:
    def test_identical(self):
        a = np.random.default_rng(0).uniform(0, 255, (16, 16))
        assert E.mae(a, a) == 0.0
        assert E.psnr(a, a) == math.inf
        assert E.nmi_hard(a, a) == 2.0

    def test_offset_ten(self):
        a = np.random.default_rng(1).uniform(0, 200, (16, 16))
        assert E.mae(a, a + 10) == pytest.approx(10.0, abs=1e-12)

    def test_psnr_formula(self):
        a = np.zeros((4, 4))
        assert E.psnr(a, a + 5) == pytest.approx(10 * math.log10(255 ** 2 / 25))

    def test_nmi_independent_noise(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(0, 255, (100, 100)), rng.uniform(0, 255, (100, 100))
        val = E.nmi_hard(a, b, bins=64)
        assert abs(val - 1.0) < 0.05
        assert val == pytest.approx(nmi_counting_oracle(a, b), abs=1e-12)

    def test_psnr_decreases_with_noise(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 255, (32, 32))
        n = rng.standard_normal(a.shape)
        values = [E.psnr(a, a + s * n) for s in (0.5, 1, 2, 4, 8, 16)]
        assert all(x > y for x, y in zip(values, values[1:]))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0, 255, (16, 16)), rng.uniform(0, 255, (16, 16))
        assert E.ssim(a, b) == pytest.approx(E.ssim(b, a), abs=1e-10)
        assert E.mae(a, b) == E.mae(b, a)
        assert E.nmi_hard(a, b) == pytest.approx(E.nmi_hard(b, a), abs=1e-10)
        ea, eb = E.sobel_edges(a), E.sobel_edges(b)
        assert E.dice(ea, eb) == E.dice(eb, ea)


class TestEdges:
    def test_constant_has_no_edges(self):
        em = E.sobel_edges(np.full((12, 12), 77.0))
        assert not em.mask.any()

    def test_vertical_step(self):
        img = np.zeros((16, 16))
        img[:, 8:] = 255.0
        # central difference x[c+1] - x[c-1] is nonzero only at columns 7 and 8,
        # with row smoothing 1 + 2 + 1: magnitude 4 * 255
        mag = E.sobel_magnitude(img)
        np.testing.assert_allclose(mag[:, 7:9], 1020.0)
        assert np.all(mag[:, :7] == 0) and np.all(mag[:, 9:] == 0)
        em = E.sobel_edges(img)
        expected = np.zeros((16, 16), bool)
        expected[:, 7:9] = True
        np.testing.assert_array_equal(em.mask, expected)

    def test_constant_offset_invariant(self):
        img = np.random.default_rng(4).uniform(0, 200, (16, 16))
        np.testing.assert_array_equal(E.sobel_edges(img).mask, E.sobel_edges(img + 37).mask)

    def test_binary_and_same_shape(self):
        img = np.random.default_rng(5).uniform(0, 255, (13, 17))
        em = E.sobel_edges(img)
        assert em.mask.dtype == bool and em.mask.shape == img.shape


class TestDice:
    def test_identical(self):
        a = np.zeros((10, 10), bool)
        a[2:5, 3:7] = True
        assert E.dice(a, a) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((10, 10), bool), np.zeros((10, 10), bool)
        a[:5], b[5:] = True, True
        assert E.dice(a, b) == 0.0

    def test_half_overlap(self):
        a, b = np.zeros(400, bool), np.zeros(400, bool)
        a[:100], b[50:150] = True, True
        assert a.sum() == 100 and b.sum() == 100 and (a & b).sum() == 50
        assert E.dice(a, b) == 0.5

    def test_both_empty(self):
        z = np.zeros((4, 4), bool)
        assert E.dice(z, z) == 1.0

    def test_mask_restricts(self):
        a, b = np.zeros((6, 6), bool), np.zeros((6, 6), bool)
        a[0], b[0], b[5] = True, True, True
        mask = np.zeros((6, 6))
        mask[:3] = 1
        assert E.dice(a, b) < 1.0
        assert E.dice(a, b, mask) == 1.0


class TestReport:
    def test_summary_recomputable(self, tmp_path):
        rng = np.random.default_rng(6)
        rep = E.MetricReport("standard")
        for i in range(7):
            rep.add(f"p{i}", {"a": rng.normal(), "b": rng.uniform(0, 100)})
        rep.add("p7", {"a": math.inf, "b": 3.0})
        rep.write_csv(tmp_path / "r.csv")
        ids, cols, summary = E.read_report_csv(tmp_path / "r.csv")
        assert ids == [f"p{i}" for i in range(8)]
        a = np.array(cols["a"])
        finite = a[np.isfinite(a)]
        assert summary["mean"][0] == pytest.approx(finite.mean(), abs=1e-9)
        assert summary["std"][0] == pytest.approx(finite.std(), abs=1e-9)
        assert summary["excluded"] == [1, 0]
        assert finite.min() <= summary["mean"][0] <= finite.max()
        assert summary["std"][1] >= 0

    def test_inconsistent_rows_rejected(self):
        rep = E.MetricReport("x")
        rep.add("p0", {"a": 1.0})
        with pytest.raises(ValueError):
            rep.add("p1", {"b": 1.0})


def _identity_predictor(xb):
    """Zero field and a translation that reproduces the source exactly."""
    out = []
    for x in xb:
        grid = dfm.identity_grid(1, *x.shape[1:], np.float64)[0]
        out.append(E.Prediction(x[0], x[0], np.zeros((2,) + x.shape[1:]), grid))
    return out


@pytest.fixture(scope="module")
def pairs():
    return D.generate_dataset(D.SynthConfig(n_pairs=4, seed=3))


class TestProtocols:
    def test_identity_correspondence_is_perfect(self, pairs):
        rep = E.correspondence_eval(_identity_predictor, pairs)
        assert rep.values["edge_dice"] == [1.0] * len(pairs)

    def test_identity_traceability(self, pairs):
        rep = E.traceability_eval(_identity_predictor, pairs)
        assert rep.values["mae"] == [0.0] * len(pairs)
        assert rep.values["fold_fraction"] == [0.0] * len(pairs)
        np.testing.assert_allclose(rep.values["epe"], rep.values["epe_zero"])

    @pytest.mark.parametrize("name", sorted(E.PROTOCOLS))
    def test_untrained_model_finite(self, pairs, name):
        params = M.init_params(M.ModelConfig(), seed=1)
        rep = E.run_protocol(name, params, pairs)
        assert rep.ids == [p.id for p in pairs]
        for k in rep.metrics:
            assert np.all(np.isfinite(rep.values[k])), k

    def test_standard_columns(self, pairs):
        rep = E.standard_eval(M.init_params(M.ModelConfig(), seed=2), pairs)
        assert rep.metrics == ["ssim", "mae", "psnr", "nmi"]

    def test_unknown_protocol(self, pairs):
        with pytest.raises(ValueError):
            E.run_protocol("nope", _identity_predictor, pairs)

    def test_empty_pairs_rejected(self):
        with pytest.raises(ValueError):
            E.standard_eval(_identity_predictor, [])
