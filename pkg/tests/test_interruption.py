import math

import numpy as np
import pytest

from tsdf.interruption import (
    CraftingError,
    Discrepancies,
    InterruptionConfig,
    adaptive_weights,
    ascent_direction,
    compute_discrepancies,
    craft_interruption,
    enhance_features,
    interruption_loss,
    normalize,
)
from tsdf.numerics import Tensor, evaluate_with_gradients, finite_difference_gradient, no_grad, ops, precision

from conftest import CRAFT


def toy_extractor(seed):
    """Two smooth conv layers mapping (N, 3, 4, 4) images to (N, 4, 4, 4) features."""
    r = np.random.default_rng(seed)
    w1, b1 = r.normal(0, 0.6, (4, 3, 3, 3)), r.normal(0, 0.1, 4)
    w2, b2 = r.normal(0, 0.6, (4, 4, 3, 3)), r.normal(0, 0.1, 4)

    def f(x):
        h = ops.sigmoid(ops.conv2d(x, w1, b1, 1, 1))
        return ops.conv2d(h, w2, b2, 1, 1)

    return f


def sigmoid(v):
    return 1 / (1 + math.exp(-v))


class TestConfig:
    def test_defaults(self):
        c = InterruptionConfig()
        assert (c.epsilon, c.gamma, c.lam, c.iterations) == (0.05, 0.001, 0.1, 50)

    @pytest.mark.parametrize(
        "kw", [{"iterations": 0}, {"epsilon": 0.0}, {"weights": (1, -1, 1)}, {"z": 0}, {"step_rule": "bogus"}]
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            InterruptionConfig(**kw)


class TestDiscrepancies:
    def test_identical_features_vanish(self, rng):
        f = rng.normal(size=(2, 3, 4, 4))
        d = compute_discrepancies(f, f, 0.1)
        for comp in d.components():
            np.testing.assert_array_equal(comp.data, 0.0)

    def test_channel_shift(self):
        # standardisation removes a per-channel shift, so only the global term sees it
        clean = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        z, c = 0.1, 0.5
        d = compute_discrepancies(clean + c, clean, z)
        np.testing.assert_allclose(d.local.data, 0.0, atol=1e-6)
        np.testing.assert_allclose(d.structural.data, 0.0, atol=1e-6)
        assert d.global_.data.item() == pytest.approx(c / (math.sqrt(1.25) + z), rel=1e-6)

    def test_constant_clean_uses_z(self):
        clean = np.full((1, 2, 2), 0.3)
        pert = np.array([[[0.3, 0.5], [0.7, 0.9]]])
        d = compute_discrepancies(pert, clean, 1e-3)
        assert np.isfinite(d.global_.data).all()
        assert d.global_.data.item() == pytest.approx((0.6 - 0.3) / 1e-3, rel=1e-4)

    def test_normalize_standardises(self, rng):
        n = normalize(rng.normal(3, 2, (2, 4, 5, 5)), 1e-6).data
        np.testing.assert_allclose(n.mean(axis=(-2, -1)), 0, atol=1e-5)
        np.testing.assert_allclose(n.std(axis=(-2, -1)), 1, atol=1e-4)

    def test_errors(self):
        with pytest.raises(ValueError):
            compute_discrepancies(np.zeros((1, 2, 2)), np.zeros((1, 3, 3)), 0.1)
        with pytest.raises(ValueError):
            compute_discrepancies(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 0.0)


def constant_delta(value, shape=(2, 3, 3)):
    full = Tensor(np.full(shape, value))
    return Discrepancies(full, Tensor(np.full(shape[:-2] + (1, 1), value)), full)


class TestAdaptiveWeights:
    def test_zero_delta_gives_half(self):
        np.testing.assert_array_equal(adaptive_weights(constant_delta(0.0)).data, 0.5)

    def test_large_delta(self):
        w = adaptive_weights(constant_delta(10.0)).data
        np.testing.assert_allclose(w, sigmoid(10.0), rtol=1e-6)
        assert w.flat[0] == pytest.approx(0.99995, abs=1e-5)

    def test_monotone(self):
        vals = [adaptive_weights(constant_delta(v)).data.flat[0] for v in (0.0, 0.1, 0.5, 2.0)]
        assert all(a < b for a, b in zip(vals, vals[1:]))


class TestEnhance:
    def test_zero_delta(self, rng):
        f = rng.normal(size=(2, 3, 3)).astype(np.float32)
        d = constant_delta(0.0)
        out = enhance_features(f, d, adaptive_weights(d), InterruptionConfig())
        np.testing.assert_array_equal(out.data, f)

    def test_alpha_zero(self, rng):
        f = rng.normal(size=(2, 3, 3)).astype(np.float32)
        d = compute_discrepancies(f + rng.normal(size=f.shape), f, 0.1)
        out = enhance_features(f, d, adaptive_weights(d), InterruptionConfig(alpha=0.0))
        np.testing.assert_array_equal(out.data, f)

    def test_scalar_example(self):
        one = lambda v: Tensor(np.full((1, 1, 1), v))
        d = Discrepancies(one(0.1), one(0.0), one(0.0))
        out = enhance_features(one(0.7), d, one(0.5), InterruptionConfig())
        assert out.data.item() == pytest.approx(0.7 + math.exp(0.05) * 0.1 / 3, rel=1e-6)

    def test_amplifier_exponent_clamped(self):
        one = lambda v: Tensor(np.full((1, 1, 1), v))
        d = Discrepancies(one(1e4), one(0.0), one(0.0))
        out = enhance_features(one(0.0), d, one(1.0), InterruptionConfig())
        assert out.data.item() == pytest.approx(math.exp(30) * 1e4 / 3, rel=1e-5)


def brute_force_scalar_loss(clean, pert, cfg):
    """The loss for one extractor with a 1x1x1 feature, written out by hand."""
    # a single position has zero spread, so normalisation maps both to 0
    local, struct = 0.0, 0.0
    glob = (pert - clean) / (0.0 + cfg.z)
    w_hat = sigmoid((abs(local) + abs(glob) + abs(struct)) / 3)
    norm = math.sqrt((w_hat * local) ** 2 + (w_hat * glob) ** 2 + (w_hat * struct) ** 2)
    amp = math.exp(min(norm / cfg.sigma, 30.0))
    w1, w2, w3 = cfg.weights
    f_enh = pert + cfg.alpha * amp * (w1 * local + w2 * glob + w3 * struct)
    return cfg.lam * (f_enh - clean) ** 2 + (pert - clean) ** 2


class TestLoss:
    def test_zero_perturbation(self, rng):
        x = rng.uniform(0.2, 0.8, (2, 3, 4, 4))
        for alpha in (0.0, 1.0, 7.0):
            cfg = InterruptionConfig(alpha=alpha)
            assert interruption_loss(x, np.zeros((3, 4, 4)), [toy_extractor(0)], cfg).item() == 0.0

    def test_lambda_zero_is_mse(self, rng):
        x = rng.uniform(0.2, 0.8, (2, 3, 4, 4))
        W = rng.uniform(-0.05, 0.05, (3, 4, 4))
        ext = [toy_extractor(0), toy_extractor(1)]
        got = interruption_loss(x, W, ext, InterruptionConfig(lam=0.0)).item()
        with no_grad():
            want = sum(
                float(np.mean((e(Tensor(x + W)).data.astype(np.float64) - e(Tensor(x)).data) ** 2)) for e in ext
            )
        assert got == pytest.approx(want, rel=1e-5)

    @pytest.mark.parametrize("z", [0.1, 1.0])
    def test_scalar_brute_force(self, z):
        cfg = InterruptionConfig(z=z)
        identity = lambda x: x
        got = interruption_loss(np.zeros((1, 1, 1, 1)), np.full((1, 1, 1), 0.2), [identity], cfg).item()
        assert got == pytest.approx(brute_force_scalar_loss(0.0, 0.2, cfg), rel=1e-5)

    def test_empty_extractors(self):
        with pytest.raises(ValueError):
            interruption_loss(np.zeros((1, 3, 4, 4)), np.zeros((3, 4, 4)), [], InterruptionConfig())

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.2, 0.8, (2, 3, 4, 4))
        W = rng.uniform(-0.05, 0.05, (3, 4, 4))
        ext = [toy_extractor(seed), toy_extractor(seed + 100)]
        cfg = InterruptionConfig()
        with precision(np.float64):
            _, (g,) = evaluate_with_gradients(lambda w: interruption_loss(x, w, ext, cfg), [W])

            def f(w):
                with no_grad():
                    return interruption_loss(x, Tensor(w), ext, cfg).item()

            fd = finite_difference_gradient(f, W, 1e-4)
        assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-4


class TestStepRules:
    def test_pixel_rms_unit_colour_length(self, rng):
        g = rng.normal(size=(3, 8, 8)) * 1e-7
        d = ascent_direction(g, "pixel_rms")
        assert np.sqrt((d**2).sum(axis=0).mean()) == pytest.approx(1.0, rel=1e-6)
        np.testing.assert_array_equal(np.sign(d), np.sign(g))

    def test_huge_gradient_does_not_overflow(self):
        g = np.full((3, 2, 2), 3e38, dtype=np.float32)
        assert np.isfinite(ascent_direction(g, "rms")).all()

    def test_other_rules(self, rng):
        g = rng.normal(size=(3, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(ascent_direction(g, "sign"), np.sign(g))
        assert np.abs(ascent_direction(g, "normalized")).max() == pytest.approx(1.0)
        np.testing.assert_array_equal(ascent_direction(g, "raw"), g)

    def test_zero_gradient_stays_zero(self):
        for rule in ("pixel_rms", "rms", "normalized", "sign"):
            np.testing.assert_array_equal(ascent_direction(np.zeros((3, 2, 2), np.float32), rule), 0.0)


class TestCraft:
    def small(self, **kw):
        base = dict(iterations=4, batch_size=4, seed=7)
        base.update(kw)
        return InterruptionConfig(**base)

    def test_budget_every_iteration(self, interruption_run):
        _, steps = interruption_run
        assert len(steps) == 50
        assert all(np.abs(W).max() <= np.float32(0.05) for W in steps)

    def test_deterministic(self, images, models):
        ext = models[0]
        a = craft_interruption(images[:8], ext, self.small()).data
        b = craft_interruption(images[:8], ext, self.small()).data
        assert a.tobytes() == b.tobytes()
        c = craft_interruption(images[:8], ext, self.small(seed=8)).data
        assert a.tobytes() != c.tobytes()

    def test_gamma_zero_fixpoint(self, images, models):
        steps = []
        cfg = self.small(gamma=0.0)
        W = craft_interruption(images[:8], models[0], cfg, callback=lambda t, W, l: steps.append(W.data.copy()))
        assert all(s.tobytes() == steps[0].tobytes() for s in steps)
        assert np.abs(W.data).max() <= 0.005

    def test_universal_shape(self, images, models):
        W = craft_interruption(images[:8], models[0], self.small(iterations=1))
        assert W.shape == images.shape[1:]

    def test_loss_rises(self, images, models, W0):
        ext = models[0]
        x = images[CRAFT]
        cfg = InterruptionConfig()
        init = craft_interruption(x, ext, InterruptionConfig(gamma=0.0, iterations=1)).data
        with no_grad():
            assert interruption_loss(x, W0, ext, cfg).item() > interruption_loss(x, init, ext, cfg).item()

    def test_non_finite_loss_aborts_with_iteration(self):
        blowup = lambda x: ops.exp(x * 1e3) * 1e30
        with pytest.raises(CraftingError) as e, np.errstate(over="ignore"):
            craft_interruption(np.full((2, 3, 4, 4), 0.5), [blowup], self.small())
        assert e.value.stage == "interruption" and e.value.iteration == 0
