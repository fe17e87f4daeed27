import math
import types
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from ArcGemRetrieval import head
from ArcGemRetrieval.backbone import init_backbone
from ArcGemRetrieval.errors import ConfigError, DataError, DimensionError, DomainError, UsageError
from ArcGemRetrieval.head import ArcMarginConfig, HeadParams
from ArcGemRetrieval.numerics import SeededRng, central_diff_grad

## Gradient check sizes: channels, embedding, classes, batch, feature map side
C, D, K, N, SIDE = 16, 8, 5, 4, 3

def random_instance(seed, margin = 0.15, hard = False):
    """ A random float64 head, a batch of positive feature maps and labels.

        With hard, the classifier row of the first sample's label points away from its embedding so that the
            target angle plus the margin exceeds pi.
    """
    rng = SeededRng(seed, "gradcheck")
    features = rng.uniform(0.1, 1.0, (N, C, SIDE, SIDE))
    params = HeadParams(gem_p = np.array([rng.uniform(1.5, 4.0)]), W_emb = rng.normal(0.25, (D, C)),
                        b_emb = rng.normal(0.1, D), W_cls = rng.normal(0.35, (K, D)))
    labels = rng.integers(0, K, N)
    if hard:
        e = head.embed_forward(head.gem_pool(features[0], params.p), params.W_emb, params.b_emb)
        params.W_cls[labels[0]] = -e / np.linalg.norm(e) + rng.normal(0.02, D)
    return params, features, labels, ArcMarginConfig(s = 30.0, m = margin)

def with_tensor(params, name, value):
    params = params.copy()
    setattr(params, name, value)
    return params

class GemCase(unittest.TestCase):
    """ TestCase for GeM pooling and its gradient """

    def test_examples(self):
        """ Tests the arithmetic mean, the zero channel and the p=2 example """
        self.assertAlmostEqual(float(head.gem_pool(np.array([[[1.0, 2.0, 3.0]]]), 1.0)[0]), 2.0, places = 12)
        np.testing.assert_array_equal(head.gem_pool(np.zeros((2, 3, 3)), 3.0), [0.0, 0.0])
        self.assertAlmostEqual(float(head.gem_pool(np.array([[[1.0, 2.0]]]), 2.0)[0]), math.sqrt(2.5), places = 12)

    def test_batch(self):
        """ Tests that a batch pools like its items """
        features = SeededRng(1).uniform(0, 1, (3, 4, 5, 5))
        pooled = head.gem_pool(features, 3.0)
        self.assertEqual(pooled.shape, (3, 4))
        for i in range(3):
            np.testing.assert_allclose(pooled[i], head.gem_pool(features[i], 3.0), rtol = 1e-14)

    def test_domain(self):
        """ Tests that negative features and p < 1 are refused """
        self.assertRaises(DomainError, head.gem_pool, -np.ones((1, 2, 2)), 3.0)
        self.assertRaises(DomainError, head.gem_pool, np.ones((1, 2, 2)), 0.5)
        self.assertRaises(DimensionError, head.gem_pool, np.ones(4), 3.0)

    @settings(max_examples = 50, deadline = None)
    @given(st.integers(min_value = 0, max_value = 2**31))
    def test_limits_and_monotonicity(self, seed):
        """ Tests p=1 against the mean, the p=64 bound against the max, and monotonicity in p """
        features = SeededRng(seed).uniform(0.1, 1.0, (4, 3, 3))
        flat = features.reshape(4, -1)
        np.testing.assert_allclose(head.gem_pool(features, 1.0), flat.mean(axis = 1), rtol = 0, atol = 1e-12)

        ## (1/|X|)^(1/p) * max <= GeM <= max
        high = head.gem_pool(features, 64.0)
        maximum = flat.max(axis = 1)
        self.assertTrue(np.all(high <= maximum * (1 + 1e-12)))
        self.assertTrue(np.all(high >= maximum * flat.shape[1]**(-1 / 64) * (1 - 1e-12)))

        outputs = [head.gem_pool(features, p) for p in (1.0, 2.0, 4.0, 8.0)]
        for lower, upper in zip(outputs, outputs[1:]):
            self.assertTrue(np.all(upper >= lower - 1e-12))

    def test_p64_single_peak(self):
        """ Tests that p=64 lands within 1% of the max when a channel has two positions """
        features = np.array([[[0.1, 1.0]], [[0.5, 0.7]]])
        np.testing.assert_allclose(head.gem_pool(features, 64.0), [1.0, 0.7], rtol = 0.011)

    def test_grad_matches_oracle(self):
        """ Tests dF and dp against central differences on random 2x3x3 inputs """
        for seed in range(5):
            rng = SeededRng(seed, "gem")
            features = rng.uniform(0.1, 1.0, (2, 3, 3))
            upstream = rng.normal(1.0, 2)
            p = rng.uniform(1.2, 5.0)
            dF, dp = head.gem_pool_grad(features, p, upstream)
            numeric_dF = central_diff_grad(lambda x: float(upstream @ head.gem_pool(x, p)), features)
            np.testing.assert_allclose(dF, numeric_dF, rtol = 1e-5, atol = 1e-9)
            numeric_dp = central_diff_grad(lambda q: float(upstream @ head.gem_pool(features, q[0])), np.array([p]))[0]
            self.assertAlmostEqual(dp, numeric_dp, delta = 1e-5 * max(1.0, abs(numeric_dp)))

    def test_grad_average_pooling(self):
        """ Tests that p=1 spreads upstream uniformly """
        features = SeededRng(2).uniform(0.1, 1.0, (2, 3, 3))
        dF, _ = head.gem_pool_grad(features, 1.0, np.array([2.0, -1.0]))
        np.testing.assert_allclose(dF[0], 2.0 / 9, rtol = 1e-12)
        np.testing.assert_allclose(dF[1], -1.0 / 9, rtol = 1e-12)

    def test_grad_constant_channel(self):
        """ Tests that dp vanishes when every value of a channel is equal, and zero channels get a zero subgradient """
        _, dp = head.gem_pool_grad(np.full((1, 3, 3), 0.4), 3.0, np.array([1.0]))
        self.assertAlmostEqual(dp, 0.0, places = 12)
        dF, dp = head.gem_pool_grad(np.zeros((1, 2, 2)), 3.0, np.array([1.0]))
        np.testing.assert_array_equal(dF, 0.0)
        self.assertEqual(dp, 0.0)

class EmbedCase(unittest.TestCase):
    """ TestCase for the embedding layer """

    def test_examples(self):
        """ Tests the identity slice, the zero input and a matmul oracle """
        v = np.arange(6, dtype = np.float64)
        np.testing.assert_array_equal(head.embed_forward(v, np.eye(4, 6), np.zeros(4)), v[:4])
        b = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(head.embed_forward(np.zeros(5), np.ones((3, 5)), b), b)
        rng = SeededRng(3)
        W, bias, batch = rng.normal(1.0, (3, 5)), rng.normal(1.0, 3), rng.normal(1.0, (2, 5))
        np.testing.assert_allclose(head.embed_forward(batch, W, bias), batch @ W.T + bias, rtol = 1e-14)
        self.assertRaises(DimensionError, head.embed_forward, np.zeros(4), W, bias)

class ArcMarginCase(unittest.TestCase):
    """ TestCase for the arcmargin loss """

    def test_config(self):
        """ Tests the configuration checks """
        self.assertRaises(ConfigError, ArcMarginConfig, s = 0)
        self.assertRaises(ConfigError, ArcMarginConfig, m = -0.1)
        self.assertRaises(ConfigError, ArcMarginConfig, m = math.pi / 2)

    def test_margin_free_is_softmax(self):
        """ Tests that m=0, s=1 is plain cross entropy over the cosines """
        rng = SeededRng(4)
        E, W, labels = rng.normal(1.0, (3, 4)), rng.normal(1.0, (5, 4)), np.array([0, 3, 4])
        loss, logits, cache = head.arcmargin_loss(E, labels, W, ArcMarginConfig(s = 1.0, m = 0.0))
        cos = (E / np.linalg.norm(E, axis = 1, keepdims = True)) @ (W / np.linalg.norm(W, axis = 1, keepdims = True)).T
        np.testing.assert_allclose(logits, cos, atol = 1e-12)
        softmax = np.exp(cos) / np.exp(cos).sum(axis = 1, keepdims = True)
        expected = -np.mean(np.log(softmax[np.arange(3), labels]))
        self.assertAlmostEqual(loss, expected, places = 12)
        onehot = np.eye(5)[labels]
        np.testing.assert_allclose(head.logits_grad(cache), softmax - onehot, atol = 1e-12)

    def test_confident_example(self):
        """ Tests the K=2 example with a clamped target cosine """
        loss, logits, _ = head.arcmargin_loss(np.array([[1.0, 0.0]]), np.array([0]), np.eye(2), ArcMarginConfig(s = 30.0, m = 0.15))
        self.assertAlmostEqual(logits[0, 0], 30 * math.cos(0.15), delta = 0.01)
        self.assertAlmostEqual(logits[0, 1], 0.0, places = 12)
        self.assertAlmostEqual(loss, math.log1p(math.exp(-logits[0, 0])), delta = 1e-15)
        self.assertAlmostEqual(loss, 1.3e-13, delta = 0.1e-13)

    def test_fallback_branch(self):
        """ Tests the hard-case fallback at cos = -1 + eps """
        cfg = ArcMarginConfig(s = 30.0, m = 0.35)
        _, logits, cache = head.arcmargin_loss(np.array([[1.0, 0.0]]), np.array([0]), np.array([[-1.0, 0.0], [0.0, 1.0]]), cfg)
        self.assertFalse(cache.easy[0])
        self.assertAlmostEqual(logits[0, 0], 30 * ((-1 + cfg.cos_clamp_eps) - 0.35 * math.sin(0.35)), places = 9)

    def test_fallback_switch(self):
        """ Tests that the target logit jumps by at most s*m^2 where the fallback takes over """
        for m in (0.15, 0.25, 0.35):
            cfg = ArcMarginConfig(s = 30.0, m = m)
            switch = math.pi - m
            targets = []
            for angle in (switch - 1e-6, switch + 1e-6):
                E = np.array([[math.cos(angle), math.sin(angle)]])
                _, logits, cache = head.arcmargin_loss(E, np.array([0]), np.array([[1.0, 0.0], [0.0, 1.0]]), cfg)
                targets.append(logits[0, 0])
            self.assertLessEqual(abs(targets[0] - targets[1]), cfg.s * m * m)

    def test_margin_monotonicity(self):
        """ Tests that the loss does not decrease as the margin grows along the schedule """
        for seed in range(10):
            rng = SeededRng(seed, "margin")
            E, W, labels = rng.normal(1.0, (4, 8)), rng.normal(1.0, (5, 8)), rng.integers(0, 5, 4)
            losses = [head.arcmargin_loss(E, labels, W, ArcMarginConfig(s = 30.0, m = m))[0] for m in (0.15, 0.25, 0.35)]
            for lower, upper in zip(losses, losses[1:]):
                self.assertGreaterEqual(upper, lower - 1e-12)

    def test_row_scale_invariance(self):
        """ Tests that scaling a classifier row leaves cosines, logits and loss unchanged """
        rng = SeededRng(6)
        E, W, labels = rng.normal(1.0, (4, 8)), rng.normal(1.0, (5, 8)), rng.integers(0, 5, 4)
        cfg = ArcMarginConfig()
        loss, logits, _ = head.arcmargin_loss(E, labels, W, cfg)
        scaled = W.copy()
        scaled[2] *= 7.5
        scaled_loss, scaled_logits, _ = head.arcmargin_loss(E, labels, scaled, cfg)
        np.testing.assert_allclose(scaled_logits, logits, atol = 1e-6)
        self.assertAlmostEqual(scaled_loss, loss, delta = 1e-6)

    def test_errors(self):
        """ Tests label and shape checks """
        E, W = np.ones((2, 3)), np.ones((4, 3))
        self.assertRaises(DataError, head.arcmargin_loss, E, np.array([0, 4]), W, ArcMarginConfig())
        self.assertRaises(DataError, head.arcmargin_loss, E, np.array([-1, 0]), W, ArcMarginConfig())
        self.assertRaises(DimensionError, head.arcmargin_loss, E, np.array([0]), W, ArcMarginConfig())
        self.assertRaises(DimensionError, head.arcmargin_loss, np.ones((2, 5)), np.array([0, 1]), W, ArcMarginConfig())

class GradientCase(unittest.TestCase):
    """ TestCase comparing every analytic gradient of the head with central differences """

    def assertGradientClose(self, analytic, numeric, name):
        error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-6)
        self.assertLess(error, 1e-4, f"{name}: relative error {error}")

    def check_instance(self, params, features, labels, cfg):
        _, _, cache = head.head_forward(params, features, labels, cfg)
        grads = head.head_backward(cache, labels)
        for name in ("gem_p", "W_emb", "b_emb", "W_cls"):
            numeric = central_diff_grad(lambda x: head.head_forward(with_tensor(params, name, x), features, labels, cfg)[0],
                                        getattr(params, name))
            self.assertGradientClose(getattr(grads, name), numeric, name)
        E = cache.arc.E
        numeric_E = central_diff_grad(lambda x: head.arcmargin_loss(x, labels, params.W_cls, cfg)[0], E)
        self.assertGradientClose(grads.E, numeric_E, "E")
        return cache

    def test_random_instances(self):
        """ Tests 20 random instances (C=16, D=8, K=5, batch 4) """
        for seed in range(20):
            with self.subTest(seed = seed):
                cache = self.check_instance(*random_instance(seed))
                ## Keep away from the fallback switch, where the target logit is not differentiable
                cos_target = cache.arc.cos[np.arange(N), cache.labels]
                self.assertTrue(np.all(np.abs(cos_target - math.cos(math.pi - 0.15)) > 1e-3))

    def test_fallback_instances(self):
        """ Tests instances whose first sample takes the hard-case fallback """
        for seed, margin in [(100, 0.15), (101, 0.25), (102, 0.35)]:
            with self.subTest(seed = seed):
                cache = self.check_instance(*random_instance(seed, margin = margin, hard = True))
                self.assertFalse(cache.arc.easy[0])

    def test_gap_pooling(self):
        """ Tests that average pooling gives gem_p no gradient and the other gradients stay exact """
        params, features, labels, cfg = random_instance(7)
        _, _, cache = head.head_forward(params, features, labels, cfg, pooling = "gap")
        grads = head.head_backward(cache, labels)
        self.assertEqual(float(grads.gem_p[0]), 0.0)
        numeric = central_diff_grad(lambda x: head.head_forward(with_tensor(params, "W_emb", x), features, labels, cfg, pooling = "gap")[0],
                                    params.W_emb)
        self.assertGradientClose(grads.W_emb, numeric, "W_emb")

    def test_duplicate_samples(self):
        """ Tests that a duplicated sample gets identical per-sample gradients """
        params, features, labels, cfg = random_instance(8)
        features[1] = features[0]
        labels[1] = labels[0]
        _, _, cache = head.head_forward(params, features, labels, cfg)
        grads = head.head_backward(cache, labels)
        np.testing.assert_allclose(grads.E[0], grads.E[1], rtol = 1e-12, atol = 1e-15)

    def test_stale_cache(self):
        """ Tests that a cache is refused after the parameters change, and with other labels """
        params, features, labels, cfg = random_instance(9)
        _, _, cache = head.head_forward(params, features, labels, cfg)
        self.assertRaises(UsageError, head.head_backward, cache, (labels + 1) % K)
        params.version += 1
        self.assertRaises(UsageError, head.head_backward, cache, labels)

class DescriptorCase(unittest.TestCase):
    """ TestCase for extract_descriptor """

    @classmethod
    def setUpClass(cls):
        cls.model = types.SimpleNamespace(backbone = init_backbone(1, channels = 16),
                                          head = head.init_head(2, channels = 16, embedding_dim = 8, classes = 3))
        cls.img = SeededRng(3).uniform(-0.5, 0.5, (3, 32, 32)).astype(np.float32)

    def test_unit_norm(self):
        """ Tests the norm, the dtype and determinism """
        for pooling in ("gem", "gap"):
            descriptor = head.extract_descriptor(self.model, self.img, pooling)
            self.assertEqual(descriptor.shape, (8,))
            self.assertEqual(descriptor.dtype, np.float32)
            self.assertAlmostEqual(float(np.linalg.norm(descriptor.astype(np.float64))), 1.0, delta = 1e-6)
            self.assertEqual(descriptor.tobytes(), head.extract_descriptor(self.model, self.img, pooling).tobytes())

    def test_scale_invariance(self):
        """ Tests that scaling W_emb (with zero bias) leaves the descriptor unchanged """
        scaled_head = self.model.head.copy()
        scaled_head.W_emb = (scaled_head.W_emb * 4.0).astype(np.float32)
        scaled = types.SimpleNamespace(backbone = self.model.backbone, head = scaled_head)
        np.testing.assert_allclose(head.extract_descriptor(scaled, self.img), head.extract_descriptor(self.model, self.img), atol = 1e-6)

    def test_init_head(self):
        """ Tests the shapes and checks of init_head """
        params = self.model.head
        self.assertEqual((params.gem_p.shape, params.W_emb.shape, params.b_emb.shape, params.W_cls.shape), ((1,), (8, 16), (8,), (3, 8)))
        self.assertEqual(params.p, 3.0)
        self.assertRaises(ConfigError, head.init_head, 1, 16, 8, 1)
        self.assertRaises(ConfigError, head.init_head, 1, 16, 8, 3, gem_p = 0.5)

if __name__ == "__main__":
    unittest.main()
