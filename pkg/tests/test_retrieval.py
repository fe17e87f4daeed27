import math
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from ArcGemRetrieval import retrieval, trainer
from ArcGemRetrieval.backbone import init_backbone
from ArcGemRetrieval.errors import AlignmentError, DataError, DimensionError, EvaluationError, InputError
from ArcGemRetrieval.head import init_head
from ArcGemRetrieval.imaging import DatasetManifest, PreprocessConfig, synth_dataset
from ArcGemRetrieval.numerics import SeededRng, l2_normalize_rows
from ArcGemRetrieval.retrieval import DescriptorSet, QueryScore, RetrievalResult

def random_set(seed, rows, dim, prefix = "i", normalized = True):
    vectors = SeededRng(seed, "descriptors").normal(1.0, (rows, dim))
    if normalized: vectors = l2_normalize_rows(vectors)
    return DescriptorSet([f"{prefix}{i:04d}" for i in range(rows)], vectors, normalized, f"random{seed}")

def oracle_search(queries, index, k):
    """ Quadratic scan: score every pair, then sort by (-score, id) """
    results = []
    for qi, query_id in enumerate(queries.ids):
        scored = []
        for ii, index_id in enumerate(index.ids):
            score = math.fsum(float(a) * float(b) for a, b in zip(queries.vectors[qi], index.vectors[ii]))
            scored.append((-score, index_id))
        results.append([index_id for _, index_id in sorted(scored)[:k]])
    return results

def oracle_ap(ranked_ids, relevant, k):
    hits = np.array([_id in relevant for _id in ranked_ids[:k]], dtype = np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(np.sum(precision * hits)) / min(len(relevant), k)

class DescriptorSetCase(unittest.TestCase):
    """ TestCase for DescriptorSet validation """

    def test_valid(self):
        """ Tests the dtype, the length and the dimension """
        descriptors = random_set(1, 5, 3)
        self.assertEqual(len(descriptors), 5)
        self.assertEqual(descriptors.dim, 3)
        self.assertEqual(descriptors.vectors.dtype, np.float32)

    def test_invalid(self):
        """ Tests duplicate ids, row count mismatches and unnormalized rows flagged normalized """
        self.assertRaises(DataError, DescriptorSet, ["a", "a"], np.eye(2), True, "x")
        self.assertRaises(DimensionError, DescriptorSet, ["a", "b", "c"], np.eye(2), True, "x")
        self.assertRaises(DataError, DescriptorSet, ["a", "b"], 2 * np.eye(2), True, "x")
        DescriptorSet(["a", "b"], 2 * np.eye(2), False, "x")
        DescriptorSet(["a", "a"], np.eye(2), True, "x", validate = False)

class BuildCase(unittest.TestCase):
    """ TestCase for build_descriptor_set """

    @classmethod
    def setUpClass(cls):
        cls.manifest, cls.protos = synth_dataset(3, classes = 3, train_per_class = 1, index_per_class = 2, query_per_class = 1,
                                                 distractor_classes = 1)
        backbone = init_backbone(1, channels = 8)
        cls.checkpoint = trainer.init_checkpoint(backbone, init_head(2, 8, 6, 3), PreprocessConfig())

    def test_descriptors(self):
        """ Tests manifest order, unit norms, the dimension and determinism """
        descriptors = retrieval.build_descriptor_set(self.checkpoint, self.manifest, "index", 32, protos = self.protos)
        self.assertEqual(descriptors.ids, tuple(row.id for row in self.manifest.split("index")))
        self.assertEqual(descriptors.dim, 6)
        self.assertTrue(descriptors.normalized)
        np.testing.assert_allclose(np.linalg.norm(descriptors.vectors.astype(np.float64), axis = 1), 1.0, atol = 1e-4)
        again = retrieval.build_descriptor_set(self.checkpoint, self.manifest, "index", 32, protos = self.protos)
        self.assertEqual(again.vectors.tobytes(), descriptors.vectors.tobytes())

    def test_preprocessed_images(self):
        """ Tests that passing preprocessed images gives the same descriptors, and a wrong count is refused """
        images = retrieval.preprocess_split(self.manifest, "query", 32, self.checkpoint.preprocess, self.protos)
        direct = retrieval.build_descriptor_set(self.checkpoint, self.manifest, "query", 32, protos = self.protos)
        cached = retrieval.build_descriptor_set(self.checkpoint, self.manifest, "query", 32, images = images)
        self.assertEqual(cached.vectors.tobytes(), direct.vectors.tobytes())
        self.assertRaises(DataError, retrieval.build_descriptor_set, self.checkpoint, self.manifest, "query", 32, images = images[:-1])

    def test_empty_split(self):
        """ Tests that a split without rows is refused, with or without preprocessed images """
        manifest = DatasetManifest([row for row in self.manifest.rows if row.split != "query"], self.manifest.dataset_seed)
        self.assertRaises(DataError, retrieval.build_descriptor_set, self.checkpoint, manifest, "query", 32, protos = self.protos)
        self.assertRaises(DataError, retrieval.build_descriptor_set, self.checkpoint, manifest, "query", 32, images = [])

class EnsembleCase(unittest.TestCase):
    """ TestCase for ensemble_concat """

    def test_concat(self):
        """ Tests the dimension, the sqrt(2) norms, the cleared flag and the tag """
        ensemble = retrieval.ensemble_concat(random_set(1, 6, 4), random_set(2, 6, 4))
        self.assertEqual(ensemble.dim, 8)
        self.assertFalse(ensemble.normalized)
        self.assertEqual(ensemble.model_tag, "concat(random1|random2)")
        np.testing.assert_allclose(np.linalg.norm(ensemble.vectors.astype(np.float64), axis = 1), math.sqrt(2), atol = 1e-4)
        np.testing.assert_allclose(np.linalg.norm(ensemble.vectors[:, :4].astype(np.float64), axis = 1), 1.0, atol = 1e-4)

    def test_alignment(self):
        """ Tests that diverging ids name the first divergence """
        first = random_set(1, 4, 3)
        second = DescriptorSet(["i0000", "i0001", "x", "i0003"], first.vectors, True, "other")
        with self.assertRaises(AlignmentError) as ctx:
            retrieval.ensemble_concat(first, second)
        self.assertEqual(ctx.exception.position, 2)
        with self.assertRaises(AlignmentError) as ctx:
            retrieval.ensemble_concat(first, random_set(1, 3, 3))
        self.assertEqual(ctx.exception.position, 3)
        self.assertRaises(DataError, retrieval.ensemble_concat, first, random_set(3, 4, 3, normalized = False))

    def test_self_ensemble_ranking(self):
        """ Tests that an ensemble of a set with itself ranks like the set alone """
        queries, index = random_set(1, 5, 6, "q"), random_set(2, 30, 6)
        single = retrieval.search_topk(queries, index, 10)
        doubled = retrieval.search_topk(retrieval.ensemble_concat(queries, queries), retrieval.ensemble_concat(index, index), 10)
        self.assertEqual([r.ranked_ids for r in doubled], [r.ranked_ids for r in single])

    def test_symmetry(self):
        """ Tests that swapping the two models keeps the rankings """
        q1, q2 = random_set(1, 5, 4, "q"), random_set(2, 5, 4, "q")
        i1, i2 = random_set(3, 25, 4), random_set(4, 25, 4)
        forward = retrieval.search_topk(retrieval.ensemble_concat(q1, q2), retrieval.ensemble_concat(i1, i2), 10)
        backward = retrieval.search_topk(retrieval.ensemble_concat(q2, q1), retrieval.ensemble_concat(i2, i1), 10)
        self.assertEqual([r.ranked_ids for r in forward], [r.ranked_ids for r in backward])

class SearchCase(unittest.TestCase):
    """ TestCase for search_topk """

    def test_self_match(self):
        """ Tests that a query found in the index ranks first with its squared norm as score """
        index = random_set(1, 20, 5)
        queries = DescriptorSet(["q"], index.vectors[7:8], True, "q")
        result = retrieval.search_topk(queries, index, 5)[0]
        self.assertEqual(result.query_id, "q")
        self.assertEqual(result.ranked_ids[0], "i0007")
        self.assertAlmostEqual(result.ranked[0][1], float(np.sum(index.vectors[7].astype(np.float64)**2)), places = 12)
        self.assertEqual(len(result.ranked), 5)

    def test_ties(self):
        """ Tests that equal scores are ordered by ascending index id """
        index = DescriptorSet(["c", "a", "b", "d"], [[0, 1, 0], [0, 0, 1], [0, 1, 0], [1, 0, 0]], True, "index")
        queries = DescriptorSet(["q"], [[1, 0, 0]], True, "q")
        result = retrieval.search_topk(queries, index, 10)[0]
        self.assertEqual(result.ranked_ids, ["d", "a", "b", "c"])
        self.assertEqual([score for _, score in result.ranked], [1.0, 0.0, 0.0, 0.0])

    def test_errors(self):
        """ Tests dimension mismatches and k < 1 """
        self.assertRaises(DimensionError, retrieval.search_topk, random_set(1, 2, 3), random_set(2, 4, 4))
        self.assertRaises(InputError, retrieval.search_topk, random_set(1, 2, 3), random_set(2, 4, 3), 0)

    def test_oracle(self):
        """ Tests 100 random instances, plus a 500-row index, against the quadratic scan """
        sizes = SeededRng(4, "oracle sizes")
        instances = [(int(sizes.integers(1, 9)), int(sizes.integers(1, 61)), int(sizes.integers(1, 9)), int(sizes.integers(1, 101)))
                     for _ in range(100)]
        for seed, (queries, index, dim, k) in enumerate(instances + [(5, 500, 6, 20)]):
            query_set, index_set = random_set(seed, queries, dim, "q"), random_set(seed + 1000, index, dim)
            results = retrieval.search_topk(query_set, index_set, k)
            self.assertEqual([r.ranked_ids for r in results], oracle_search(query_set, index_set, k), seed)
            for result in results:
                self.assertEqual(len(result.ranked), min(k, index))
                scores = [score for _, score in result.ranked]
                self.assertEqual(scores, sorted(scores, reverse = True))

    def test_scale_invariance(self):
        """ Tests that scaling a source descriptor before normalization changes no ranking """
        raw = SeededRng(5).normal(1.0, (40, 6))
        queries = random_set(6, 4, 6, "q")
        base = DescriptorSet([f"i{i:04d}" for i in range(40)], l2_normalize_rows(raw), True, "base")
        raw[3] *= 17.0
        raw[11] *= 0.05
        scaled = DescriptorSet(base.ids, l2_normalize_rows(raw), True, "scaled")
        self.assertEqual([r.ranked_ids for r in retrieval.search_topk(queries, scaled, 40)],
                         [r.ranked_ids for r in retrieval.search_topk(queries, base, 40)])

class MetricCase(unittest.TestCase):
    """ TestCase for ap_at_k, map_at_100 and the leaderboard split """

    def test_ap_examples(self):
        """ Tests perfect retrieval, the 5/6 example and the zero cases """
        self.assertEqual(retrieval.ap_at_k(["a", "b"], {"a"}), 1.0)
        self.assertAlmostEqual(retrieval.ap_at_k(["a", "x", "b", "y"], {"a", "b"}), 5 / 6, places = 15)
        self.assertEqual(retrieval.ap_at_k(["x", "y"], {"a"}), 0.0)
        self.assertEqual(retrieval.ap_at_k(["a"], set()), 0.0)
        ## Relevant items past k do not count; the denominator is min(m, k)
        self.assertEqual(retrieval.ap_at_k(["a", "b", "c"], {"a", "c"}, k = 1), 1.0)
        self.assertRaises(InputError, retrieval.ap_at_k, ["a", "a"], {"a"})
        self.assertRaises(InputError, retrieval.ap_at_k, ["a"], {"a"}, k = 0)

    @settings(max_examples = 100, deadline = None)
    @given(st.permutations(range(12)), st.sets(st.integers(min_value = 0, max_value = 11), min_size = 1), st.integers(min_value = 1, max_value = 12))
    def test_ap_bounds_and_monotone(self, order, relevant, k):
        """ Tests that AP stays in [0, 1] and never drops when a relevant item moves up """
        ranked = [str(i) for i in order]
        relevant = {str(i) for i in relevant}
        ap = retrieval.ap_at_k(ranked, relevant, k)
        self.assertGreaterEqual(ap, 0.0)
        self.assertLessEqual(ap, 1.0)
        for position in range(1, len(ranked)):
            if ranked[position] in relevant and ranked[position - 1] not in relevant:
                moved = list(ranked)
                moved[position - 1], moved[position] = moved[position], moved[position - 1]
                self.assertGreaterEqual(retrieval.ap_at_k(moved, relevant, k), ap - 1e-15)

    def test_map_examples(self):
        """ Tests the 0.75 mean, skipped queries and the error cases """
        results = [RetrievalResult("q1", [("a", 0.9)]), RetrievalResult("q2", [("x", 0.9), ("b", 0.8)]),
                   RetrievalResult("q3", [("a", 0.1)])]
        report = retrieval.map_at_100(results, {"q1": {"a"}, "q2": {"b"}, "q3": set()})
        self.assertEqual(report.map_at_100, 0.75)
        self.assertEqual(report.skipped_queries, 1)
        self.assertEqual([score.query_id for score in report.per_query], ["q1", "q2", "q3"])
        self.assertTrue(math.isnan(report.public_map))

        with self.assertRaises(EvaluationError) as ctx:
            retrieval.map_at_100(results, {"q1": set(), "q2": set(), "q3": set()})
        self.assertIn("no scorable queries", str(ctx.exception))
        with self.assertRaises(EvaluationError) as ctx:
            retrieval.map_at_100(results, {"q1": {"a"}, "q2": {"b"}})
        self.assertIn("q3", str(ctx.exception))

    def test_map_oracle(self):
        """ Tests 100 random instances of 10 queries against 120 index items with an independent AP """
        for seed in range(100):
            rng = SeededRng(seed, "map")
            queries, index = random_set(seed, 10, 8, "q"), random_set(seed + 1000, 120, 8)
            ## The first query always has a relevant item so that every instance is scorable
            ground_truth = {query_id: {index.ids[j] for j in rng.integers(0, 120, int(rng.integers(0 if i else 1, 6)))}
                            for i, query_id in enumerate(queries.ids)}
            results = retrieval.search_topk(queries, index, 100)
            report = retrieval.map_at_100(results, ground_truth)
            expected = [oracle_ap(result.ranked_ids, ground_truth[result.query_id], 100) for result in results
                        if ground_truth[result.query_id]]
            self.assertEqual(report.skipped_queries, 10 - len(expected))
            self.assertAlmostEqual(report.map_at_100, float(np.mean(expected)), delta = 1e-12)

    def test_leaderboard_split(self):
        """ Tests that the split is deterministic, respects the fraction and scores both halves """
        ids = [f"q{i:04d}" for i in range(200)]
        public = retrieval.leaderboard_split(ids, 7)
        self.assertEqual(public, retrieval.leaderboard_split(ids, 7))
        self.assertNotEqual(public, retrieval.leaderboard_split(ids, 8))
        self.assertTrue(60 < len(public) < 140)
        self.assertEqual(retrieval.leaderboard_split(ids, 7, 0.0), frozenset())
        self.assertEqual(retrieval.leaderboard_split(ids, 7, 1.0), frozenset(ids))
        self.assertRaises(InputError, retrieval.leaderboard_split, ids, 7, 1.5)

        scores = [QueryScore("q0", 1.0, 1), QueryScore("q1", 0.5, 2), QueryScore("q2", 0.0, 0)]
        report = retrieval.EvalReport.from_scores(scores, public_ids = {"q0"})
        self.assertEqual((report.map_at_100, report.public_map, report.private_map), (0.75, 1.0, 0.5))

if __name__ == "__main__":
    unittest.main()
