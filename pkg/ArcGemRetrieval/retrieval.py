""" ArcGemRetrieval.retrieval

    Descriptor extraction over a dataset split, the two-model ensemble, exact top-k search and the mAP@100
        evaluation used by the reports.
"""

import dataclasses
import functools
import logging
import math
import typing

import numpy as np

from ArcGemRetrieval.constants import *
from ArcGemRetrieval.errors import AlignmentError, DataError, DimensionError, EvaluationError, InputError
from ArcGemRetrieval.head import extract_descriptor
from ArcGemRetrieval.imaging import render_instance, test_preprocess
from ArcGemRetrieval.multiprocessing import parallel_map
from ArcGemRetrieval.numerics import COMPUTE_DTYPE, STORAGE_DTYPE, l2_normalize_rows
from ArcGemRetrieval.utils import stream_key

logger = logging.getLogger(__name__)

@dataclasses.dataclass(eq = False)
class DescriptorSet():
    """ One descriptor per image, in a fixed id order.

        :param ids: Unique ids, one per row
        :param vectors: (N x D) float32 descriptors
        :param normalized: Whether every row has unit norm (checked on construction)
        :param model_tag: Where the descriptors come from
        :param validate: Check uniqueness of the ids and the norms, defaults to True

        :raises DimensionError: If there is not exactly one row per id
        :raises DataError: On duplicate ids or a normalized set with non-unit rows
    """
    ids: typing.Tuple[str, ...]
    vectors: np.ndarray
    normalized: bool
    model_tag: str
    validate: dataclasses.InitVar[bool] = True

    def __post_init__(self, validate):
        self.ids = tuple(self.ids)
        self.vectors = np.ascontiguousarray(self.vectors, dtype = STORAGE_DTYPE)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise DimensionError(f"{len(self.ids)} ids for descriptors of shape {self.vectors.shape}")
        if not validate: return
        if len(set(self.ids)) != len(self.ids):
            raise DataError(f"Duplicate ids in descriptor set '{self.model_tag}'")
        if self.normalized and len(self.ids):
            norms = np.linalg.norm(self.vectors.astype(COMPUTE_DTYPE), axis = 1)
            if np.any(np.abs(norms - 1) > NORM_TOLERANCE):
                raise DataError(f"Descriptor set '{self.model_tag}' is flagged normalized but has row norms in [{norms.min()}, {norms.max()}]")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.vectors.shape[1]

class RetrievalResult(typing.NamedTuple):
    """ The ranked (index_id, score) pairs of one query, best first """
    query_id: str
    ranked: typing.List[typing.Tuple[str, float]]

    @property
    def ranked_ids(self):
        return [index_id for index_id, _ in self.ranked]

class QueryScore(typing.NamedTuple):
    query_id: str
    ap: float
    relevant_count: int

@dataclasses.dataclass
class EvalReport():
    """ mAP@k over the scorable queries (those with at least one relevant index item).

        public_map and private_map score the two halves of the leaderboard split; NaN when the split was
            not requested or a half has no scorable query.
    """
    map_at_100: float
    per_query: typing.List[QueryScore]
    skipped_queries: int
    public_map: float = math.nan
    private_map: float = math.nan
    k: int = DEFAULT_K

    @classmethod
    def from_scores(cls, scores, k = DEFAULT_K, public_ids = None):
        """ Averages the per-query scores, skipping queries without relevant items

            :raises EvaluationError: If no query is scorable
        """
        def mean(subset):
            values = [score.ap for score in subset if score.relevant_count > 0]
            return math.fsum(values) / len(values) if values else math.nan
        scores = list(scores)
        overall = mean(scores)
        if math.isnan(overall):
            raise EvaluationError("no scorable queries")
        report = cls(map_at_100 = overall, per_query = scores,
                     skipped_queries = sum(score.relevant_count == 0 for score in scores), k = k)
        if public_ids is not None:
            report.public_map = mean([score for score in scores if score.query_id in public_ids])
            report.private_map = mean([score for score in scores if score.query_id not in public_ids])
        return report

## Extraction

def _render_test_image(preprocess, settings, side, task):
    row, proto = task
    return test_preprocess(render_instance(proto, row.seed, side, settings), side, preprocess)

def preprocess_split(manifest, split, side, preprocess, protos = None, settings = None, processes = 1):
    """ Renders every image of a split at side and applies test preprocessing, in manifest order

        :raises DataError: If the split is empty
    """
    if not (rows := manifest.split(split)):
        raise DataError(f"The '{split}' split is empty")
    if protos is None: protos = manifest.protos()
    tasks = [(row, protos[row.label]) for row in rows]
    return parallel_map(functools.partial(_render_test_image, preprocess, settings, side), tasks, processes)

def _describe(model, pooling, img):
    return extract_descriptor(model, img, pooling)

def build_descriptor_set(checkpoint, manifest, split, test_resolution, pooling = "gem", protos = None, settings = None,
                         processes = 1, model_tag = None, images = None):
    """ Extracts the descriptor of every image in a split: render at B_test, test preprocessing, extract_descriptor.

        :type checkpoint: Checkpoint
        :type manifest: DatasetManifest
        :param split: "index" or "query" (any split works)
        :param test_resolution: B_test

        :param images: Already preprocessed images of the split, in manifest order (they must have been
                        preprocessed with checkpoint.preprocess at test_resolution)
        :type images: List[numpy.ndarray], optional

        :raises DataError: If the split is empty or the images do not match its rows

        :return: A normalized DescriptorSet with rows in manifest order
        :rtype: DescriptorSet
    """
    ids = tuple(row.id for row in manifest.split(split))
    if not ids:
        raise DataError(f"The '{split}' split is empty")
    if images is None:
        images = preprocess_split(manifest, split, test_resolution, checkpoint.preprocess, protos, settings, processes)
    if len(images) != len(ids):
        raise DataError(f"{len(images)} images for the {len(ids)} rows of the '{split}' split")
    vectors = parallel_map(functools.partial(_describe, checkpoint, pooling), images, processes)
    tag = model_tag or f"{split}@{test_resolution}"
    return DescriptorSet(ids = ids, vectors = np.stack(vectors), normalized = True, model_tag = tag)

def ensemble_concat(d1, d2):
    """ L2-normalizes both sets row-wise and concatenates them: D = D1 + D2 and every row has norm sqrt(2).

        The result is not renormalized, so a dot product of two ensemble rows is the sum of the per-model cosines.

        :raises AlignmentError: If the id sequences differ, naming the first divergence
        :raises DataError: If an input is not normalized
    """
    if d1.ids != d2.ids:
        position = next((i for i, (a, b) in enumerate(zip(d1.ids, d2.ids)) if a != b), min(len(d1), len(d2)))
        first = d1.ids[position] if position < len(d1) else "<end>"
        second = d2.ids[position] if position < len(d2) else "<end>"
        raise AlignmentError(f"Descriptor ids diverge at position {position}: '{first}' vs '{second}'", position = position)
    for descriptors in (d1, d2):
        if not descriptors.normalized:
            raise DataError(f"Descriptor set '{descriptors.model_tag}' is not normalized")
    vectors = np.concatenate([l2_normalize_rows(d1.vectors), l2_normalize_rows(d2.vectors)], axis = 1)
    return DescriptorSet(ids = d1.ids, vectors = vectors, normalized = False,
                         model_tag = f"concat({d1.model_tag}|{d2.model_tag})")

## Search and evaluation

def search_topk(queries, index, k = DEFAULT_K):
    """ Exact dot-product search: the k best index rows for every query, ties broken by ascending index id.

        Scores are computed in float64. k is capped at the index size.

        :raises DimensionError: If the descriptor dimensions differ
        :raises InputError: If k < 1

        :rtype: List[RetrievalResult]
    """
    if queries.dim != index.dim:
        raise DimensionError(f"Query dimension {queries.dim} does not match index dimension {index.dim}")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    k = min(k, len(index))
    scores = queries.vectors.astype(COMPUTE_DTYPE) @ index.vectors.astype(COMPUTE_DTYPE).T
    ## Position of every index id in ascending id order
    id_rank = np.empty(len(index), dtype = np.int64)
    id_rank[sorted(range(len(index)), key = index.ids.__getitem__)] = np.arange(len(index))

    results = []
    for row, query_id in enumerate(queries.ids):
        order = np.lexsort((id_rank, -scores[row]))[:k]
        results.append(RetrievalResult(query_id, [(index.ids[j], float(scores[row, j])) for j in order]))
    return results

def ap_at_k(ranked_ids, relevant, k = DEFAULT_K):
    """ Average precision truncated at k: (1 / min(m, k)) * sum of precision@i over the relevant hits in the top k,
            with m = |relevant|; 0 when m = 0

        :raises InputError: If ranked_ids has duplicates or k < 1
    """
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    ranked_ids = list(ranked_ids)
    if len(set(ranked_ids)) != len(ranked_ids):
        raise InputError("Ranked ids must be distinct")
    if not relevant:
        return 0.0
    hits, total = 0, 0.0
    for position, _id in enumerate(ranked_ids[:k], start = 1):
        if _id in relevant:
            hits += 1
            total += hits / position
    return total / min(len(relevant), k)

def leaderboard_split(query_ids, seed, public_fraction = 0.5):
    """ The public half of a deterministic public/private split of the queries, by a seeded hash of each id """
    if not 0 <= public_fraction <= 1:
        raise InputError(f"public_fraction must be in [0, 1], got {public_fraction}")
    return frozenset(_id for _id in query_ids if stream_key(seed, f"leaderboard/{_id}") / 2**128 < public_fraction)

def map_at_100(results, ground_truth, k = DEFAULT_K, public_ids = None):
    """ Mean AP@k over the queries that have at least one relevant index item

        :param results: Output of search_topk
        :param ground_truth: Maps every query id to the set of relevant index ids

        :param public_ids: Query ids of the public leaderboard half; when given the report also scores both halves
        :type public_ids: Collection[str], optional

        :raises EvaluationError: If a query has no ground truth, or no query is scorable

        :rtype: EvalReport
    """
    scores = []
    for result in results:
        if result.query_id not in ground_truth:
            raise EvaluationError(f"No ground truth for query '{result.query_id}'")
        relevant = ground_truth[result.query_id]
        scores.append(QueryScore(result.query_id, ap_at_k(result.ranked_ids, relevant, k), len(relevant)))
    report = EvalReport.from_scores(scores, k = k, public_ids = public_ids)
    logger.info("mAP@%d=%.6f over %d queries (%d skipped)", k, report.map_at_100, len(scores) - report.skipped_queries, report.skipped_queries)
    return report
