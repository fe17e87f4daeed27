""" ArcGemRetrieval.head

    The trainable head: GeM pooling, the embedding layer and the additive angular margin (arcmargin) loss,
        with their gradients derived by hand.

    Forward, for a batch of feature maps F (N x C x H x W):
        v = gem_pool(F, p)                       per-channel generalized mean, p = 1 is average pooling
        e = W_emb v + b_emb                      embedding
        cos_j = <e / |e|, w_j / |w_j|>           clamped to [-1 + eps, 1 - eps]
        target logit = s cos(theta_y + m)        when theta_y + m < pi, else s (cos theta_y - m sin m)
        other logits = s cos_j
        loss = mean softmax cross-entropy

    All computations run in float64 whatever the storage dtype of the parameters.
"""

import dataclasses
import logging
import math

import numpy as np

from ArcGemRetrieval.backbone import extract_features
from ArcGemRetrieval.constants import *
from ArcGemRetrieval.errors import ConfigError, DataError, DimensionError, DomainError, UsageError
from ArcGemRetrieval.numerics import COMPUTE_DTYPE, STORAGE_DTYPE, SeededRng, l2_normalize_rows

logger = logging.getLogger(__name__)

@dataclasses.dataclass(eq = False)
class HeadParams():
    """ Trainable state of the head.

        gem_p has shape (1,); W_emb is (D x C); b_emb is (D,); W_cls is (K x D).
        version is bumped by every in-place update so that forward caches can detect they are stale.
    """
    gem_p: np.ndarray
    W_emb: np.ndarray
    b_emb: np.ndarray
    W_cls: np.ndarray
    version: int = 0

    @property
    def p(self):
        return float(self.gem_p[0])

    @property
    def channels(self):
        return self.W_emb.shape[1]

    @property
    def embedding_dim(self):
        return self.W_emb.shape[0]

    @property
    def class_count(self):
        return self.W_cls.shape[0]

    def tensors(self):
        """ The trainable tensors by name, in a fixed order """
        return {name: getattr(self, name) for name in HEAD_TENSORS}

    def copy(self):
        return HeadParams(**{name: tensor.copy() for name, tensor in self.tensors().items()}, version = self.version)

    def astype(self, dtype):
        return HeadParams(**{name: tensor.astype(dtype) for name, tensor in self.tensors().items()}, version = self.version)

@dataclasses.dataclass(frozen = True)
class ArcMarginConfig():
    s: float = 30.0
    m: float = 0.15
    cos_clamp_eps: float = COS_CLAMP_EPS

    def __post_init__(self):
        if not self.s > 0:
            raise ConfigError(f"Arcmargin scale must be positive, got {self.s}", key = "arcmargin.scale")
        if not 0 <= self.m < math.pi / 2:
            raise ConfigError(f"Arcmargin margin must be in [0, pi/2), got {self.m}", key = "arcmargin.margins")
        if not 0 < self.cos_clamp_eps < 1:
            raise ConfigError(f"cos_eps must be in (0, 1), got {self.cos_clamp_eps}", key = "arcmargin.cos_eps")

@dataclasses.dataclass(eq = False)
class ArcMarginCache():
    E: np.ndarray
    W_cls: np.ndarray
    e_norm: np.ndarray
    e_hat: np.ndarray
    w_norm: np.ndarray
    w_hat: np.ndarray
    cos: np.ndarray
    unclamped: np.ndarray
    easy: np.ndarray
    sin_target: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    cfg: ArcMarginConfig

@dataclasses.dataclass(eq = False)
class ForwardCache():
    """ Everything head_backward needs, tied to one forward call on one version of the parameters """
    params: HeadParams
    version: int
    pooling: str
    p: float
    features: np.ndarray
    pooled: np.ndarray
    arc: ArcMarginCache

    @property
    def labels(self):
        return self.arc.labels

@dataclasses.dataclass(eq = False)
class HeadGradients():
    gem_p: np.ndarray
    W_emb: np.ndarray
    b_emb: np.ndarray
    W_cls: np.ndarray
    E: np.ndarray

    def tensors(self):
        return {name: getattr(self, name) for name in HEAD_TENSORS}

def init_head(seed, channels, embedding_dim, classes, gem_p = 3.0, dtype = STORAGE_DTYPE):
    """ Draws a fresh head: W_emb ~ N(0, 1/C), b_emb = 0, W_cls ~ N(0, 1/D)

        :raises ConfigError: For non-positive sizes or gem_p outside [1, 12]
    """
    if channels < 1 or embedding_dim < 1 or classes < 2:
        raise ConfigError(f"Invalid head sizes C={channels} D={embedding_dim} K={classes}", key = "head")
    if not GEM_P_RANGE[0] <= gem_p <= GEM_P_RANGE[1]:
        raise ConfigError(f"gem_p must be in {list(GEM_P_RANGE)}, got {gem_p}", key = "head.gem_p")
    rng = SeededRng(seed, "head")
    return HeadParams(
        gem_p = np.array([gem_p], dtype = dtype),
        W_emb = rng.child("W_emb").normal(np.sqrt(1.0 / channels), (embedding_dim, channels)).astype(dtype),
        b_emb = np.zeros(embedding_dim, dtype = dtype),
        W_cls = rng.child("W_cls").normal(np.sqrt(1.0 / embedding_dim), (classes, embedding_dim)).astype(dtype),
        )

def _flatten_spatial(F):
    F = np.asarray(F, dtype = COMPUTE_DTYPE)
    if F.ndim < 3:
        raise DimensionError(f"Expected a (C, H, W) or (N, C, H, W) feature map, got shape {F.shape}")
    return F.reshape(F.shape[:-2] + (-1,))

def gem_pool(F, p):
    """ Generalized mean over the spatial positions of every channel: ((1/|X|) sum x^p)^(1/p)

        Works on a single (C, H, W) map or a (N, C, H, W) batch.

        :raises DomainError: If F has negative entries or p < 1
    """
    x = _flatten_spatial(F)
    if p < 1:
        raise DomainError(f"GeM exponent must be >= 1, got {p}")
    if np.any(x < 0):
        raise DomainError("GeM pooling requires nonnegative features")
    return np.mean(x**p, axis = -1)**(1.0 / p)

def gem_pool_grad(F, p, upstream):
    """ Gradients of sum(upstream * gem_pool(F, p)) with respect to F and p.

        d out/dx = (1/|X|) x^(p-1) out^(1-p)
        d out/dp = out (-ln(M) / p^2 + mean(x^p ln x) / (p M)), with M = mean(x^p)
        Channels whose output is 0 get a zero subgradient.

        :return: dF shaped like F and the scalar dp
        :rtype: Tuple[numpy.ndarray, float]
    """
    shape = np.shape(F)
    x = _flatten_spatial(F)
    upstream = np.asarray(upstream, dtype = COMPUTE_DTYPE)
    powered = x**p
    M = np.mean(powered, axis = -1)
    out = M**(1.0 / p)
    active = out > 0
    safe_out = np.where(active, out, 1.0)
    safe_M = np.where(active, M, 1.0)

    dx = (x**(p - 1)) * (safe_out**(1 - p))[..., None] / x.shape[-1]
    dF = np.where(active[..., None], dx * upstream[..., None], 0.0).reshape(shape)

    with np.errstate(divide = "ignore", invalid = "ignore"):
        x_log_x = np.where(x > 0, powered * np.log(np.where(x > 0, x, 1.0)), 0.0)
    dout_dp = safe_out * (-np.log(safe_M) / p**2 + np.mean(x_log_x, axis = -1) / (p * safe_M))
    dp = float(np.sum(np.where(active, dout_dp, 0.0) * upstream))
    return dF, dp

def embed_forward(v, W_emb, b_emb):
    """ e = W_emb v + b_emb for a (C,) vector or a (N, C) batch

        :raises DimensionError: If the shapes do not agree
    """
    v = np.asarray(v, dtype = COMPUTE_DTYPE)
    W_emb, b_emb = np.asarray(W_emb, dtype = COMPUTE_DTYPE), np.asarray(b_emb, dtype = COMPUTE_DTYPE)
    if W_emb.ndim != 2 or v.shape[-1] != W_emb.shape[1] or b_emb.shape != (W_emb.shape[0],):
        raise DimensionError(f"Cannot embed shape {v.shape} with W_emb {W_emb.shape} and b_emb {b_emb.shape}")
    return v @ W_emb.T + b_emb

def _normalize(x):
    norm = np.sqrt(np.sum(x * x, axis = 1, keepdims = True))
    return norm, x / np.maximum(norm, L2_EPS)

def _normalize_backward(norm, x_hat, d_hat):
    """ Backpropagates through x_hat = x / max(|x|, eps): (I - x_hat x_hat^T) / |x| above the floor, 1/eps below it """
    projected = d_hat - x_hat * np.sum(x_hat * d_hat, axis = 1, keepdims = True)
    return np.where(norm > L2_EPS, projected / np.maximum(norm, L2_EPS), d_hat / L2_EPS)

def arcmargin_loss(E, labels, W_cls, cfg):
    """ Mean arcmargin loss of a batch of embeddings.

        :param E: (N x D) embeddings
        :param labels: N class labels in [0, K)
        :param W_cls: (K x D) classifier weights
        :type cfg: ArcMarginConfig

        :raises DataError: If a label is out of range
        :raises DimensionError: If the shapes do not agree

        :return: the loss, the (N x K) logits and the cache for arcmargin_backward
        :rtype: Tuple[float, numpy.ndarray, ArcMarginCache]
    """
    E = np.asarray(E, dtype = COMPUTE_DTYPE)
    W_cls = np.asarray(W_cls, dtype = COMPUTE_DTYPE)
    labels = np.asarray(labels, dtype = np.int64).reshape(-1)
    if E.ndim != 2 or W_cls.ndim != 2 or E.shape[1] != W_cls.shape[1] or E.shape[0] != labels.shape[0] or E.shape[0] < 1:
        raise DimensionError(f"Cannot score embeddings {E.shape} with labels {labels.shape} against W_cls {W_cls.shape}")
    classes = W_cls.shape[0]
    if np.any(labels < 0) or np.any(labels >= classes):
        raise DataError(f"Labels must be in [0, {classes}), got {labels[(labels < 0) | (labels >= classes)].tolist()}")

    s, m, eps = cfg.s, cfg.m, cfg.cos_clamp_eps
    rows = np.arange(E.shape[0])
    e_norm, e_hat = _normalize(E)
    w_norm, w_hat = _normalize(W_cls)
    raw = e_hat @ w_hat.T
    cos = np.clip(raw, -1 + eps, 1 - eps)
    unclamped = (raw > -1 + eps) & (raw < 1 - eps)

    cos_target = cos[rows, labels]
    sin_target = np.sqrt(1 - cos_target**2)
    ## theta + m stays below pi only while cos(theta) > cos(pi - m)
    easy = cos_target > math.cos(math.pi - m)
    target = np.where(easy, cos_target * math.cos(m) - sin_target * math.sin(m), cos_target - m * math.sin(m))

    logits = s * cos
    logits[rows, labels] = s * target
    shifted = logits - logits.max(axis = 1, keepdims = True)
    exp = np.exp(shifted)
    total = exp.sum(axis = 1)
    probs = exp / total[:, None]
    losses = np.log(total) - shifted[rows, labels]
    loss = float(np.mean(losses))

    cache = ArcMarginCache(E = E, W_cls = W_cls, e_norm = e_norm, e_hat = e_hat, w_norm = w_norm, w_hat = w_hat,
                           cos = cos, unclamped = unclamped, easy = easy, sin_target = sin_target, probs = probs,
                           labels = labels, cfg = cfg)
    return loss, logits, cache

def logits_grad(cache):
    """ Per-sample gradient of the cross-entropy with respect to the logits: softmax - one_hot """
    grad = cache.probs.copy()
    grad[np.arange(grad.shape[0]), cache.labels] -= 1.0
    return grad

def arcmargin_backward(cache):
    """ Gradients of the mean arcmargin loss with respect to E and W_cls

        :type cache: ArcMarginCache

        :rtype: Tuple[numpy.ndarray, numpy.ndarray]
    """
    s, m = cache.cfg.s, cache.cfg.m
    rows = np.arange(cache.E.shape[0])
    dlogits = logits_grad(cache) / cache.E.shape[0]

    dcos = s * dlogits
    cos_target = cache.cos[rows, cache.labels]
    dtarget = np.where(cache.easy, math.cos(m) + math.sin(m) * cos_target / cache.sin_target, 1.0)
    dcos[rows, cache.labels] *= dtarget
    dcos = np.where(cache.unclamped, dcos, 0.0)

    de_hat = dcos @ cache.w_hat
    dw_hat = dcos.T @ cache.e_hat
    dE = _normalize_backward(cache.e_norm, cache.e_hat, de_hat)
    dW_cls = _normalize_backward(cache.w_norm, cache.w_hat, dw_hat)
    return dE, dW_cls

def head_forward(params, features, labels, cfg, pooling = "gem"):
    """ Runs pooling, embedding and the arcmargin loss on a batch of (N x C x H x W) feature maps

        :param pooling: "gem" uses params.gem_p, "gap" pools with p = 1
        :type pooling: str

        :return: the loss, the logits and the cache for head_backward
        :rtype: Tuple[float, numpy.ndarray, ForwardCache]
    """
    if pooling not in POOLINGS:
        raise ConfigError(f"Unknown pooling '{pooling}'", key = "pooling")
    features = np.asarray(features, dtype = COMPUTE_DTYPE)
    if features.ndim != 4 or features.shape[1] != params.channels:
        raise DimensionError(f"Expected (N, {params.channels}, H, W) features, got shape {features.shape}")
    p = params.p if pooling == "gem" else 1.0
    pooled = gem_pool(features, p)
    E = embed_forward(pooled, params.W_emb, params.b_emb)
    loss, logits, arc = arcmargin_loss(E, labels, params.W_cls, cfg)
    cache = ForwardCache(params = params, version = params.version, pooling = pooling, p = p,
                         features = features, pooled = pooled, arc = arc)
    return loss, logits, cache

def head_backward(cache, labels):
    """ Exact gradients of the mean loss of a head_forward call

        :raises UsageError: If the parameters changed since the forward call, or labels differ from the forward labels

        :rtype: HeadGradients
    """
    if cache.version != cache.params.version:
        raise UsageError(f"Stale forward cache: computed at parameter version {cache.version}, parameters are at {cache.params.version}")
    if not np.array_equal(np.asarray(labels).reshape(-1), cache.labels):
        raise UsageError("Labels do not match the labels of the forward call")

    dE, dW_cls = arcmargin_backward(cache.arc)
    W_emb = np.asarray(cache.params.W_emb, dtype = COMPUTE_DTYPE)
    dW_emb = dE.T @ cache.pooled
    db_emb = dE.sum(axis = 0)
    dp = 0.0
    if cache.pooling == "gem":
        _, dp = gem_pool_grad(cache.features, cache.p, dE @ W_emb)
    return HeadGradients(gem_p = np.array([dp]), W_emb = dW_emb, b_emb = db_emb, W_cls = dW_cls, E = dE)

def extract_descriptor(model, img, pooling = "gem"):
    """ The L2-normalized embedding of one preprocessed (3 x B x B) image

        :param model: Anything with backbone (BackboneParams) and head (HeadParams) attributes

        :return: A unit-norm float32 vector of length D
    """
    if pooling not in POOLINGS:
        raise ConfigError(f"Unknown pooling '{pooling}'", key = "pooling")
    features = extract_features(model.backbone, img)
    pooled = gem_pool(features, model.head.p if pooling == "gem" else 1.0)
    e = embed_forward(pooled, model.head.W_emb, model.head.b_emb)
    return l2_normalize_rows(e[None, :])[0].astype(STORAGE_DTYPE)
