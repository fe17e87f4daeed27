""" ArcGemRetrieval.numerics

    Dense tensor helpers, the seeded random number streams, and the central difference oracle
        every gradient test relies on.

    Tensors are numpy arrays. Model and descriptor data is stored as float32 (STORAGE_DTYPE);
        gradient computations and checks run in float64 (COMPUTE_DTYPE).
"""

import numpy as np
from ArcGemRetrieval.constants import *
from ArcGemRetrieval.errors import DimensionError, OracleError
from ArcGemRetrieval.utils import stream_key

STORAGE_DTYPE = np.float32
COMPUTE_DTYPE = np.float64

def as_tensor(data, dtype = STORAGE_DTYPE):
    """ Converts data to a C-contiguous numpy array of the requested dtype, checking that it is finite.

        :param data: Anything numpy can convert
        :param dtype: Target dtype, defaults to float32

        :raises DimensionError: If any dimension is zero-sized or the data contains NaN/Inf

        :rtype: numpy.ndarray
    """
    array = np.ascontiguousarray(data, dtype = dtype)
    if any(dim < 1 for dim in array.shape):
        raise DimensionError(f"Tensor dimensions must be positive, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise DimensionError("Tensor contains non-finite entries")
    return array

def matmul(a, b):
    """ Matrix product of a (m x k) and b (k x n).

        The reduction order is fixed by numpy's blocked kernel and is the same on every call
            with the same inputs, so repeated calls are bit-identical.

        :raises DimensionError: If a and b are not 2-D or their inner dimensions disagree
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"Cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b

def l2_normalize_rows(x, eps = L2_EPS):
    """ Divides each row of x by max(||row||, eps).

        Rows with norm above eps come out with unit norm; all-zero rows stay zero.

        :param x: A (n x d) tensor
        :param eps: Norm floor, defaults to 1e-12
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(COMPUTE_DTYPE)
    norms = np.sqrt(np.sum(np.square(x, dtype = COMPUTE_DTYPE), axis = -1, keepdims = True))
    return (x / np.maximum(norms, eps)).astype(x.dtype, copy = False)

def central_diff_grad(f, x, h = FD_STEP):
    """ Estimates the gradient of a scalar function by central differences, in float64.

        :param f: Scalar function of a tensor
        :type f: Callable[[numpy.ndarray], float]

        :param x: The point to differentiate at
        :param h: Step size, defaults to 1e-4

        :raises OracleError: If f is not finite at a perturbed point, naming the coordinate

        :return: A tensor shaped like x with (f(x+h*e_i) - f(x-h*e_i)) / 2h per coordinate
    """
    x = np.array(x, dtype = COMPUTE_DTYPE)
    grad = np.zeros_like(x)
    for index in np.ndindex(*x.shape):
        original = x[index]
        x[index] = original + h
        upper = float(f(x))
        x[index] = original - h
        lower = float(f(x))
        x[index] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise OracleError(f"Function is not finite around coordinate {index}", coordinate = index)
        grad[index] = (upper - lower) / (2 * h)
    return grad

class SeededRng():
    """ A reproducible random stream identified by (seed, stream).

        The stream is a Philox counter-based generator keyed with a 128-bit digest of the seed and
            the stream label, so the same pair yields the same sequence on every run and platform,
            and sub-streams never overlap with their parent.

        :param seed: 64-bit integer seed
        :type seed: int

        :param stream: Sub-stream label, defaults to "root"
        :type stream: str
    """
    def __init__(self, seed, stream = "root"):
        self.seed = int(seed)
        self.stream = str(stream)
        key = stream_key(self.seed, self.stream)
        self._generator = np.random.Generator(np.random.Philox(key = key))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream!r})"

    def child(self, label):
        """ Returns the independent sub-stream "<stream>/<label>" of the same seed """
        return SeededRng(self.seed, f"{self.stream}/{label}")

    def uniform(self, low = 0.0, high = 1.0, size = None):
        return self._generator.uniform(low, high, size)

    def normal(self, scale = 1.0, size = None):
        return self._generator.normal(0.0, scale, size)

    def integers(self, low, high, size = None):
        """ Integers in [low, high) """
        return self._generator.integers(low, high, size = size, dtype = np.int64)

    def random(self):
        return float(self._generator.random())

    def permutation(self, n):
        return self._generator.permutation(n)

    def derive_seed(self):
        """ Draws a fresh 63-bit seed, used to hand out per-item seeds """
        return int(self._generator.integers(0, 2**63 - 1, dtype = np.int64))
