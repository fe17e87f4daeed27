""" ArcGemRetrieval.backbone

    The frozen feature extractor: every P x P patch (stride S) of an image is flattened, projected by a fixed
        random matrix and passed through a ReLU. The projection is drawn from a seed and never trained.
"""

import dataclasses

import numpy as np

from ArcGemRetrieval.errors import ConfigError, DimensionError
from ArcGemRetrieval.numerics import STORAGE_DTYPE, SeededRng

@dataclasses.dataclass(frozen = True, eq = False)
class BackboneParams():
    """ Patch side P, stride S, output channels C, the seed and the (C x 3*P*P) read-only projection """
    patch: int
    stride: int
    channels: int
    seed: int
    projection: np.ndarray

    def output_side(self, side):
        """ Spatial side H' of the feature map for an input of side B: floor((B - P) / S) + 1 """
        return (side - self.patch) // self.stride + 1

def init_backbone(seed, patch = 8, stride = 8, channels = 64):
    """ Draws a backbone whose projection entries are i.i.d. N(0, 1 / (3 * P * P))

        :raises ConfigError: Unless P >= 1, 1 <= S <= P and C >= 1
    """
    if patch < 1 or not 1 <= stride <= patch or channels < 1:
        raise ConfigError(f"Invalid backbone dimensions P={patch} S={stride} C={channels}", key = "backbone")
    fan_in = 3 * patch * patch
    projection = SeededRng(seed, "backbone/projection").normal(np.sqrt(1.0 / fan_in), (channels, fan_in)).astype(STORAGE_DTYPE)
    projection.setflags(write = False)
    return BackboneParams(patch = patch, stride = stride, channels = channels, seed = int(seed), projection = projection)

def extract_features(bp, img):
    """ Computes the (C x H' x W') nonnegative feature map of a (3 x B x B) image

        :type bp: BackboneParams

        :raises DimensionError: If the image is smaller than a patch or does not have 3 channels
    """
    img = np.asarray(img, dtype = STORAGE_DTYPE)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"Expected a (3, B, B) image, got shape {img.shape}")
    if min(img.shape[1:]) < bp.patch:
        raise DimensionError(f"Image of shape {img.shape} is smaller than the {bp.patch}x{bp.patch} patch")
    ## windows: (1, H', W', 3, P, P) -> one flattened patch per location in channel-major order
    windows = np.lib.stride_tricks.sliding_window_view(img, (3, bp.patch, bp.patch))[:, ::bp.stride, ::bp.stride]
    height, width = windows.shape[1:3]
    patches = windows.reshape(height * width, -1)
    features = np.maximum(patches @ bp.projection.T, 0.0)
    return np.ascontiguousarray(features.T.reshape(bp.channels, height, width), dtype = STORAGE_DTYPE)
