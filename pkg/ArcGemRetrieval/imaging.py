""" ArcGemRetrieval.imaging

    The synthetic landmark dataset and the train/test image preprocessing.

    Each landmark class is a smooth field of sinusoids on the unit square (a ProtoSpec). Images are rendered
        from a class field under a seeded similarity transform plus pixel noise, so any resolution can be
        rendered from the same underlying scene. Rendered images are never stored: a manifest row's seed is
        enough to regenerate them.

    Preprocessing follows the usual recipe: at train time a random crop, a random horizontal flip and channel
        mean subtraction; at test time resize to A = round(B / 0.9201), center crop to B and mean subtraction.
"""

import dataclasses
import logging
import math
import typing

import numpy as np
import PIL.Image

from ArcGemRetrieval.constants import *
from ArcGemRetrieval.errors import AugmentationError, ConfigError, CropError, DataError, ResolutionError
from ArcGemRetrieval.numerics import STORAGE_DTYPE, SeededRng
from ArcGemRetrieval.utils import round_half_up

logger = logging.getLogger(__name__)

@dataclasses.dataclass(frozen = True, eq = False)
class ProtoSpec():
    """ The continuous image field of one landmark class.

        components has shape (3, PROTO_COMPONENTS, 4): per channel and term, (amplitude, frequency, orientation, phase).
    """
    class_id: int
    components: np.ndarray

    def field(self, u, v):
        """ Evaluates the class field at coordinates u (column) and v (row) of equal shape; returns (3, *u.shape) in [0, 1] """
        amplitude, frequency, orientation, phase = (self.components[..., i][..., None, None] for i in range(4))
        projection = u[None, None] * np.cos(orientation) + v[None, None] * np.sin(orientation)
        waves = amplitude * np.sin(2 * np.pi * frequency * projection + phase)
        ## Unit-variance sum per channel, centered on mid-gray
        spread = np.sqrt(np.maximum(np.sum(self.components[..., 0]**2, axis = 1) / 2, 1e-12))
        values = 0.5 + 0.25 * waves.sum(axis = 1) / spread[:, None, None]
        return np.clip(values, 0.0, 1.0)

@dataclasses.dataclass(frozen = True)
class RenderSettings():
    noise_sigma: float = 0.05
    scale_range: typing.Tuple[float, float] = (0.8, 1.25)
    rotation_degrees: float = 15.0
    translation: float = 0.1

@dataclasses.dataclass
class ImageSample():
    id: str
    label: int
    pixels: np.ndarray
    split: str

@dataclasses.dataclass(frozen = True)
class ManifestRow():
    id: str
    label: int
    split: str
    seed: int

@dataclasses.dataclass
class DatasetManifest():
    """ The rows of a synthetic dataset.

        Labels are dense 0..K-1 over the train split. Distractor classes use labels K and above and only
            appear in the index split.
    """
    rows: typing.List[ManifestRow]
    dataset_seed: int

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.id in seen:
                raise DataError(f"Duplicate manifest id: {row.id}")
            if row.split not in SPLITS:
                raise DataError(f"Unknown split '{row.split}' for {row.id}")
            seen.add(row.id)
        train_labels = {row.label for row in self.split("train")}
        if train_labels and train_labels != set(range(len(train_labels))):
            raise DataError("Train labels must be dense 0..K-1")

    @property
    def class_count(self):
        return len({row.label for row in self.split("train")})

    @property
    def counts(self):
        """ Number of rows per split """
        return {split: len(self.split(split)) for split in SPLITS}

    def split(self, name):
        return [row for row in self.rows if row.split == name]

    def ground_truth(self):
        """ Maps every query id to the set of index ids sharing its label (possibly empty) """
        by_label = {}
        for row in self.split("index"):
            by_label.setdefault(row.label, set()).add(row.id)
        return {row.id: set(by_label.get(row.label, ())) for row in self.split("query")}

    def protos(self):
        """ Rebuilds the ProtoSpec of every label in the manifest """
        return {label: make_proto(self.dataset_seed, label) for label in sorted({row.label for row in self.rows})}

@dataclasses.dataclass(frozen = True)
class PreprocessConfig():
    crop_ratio: float = CROP_RATIO
    mean: typing.Tuple[float, float, float] = (0.0, 0.0, 0.0)
    train_resolution: int = 64
    test_resolution: int = 128

    def __post_init__(self):
        if not 0 < self.crop_ratio <= 1:
            raise ConfigError(f"crop_ratio must be in (0, 1], got {self.crop_ratio}", key = "preprocess.crop_ratio")
        if len(self.mean) != 3:
            raise ConfigError("mean must have one entry per channel")

    def resize_side(self, side):
        """ The side A an image is resized to before a center crop of side B: round(B / crop_ratio), halves up """
        return round_half_up(side / self.crop_ratio)

    def subtract_mean(self, img):
        return (img - np.asarray(self.mean, dtype = img.dtype)[:, None, None]).astype(STORAGE_DTYPE, copy = False)

def make_proto(dataset_seed, class_id):
    """ Draws the field of class_id; fully determined by (dataset_seed, class_id) """
    rng = SeededRng(dataset_seed, f"proto/{class_id}")
    shape = (3, PROTO_COMPONENTS)
    components = np.stack([
        rng.uniform(0.0, 1.0, shape),
        rng.uniform(*FREQUENCY_RANGE, shape),
        rng.uniform(0.0, np.pi, shape),
        rng.uniform(0.0, 2 * np.pi, shape),
        ], axis = -1)
    components.setflags(write = False)
    return ProtoSpec(class_id = int(class_id), components = components)

def synth_dataset(dataset_seed, classes, train_per_class, index_per_class, query_per_class, distractor_classes = 0):
    """ Generates the manifest of a synthetic landmark dataset.

        Trained classes get exactly the requested number of rows per split. Distractor classes get
            index_per_class index rows each and never appear in train or query.

        :param dataset_seed: Seed of the whole dataset
        :param classes: Number of trained classes K (at least 2)

        :raises ConfigError: If classes < 2 or any count is negative

        :return: The manifest and the ProtoSpec of every label
        :rtype: Tuple[DatasetManifest, Dict[int, ProtoSpec]]
    """
    if classes < 2:
        raise ConfigError(f"At least 2 classes are required, got {classes}", key = "dataset.classes")
    for name, count in [("train_per_class", train_per_class), ("index_per_class", index_per_class),
                        ("query_per_class", query_per_class), ("distractor_classes", distractor_classes)]:
        if count < 0:
            raise ConfigError(f"{name} must be >= 0, got {count}", key = f"dataset.{name}")

    def row(split, label, i, prefix = "c"):
        _id = f"{split}-{prefix}{label:04d}-{i:03d}"
        return ManifestRow(_id, label, split, SeededRng(dataset_seed, f"instance/{_id}").derive_seed())

    rows = [row("train", label, i) for label in range(classes) for i in range(train_per_class)]
    rows += [row("index", label, i) for label in range(classes) for i in range(index_per_class)]
    rows += [row("index", label, i, prefix = "d") for label in range(classes, classes + distractor_classes)
                                                    for i in range(index_per_class)]
    rows += [row("query", label, i) for label in range(classes) for i in range(query_per_class)]

    manifest = DatasetManifest(rows, dataset_seed)
    logger.info("Synthesized dataset seed=%d classes=%d distractors=%d counts=%s", dataset_seed, classes, distractor_classes, manifest.counts)
    return manifest, manifest.protos()

def render_instance(proto, instance_seed, resolution, settings = None, transform = True):
    """ Renders one image of a class field.

        The similarity transform (scale, rotation about the center, translation) is drawn from the instance seed
            alone, so the same seed renders the same scene at every resolution. Pixel noise is drawn per resolution.

        :param proto: The class field
        :type proto: ProtoSpec

        :param instance_seed: Seed of this instance
        :param resolution: Side R of the square render (at least 16)

        :param settings: Noise and transform ranges, defaults to RenderSettings()
        :type settings: RenderSettings, optional

        :param transform: Whether to apply the random similarity transform, defaults to True
        :type transform: bool

        :raises ResolutionError: If resolution < 16

        :return: A (3, R, R) float32 tensor in [0, 1]
    """
    if resolution < MIN_RENDER_SIDE:
        raise ResolutionError(f"Render resolution must be at least {MIN_RENDER_SIDE}, got {resolution}")
    if settings is None: settings = RenderSettings()

    centers = (np.arange(resolution, dtype = np.float64) + 0.5) / resolution
    u, v = np.meshgrid(centers, centers)
    if transform:
        rng = SeededRng(instance_seed, "transform")
        scale = rng.uniform(*settings.scale_range)
        angle = math.radians(rng.uniform(-settings.rotation_degrees, settings.rotation_degrees))
        tx, ty = rng.uniform(-settings.translation, settings.translation, 2)
        ## Invert p = c + t + s*R(angle)*(q - c) to find the scene point q behind each pixel p
        du, dv = (u - 0.5 - tx) / scale, (v - 0.5 - ty) / scale
        cos, sin = math.cos(angle), math.sin(angle)
        u, v = 0.5 + cos * du + sin * dv, 0.5 - sin * du + cos * dv

    pixels = proto.field(u, v)
    if settings.noise_sigma > 0:
        pixels = pixels + SeededRng(instance_seed, f"noise/{resolution}").normal(settings.noise_sigma, pixels.shape)
    return np.clip(pixels, 0.0, 1.0).astype(STORAGE_DTYPE)

def render_row(row, protos, resolution, settings = None):
    """ Renders the image behind a manifest row

        :rtype: ImageSample
    """
    pixels = render_instance(protos[row.label], row.seed, resolution, settings = settings)
    return ImageSample(id = row.id, label = row.label, pixels = pixels, split = row.split)

def bilinear_resize(img, side):
    """ Resizes a (3, H, W) image to (3, side, side) with bilinear interpolation on half-pixel centers.

        Each channel is resampled as a 32-bit float PIL image. When shrinking, PIL widens the bilinear
            (triangle) kernel to the scale factor, so every output is still a convex combination of source pixels.

        :raises ResolutionError: If side < 1
    """
    if side < 1:
        raise ResolutionError(f"Resize target must be at least 1, got {side}")
    img = np.asarray(img, dtype = STORAGE_DTYPE)
    if img.shape[1:] == (side, side):
        return img.copy()
    channels = []
    for channel in img:
        resized = PIL.Image.fromarray(np.ascontiguousarray(channel)).resize((side, side), PIL.Image.BILINEAR)
        channels.append(np.asarray(resized, dtype = STORAGE_DTYPE))
    return np.stack(channels)

def center_crop(img, side):
    """ Crops the centered (side x side) window; the top-left offset is floor((A - side) / 2) on both axes

        :raises CropError: If side exceeds the image
    """
    height, width = img.shape[1:]
    if side > height or side > width or side < 1:
        raise CropError(f"Cannot crop {side}x{side} from {height}x{width}")
    top, left = (height - side) // 2, (width - side) // 2
    return img[:, top:top + side, left:left + side].copy()

def test_preprocess(img, side, cfg):
    """ Test-time preprocessing: resize to A = round(side / crop_ratio), center crop to side, subtract the channel mean.

        No randomness is involved.

        :raises ResolutionError: If side < 16
    """
    if side < MIN_RENDER_SIDE:
        raise ResolutionError(f"Test side must be at least {MIN_RENDER_SIDE}, got {side}")
    resized = bilinear_resize(img, cfg.resize_side(side))
    return cfg.subtract_mean(center_crop(resized, side))

def train_augment(img, side, rng, cfg):
    """ Train-time augmentation: a random side x side crop, a horizontal flip with probability 0.5, channel mean subtraction.

        :param rng: The stream deciding crop position and flip
        :type rng: SeededRng

        :raises AugmentationError: If the source is smaller than side
    """
    height, width = img.shape[1:]
    if height < side or width < side:
        raise AugmentationError(f"Cannot crop {side}x{side} from a {height}x{width} source")
    top = int(rng.integers(0, height - side + 1))
    left = int(rng.integers(0, width - side + 1))
    crop = img[:, top:top + side, left:left + side]
    if rng.random() < 0.5:
        crop = crop[:, :, ::-1]
    return cfg.subtract_mean(np.ascontiguousarray(crop))

def compute_channel_mean(manifest, protos, resolution, settings = None):
    """ Mean of every channel over the train split rendered at resolution

        :rtype: Tuple[float, float, float]
    """
    rows = manifest.split("train")
    if not rows:
        raise DataError("Cannot compute a channel mean over an empty train split")
    total = np.zeros(3, dtype = np.float64)
    for row in rows:
        total += render_row(row, protos, resolution, settings).pixels.mean(axis = (1, 2), dtype = np.float64)
    mean = total / len(rows)
    logger.info("Channel mean over %d train renders at %d: %s", len(rows), resolution, np.round(mean, 6).tolist())
    return tuple(float(value) for value in mean)
