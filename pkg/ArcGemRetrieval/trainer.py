""" ArcGemRetrieval.trainer

    Staged training of the head on top of the frozen backbone.

    A Recipe is an ordered list of stages. A typical recipe trains a first stage at a small resolution with a
        high learning rate, then continues at a larger resolution with a lower one; a final "Fix" stage can
        finetune the head at the test resolution with test-time preprocessing.

    Every random choice of a stage (shuffling, crop positions, flips) is drawn from a sub-stream of the
        stage's SeededRng keyed by epoch and image id, so a run is reproducible to the last bit whether the
        per-image work runs in one process or many.
"""

import dataclasses
import functools
import logging
import math
import typing

import numpy as np

from ArcGemRetrieval.backbone import BackboneParams, extract_features
from ArcGemRetrieval.constants import *
from ArcGemRetrieval.errors import ArcGemError, ConfigError, DataError, StageFailed, TrainingAborted, UsageError
from ArcGemRetrieval.head import ArcMarginConfig, HeadParams, head_backward, head_forward, init_head
from ArcGemRetrieval.imaging import PreprocessConfig, render_instance, test_preprocess, train_augment
from ArcGemRetrieval.multiprocessing import parallel_map
from ArcGemRetrieval.numerics import STORAGE_DTYPE, SeededRng
from ArcGemRetrieval.optim import RESOLUTION_BUMP, ScheduleState, SgdConfig, SgdState, sgd_step
from ArcGemRetrieval.utils import iter_batches

logger = logging.getLogger(__name__)

@dataclasses.dataclass(frozen = True)
class EpochRecord():
    """ One line of the training log: the mean loss of an epoch and the lr, margin and resolution it ran with """
    epoch: int
    loss: float
    lr: float
    margin: float
    resolution: int

@dataclasses.dataclass(frozen = True)
class StageConfig():
    """ One training stage.

        :param label: Name of the stage, used for its files (e.g. "A1")
        :param resolution: Training side B
        :param epochs: Number of epochs (at least 1); plateau events never end a stage early
        :param scheduler: "cosine" or "plateau_steps"
        :param lr0: Initial learning rate of the stage (0 trains nothing)
        :param margins: The margin schedule; cosine stages only use the first entry
        :param preprocessing: "train_augment" (random crop and flip) or "test_style" (resize and center crop)
        :param freeze_mask: Head tensors the stage must not update
        :param bump_resolution: Resolution to switch to when the plateau scheduler first decays, if any
        :param carry_schedule: Continue the previous stage's margin rung and lr (capped at lr0)
        :param plateau_signal: "train" (mean epoch loss) or "val" (mean loss over the query split)
    """
    label: str
    resolution: int
    epochs: int
    scheduler: str = "cosine"
    lr0: float = 0.01
    margins: typing.Tuple[float, ...] = (0.15,)
    scale: float = 30.0
    cos_clamp_eps: float = COS_CLAMP_EPS
    batch_size: int = 32
    preprocessing: str = "train_augment"
    freeze_mask: typing.FrozenSet[str] = frozenset()
    split: str = "train"
    pooling: str = "gem"
    sgd: SgdConfig = SgdConfig()
    patience: int = 2
    threshold: float = 1e-3
    decay_factor: float = 0.1
    plateau_signal: str = "train"
    bump_resolution: typing.Optional[int] = None
    carry_schedule: bool = False

    def __post_init__(self):
        object.__setattr__(self, "margins", tuple(float(m) for m in self.margins))
        object.__setattr__(self, "freeze_mask", frozenset(self.freeze_mask))
        if self.epochs < 1:
            raise ConfigError(f"Stage {self.label} needs at least one epoch, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"Batch size must be >= 1, got {self.batch_size}", key = "train.batch_size")
        if self.resolution < MIN_RENDER_SIDE:
            raise ConfigError(f"Stage {self.label} resolution must be at least {MIN_RENDER_SIDE}, got {self.resolution}")
        if self.lr0 < 0:
            raise ConfigError(f"Stage {self.label} learning rate must be >= 0, got {self.lr0}")
        if not self.margins:
            raise ConfigError(f"Stage {self.label} has an empty margin schedule")
        for name, value, allowed in [("scheduler", self.scheduler, SCHEDULERS), ("preprocessing", self.preprocessing, PREPROCESS_MODES),
                                     ("split", self.split, SPLITS), ("pooling", self.pooling, POOLINGS),
                                     ("plateau_signal", self.plateau_signal, PLATEAU_SIGNALS)]:
            if value not in allowed:
                raise ConfigError(f"Stage {self.label}: {name} must be one of {allowed}, got '{value}'")
        if (unknown := self.freeze_mask - set(HEAD_TENSORS)):
            raise ConfigError(f"Stage {self.label}: unknown tensors in freeze mask {sorted(unknown)}")
        if self.freeze_mask >= set(HEAD_TENSORS):
            raise ConfigError(f"Stage {self.label} freezes every tensor")
        if self.bump_resolution is not None and self.bump_resolution < self.resolution:
            raise ConfigError(f"Stage {self.label}: bump resolution {self.bump_resolution} is below {self.resolution}")

@dataclasses.dataclass(frozen = True)
class Recipe():
    """ An ordered list of stages trained from one head seed on one dataset """
    name: str
    stages: typing.Tuple[StageConfig, ...]
    seed: int
    dataset_seed: int

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ConfigError(f"Recipe {self.name} has no stages")
        resolutions = [stage.resolution for stage in self.stages]
        if any(later < earlier for earlier, later in zip(resolutions, resolutions[1:])):
            raise ConfigError(f"Recipe {self.name}: stage resolutions must be nondecreasing, got {resolutions}")

    @property
    def resolutions(self):
        return [stage.resolution for stage in self.stages]

@dataclasses.dataclass(eq = False)
class Checkpoint():
    """ Everything needed to resume training or to extract descriptors """
    backbone: BackboneParams
    head: HeadParams
    arcmargin: ArcMarginConfig
    sgd_state: SgdState
    schedule: typing.Optional[ScheduleState]
    log: typing.List[EpochRecord]
    preprocess: PreprocessConfig
    version: int = CHECKPOINT_VERSION

    def copy(self):
        return Checkpoint(backbone = self.backbone, head = self.head.copy(), arcmargin = self.arcmargin,
                          sgd_state = self.sgd_state.copy(),
                          schedule = dataclasses.replace(self.schedule) if self.schedule is not None else None,
                          log = list(self.log), preprocess = self.preprocess, version = self.version)

def init_checkpoint(backbone, head, preprocess, arcmargin = None):
    """ Wraps freshly initialized parameters in a Checkpoint with zero velocity and an empty log """
    return Checkpoint(backbone = backbone, head = head, arcmargin = arcmargin or ArcMarginConfig(),
                      sgd_state = SgdState.zeros_like(head), schedule = None, log = [], preprocess = preprocess)

## Per-image work, module level so that it can be sent to worker processes

def _render_source(settings, task):
    row, proto, side = task
    return render_instance(proto, row.seed, side, settings)

def _augmented_features(backbone, preprocess, side, task):
    source, rng = task
    return extract_features(backbone, train_augment(source, side, rng, preprocess))

def _test_style_features(backbone, preprocess, settings, side, task):
    row, proto = task
    return extract_features(backbone, test_preprocess(render_instance(proto, row.seed, side, settings), side, preprocess))

def stage_schedule(stage, previous = None):
    """ Builds the schedule of a stage, continuing the previous stage's margin rung and lr when carry_schedule is set """
    lr0, margin_index, decays = stage.lr0, 0, 0
    if stage.carry_schedule and previous is not None:
        lr0 = min(previous.lr, stage.lr0)
        margin_index = min(previous.margin_index, len(stage.margins) - 1)
        decays = previous.decays
    return ScheduleState(kind = stage.scheduler, lr0 = lr0, lr = lr0, total_epochs = stage.epochs,
                         margin_schedule = stage.margins, margin_index = margin_index,
                         patience = stage.patience, threshold = stage.threshold, decay_factor = stage.decay_factor,
                         resolution_bump_on_first_decay = stage.bump_resolution is not None, decays = decays)

class _StageData():
    """ Renders and caches what the epochs of one stage need """
    def __init__(self, checkpoint, stage, rows, protos, settings, processes):
        self.checkpoint, self.stage, self.rows = checkpoint, stage, rows
        self.protos, self.settings, self.processes = protos, settings, processes
        self._sources = {}
        self._features = {}

    def _sources_at(self, side):
        """ Train renders at A = round(side / crop_ratio), from which augmentation crops side x side windows """
        if side not in self._sources:
            self._sources.clear()
            source_side = self.checkpoint.preprocess.resize_side(side)
            tasks = [(row, self.protos[row.label], source_side) for row in self.rows]
            self._sources[side] = parallel_map(functools.partial(_render_source, self.settings), tasks, self.processes)
        return self._sources[side]

    def test_style_features(self, rows, side):
        key = (rows[0].split, side)
        if key not in self._features:
            tasks = [(row, self.protos[row.label]) for row in rows]
            work = functools.partial(_test_style_features, self.checkpoint.backbone, self.checkpoint.preprocess, self.settings, side)
            self._features[key] = np.stack(parallel_map(work, tasks, self.processes))
        return self._features[key]

    def epoch_features(self, order, side, rng, epoch):
        """ Feature maps of the rows in the given order, as (N, C, H', W') """
        if self.stage.preprocessing == "test_style":
            return self.test_style_features(self.rows, side)[order]
        sources = self._sources_at(side)
        tasks = [(sources[i], rng.child(f"augment/{epoch}/{self.rows[i].id}")) for i in order]
        work = functools.partial(_augmented_features, self.checkpoint.backbone, self.checkpoint.preprocess, side)
        return np.stack(parallel_map(work, tasks, self.processes))

def _mean_loss(head, features, labels, cfg, batch_size, pooling):
    total = 0.0
    for batch in iter_batches(np.arange(len(labels)), batch_size):
        loss, _, _ = head_forward(head, features[batch], labels[batch], cfg, pooling)
        total += loss * len(batch)
    return total / len(labels)

def run_stage(model, stage, manifest, rng, protos = None, settings = None, processes = 1):
    """ Trains the head of a checkpoint for one stage.

        Each epoch shuffles the split, prepares every image at the current resolution (train augmentation or
            test-style preprocessing), then runs forward, backward and an SGD step per batch with the lr and
            margin the schedule gives for that epoch. Schedule events are applied at the end of the epoch.

        :param model: The checkpoint to start from (left untouched)
        :type model: Checkpoint

        :type stage: StageConfig
        :type manifest: DatasetManifest

        :param rng: The stage's random stream
        :type rng: SeededRng

        :param protos: Class fields by label, defaults to manifest.protos()
        :param settings: Render settings, defaults to RenderSettings()
        :param processes: Worker processes for the per-image work, defaults to 1

        :raises DataError: If the split is empty or the head does not match the manifest's class count
        :raises TrainingAborted: On a non-finite batch loss

        :return: The trained checkpoint and the records of this stage's epochs
        :rtype: Tuple[Checkpoint, List[EpochRecord]]
    """
    checkpoint = model.copy()
    head = checkpoint.head
    if head.class_count != manifest.class_count:
        raise DataError(f"Head has {head.class_count} classes, the manifest has {manifest.class_count}")
    if not (rows := manifest.split(stage.split)):
        raise DataError(f"The '{stage.split}' split is empty")
    if protos is None: protos = manifest.protos()

    labels = np.array([row.label for row in rows], dtype = np.int64)
    freeze_mask = stage.freeze_mask | ({"gem_p"} if stage.pooling == "gap" else set())
    schedule = stage_schedule(stage, checkpoint.schedule)
    data = _StageData(checkpoint, stage, rows, protos, settings, processes)
    resolution = stage.resolution
    records = []
    logger.info("Stage %s: %d epochs on %d images at %d (%s, %s)", stage.label, stage.epochs, len(rows), resolution, stage.scheduler, stage.preprocessing)

    for _ in range(stage.epochs):
        epoch = len(checkpoint.log) + 1
        lr = schedule.begin_epoch()
        margin = schedule.margin
        cfg = ArcMarginConfig(s = stage.scale, m = margin, cos_clamp_eps = stage.cos_clamp_eps)

        order = rng.child(f"shuffle/{epoch}").permutation(len(rows))
        features = data.epoch_features(order, resolution, rng, epoch)
        total = 0.0
        for batch, positions in enumerate(iter_batches(np.arange(len(order)), stage.batch_size)):
            batch_labels = labels[order[positions]]
            loss, _, cache = head_forward(head, features[positions], batch_labels, cfg, stage.pooling)
            if not math.isfinite(loss):
                raise TrainingAborted(epoch, batch, loss)
            grads = head_backward(cache, batch_labels)
            sgd_step(head, grads, stage.sgd, checkpoint.sgd_state, lr, freeze_mask)
            total += loss * len(positions)
            logger.debug("epoch=%d batch=%d loss=%.6f", epoch, batch, loss)

        epoch_loss = total / len(rows)
        record = EpochRecord(epoch = epoch, loss = epoch_loss, lr = lr, margin = margin, resolution = resolution)
        records.append(record)
        checkpoint.log.append(record)
        logger.info("stage=%s epoch=%d loss=%.6f lr=%.6g margin=%.2f resolution=%d", stage.label, epoch, epoch_loss, lr, margin, resolution)

        signal = epoch_loss
        if stage.plateau_signal == "val" and stage.scheduler == "plateau_steps":
            if not (queries := manifest.split("query")):
                raise DataError("The validation plateau signal needs a non-empty query split")
            query_labels = np.array([row.label for row in queries], dtype = np.int64)
            signal = _mean_loss(head, data.test_style_features(queries, resolution), query_labels, cfg, stage.batch_size, stage.pooling)
            logger.info("stage=%s epoch=%d val_loss=%.6f", stage.label, epoch, signal)
        events = schedule.end_epoch(signal)
        if RESOLUTION_BUMP in events and stage.bump_resolution is not None and stage.bump_resolution != resolution:
            logger.info("Resolution bump: %d -> %d", resolution, stage.bump_resolution)
            resolution = stage.bump_resolution

    checkpoint.schedule = schedule
    checkpoint.arcmargin = ArcMarginConfig(s = stage.scale, m = schedule.margin, cos_clamp_eps = stage.cos_clamp_eps)
    return checkpoint, records

def run_recipe(recipe, manifest, backbone, preprocess, embedding_dim = 32, gem_p = 3.0, initial = None,
               protos = None, settings = None, processes = 1):
    """ Runs the stages of a recipe in order, each starting from the previous stage's checkpoint.

        :type recipe: Recipe
        :type manifest: DatasetManifest
        :type backbone: BackboneParams
        :type preprocess: PreprocessConfig

        :param embedding_dim: D of the head drawn from recipe.seed
        :param gem_p: Initial GeM exponent

        :param initial: Start from this checkpoint instead of a fresh head
        :type initial: Checkpoint, optional

        :raises StageFailed: Wrapping any error of a stage, with its index

        :return: One checkpoint per stage
        :rtype: List[Checkpoint]
    """
    if initial is None:
        head = init_head(recipe.seed, backbone.channels, embedding_dim, manifest.class_count, gem_p)
        first = recipe.stages[0]
        initial = init_checkpoint(backbone, head, preprocess, ArcMarginConfig(s = first.scale, m = first.margins[0], cos_clamp_eps = first.cos_clamp_eps))
    if protos is None: protos = manifest.protos()

    checkpoints, checkpoint = [], initial
    for index, stage in enumerate(recipe.stages):
        rng = SeededRng(recipe.seed, f"recipe/{recipe.name}/stage/{index}")
        try:
            checkpoint, _ = run_stage(checkpoint, stage, manifest, rng, protos = protos, settings = settings, processes = processes)
        except ArcGemError as e:
            raise StageFailed(index, e) from e
        checkpoints.append(checkpoint)
    return checkpoints

def fix_finetune(checkpoint, test_resolution, epochs, manifest, rng, lr_factor = 0.1, margin = None, batch_size = 32,
                 pooling = "gem", sgd = None, label = "fix", protos = None, settings = None, processes = 1):
    """ Finetunes the head at the test resolution with test-time preprocessing (resize to A = round(B / crop_ratio),
            center crop, no random crop or flip).

        Nothing is frozen in the head (the backbone is never trained). The learning rate is lr_factor times the
            lr of the checkpoint's last epoch, decayed by a cosine schedule; the margin is the checkpoint's final
            margin unless one is given. Scalars taken from the checkpoint are rounded to float32 so that a Fix
            from a checkpoint in memory matches a Fix from the same checkpoint loaded from disk.

        :type checkpoint: Checkpoint
        :param test_resolution: B_test
        :param epochs: Number of epochs; 0 returns an unchanged copy

        :raises UsageError: If the checkpoint has never been trained

        :rtype: Checkpoint
    """
    if epochs == 0:
        return checkpoint.copy()
    if checkpoint.schedule is None or not checkpoint.log:
        raise UsageError("Fix finetuning needs a checkpoint from a completed recipe")
    stored = lambda value: float(STORAGE_DTYPE(value))
    model = checkpoint.copy()
    model.preprocess = dataclasses.replace(model.preprocess, crop_ratio = stored(model.preprocess.crop_ratio),
                                           mean = tuple(stored(value) for value in model.preprocess.mean))
    stage = StageConfig(label = label, resolution = test_resolution, epochs = epochs, scheduler = "cosine",
                        lr0 = stored(checkpoint.schedule.lr) * lr_factor,
                        margins = (stored(checkpoint.arcmargin.m) if margin is None else margin,),
                        scale = stored(checkpoint.arcmargin.s), cos_clamp_eps = stored(checkpoint.arcmargin.cos_clamp_eps),
                        batch_size = batch_size, preprocessing = "test_style", pooling = pooling, sgd = sgd or SgdConfig())
    finetuned, _ = run_stage(model, stage, manifest, rng, protos = protos, settings = settings, processes = processes)
    return finetuned
