""" ArcGemRetrieval.optim

    SGD with momentum and coupled weight decay, the cosine learning rate schedule, and the plateau-triggered
        step decay that also advances the arcmargin margin.
"""

import dataclasses
import logging
import math
import typing

import numpy as np

from ArcGemRetrieval.constants import *
from ArcGemRetrieval.errors import ConfigError, OptimizerError, ScheduleError

logger = logging.getLogger(__name__)

LR_DECAYED = "lr_decayed"
MARGIN_ADVANCED = "margin_advanced"
RESOLUTION_BUMP = "resolution_bump"

@dataclasses.dataclass(frozen = True)
class SgdConfig():
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"Initial learning rate must be positive, got {self.lr0}", key = "optim.lr")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"Momentum must be in [0, 1), got {self.momentum}", key = "optim.momentum")
        if self.weight_decay < 0:
            raise ConfigError(f"Weight decay must be >= 0, got {self.weight_decay}", key = "optim.weight_decay")

@dataclasses.dataclass(eq = False)
class SgdState():
    """ One velocity buffer per trainable tensor, shaped (and typed) like the tensor """
    velocity: typing.Dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params):
        return cls({name: np.zeros_like(tensor) for name, tensor in params.tensors().items()})

    def copy(self):
        return SgdState({name: buffer.copy() for name, buffer in self.velocity.items()})

def sgd_step(params, grads, cfg, state, lr, freeze_mask = frozenset()):
    """ One SGD update of every unfrozen tensor, in place:
            v <- momentum * v + grad + weight_decay * param
            param <- param - lr * v
        gem_p is clamped to [1, 12] afterwards. Frozen tensors and their velocity are left untouched.

        :type params: HeadParams
        :param grads: HeadGradients or a mapping from tensor name to gradient
        :type cfg: SgdConfig
        :type state: SgdState

        :param lr: Learning rate for this step (0 leaves the parameters unchanged)
        :type lr: float

        :param freeze_mask: Names of tensors that must not change
        :type freeze_mask: Iterable[str]

        :raises OptimizerError: On negative lr, unknown tensor names or mismatching shapes

        :return: params and state (both updated in place)
    """
    if lr < 0 or not math.isfinite(lr):
        raise OptimizerError(f"Learning rate must be finite and >= 0, got {lr}")
    freeze_mask = frozenset(freeze_mask)
    if (unknown := freeze_mask - set(HEAD_TENSORS)):
        raise OptimizerError(f"Unknown tensors in freeze mask: {sorted(unknown)}")
    if hasattr(grads, "tensors"): grads = grads.tensors()

    tensors = params.tensors()
    for name, tensor in tensors.items():
        if name in freeze_mask: continue
        grad, velocity = grads.get(name), state.velocity.get(name)
        if grad is None or velocity is None:
            raise OptimizerError(f"Missing gradient or velocity for '{name}'")
        if np.shape(grad) != tensor.shape or velocity.shape != tensor.shape:
            raise OptimizerError(f"Shape mismatch for '{name}': param {tensor.shape}, grad {np.shape(grad)}, velocity {velocity.shape}")
        param64 = tensor.astype(np.float64)
        v = cfg.momentum * velocity.astype(np.float64) + np.asarray(grad, dtype = np.float64) + cfg.weight_decay * param64
        updated = param64 - lr * v
        if name == "gem_p":
            updated = np.clip(updated, *GEM_P_RANGE)
        state.velocity[name] = v.astype(velocity.dtype)
        setattr(params, name, updated.astype(tensor.dtype))
    params.version += 1
    return params, state

def cosine_lr(epoch, total_epochs, lr0):
    """ Cosine annealing without restarts: lr0 * (1 + cos(pi * epoch / total_epochs)) / 2

        :raises ScheduleError: Unless 0 <= epoch <= total_epochs and total_epochs >= 1
    """
    if total_epochs < 1 or not 0 <= epoch <= total_epochs:
        raise ScheduleError(f"Epoch {epoch} outside the cosine schedule [0, {total_epochs}]")
    return lr0 * 0.5 * (1 + math.cos(math.pi * epoch / total_epochs))

@dataclasses.dataclass
class ScheduleState():
    """ Learning rate and margin schedule of one training stage.

        lr is the rate of the most recent (or upcoming) epoch. The plateau fields are only used by the
            plateau_steps scheduler.
    """
    kind: str
    lr0: float
    lr: float
    total_epochs: int
    margin_schedule: typing.Tuple[float, ...]
    epoch: int = 0
    margin_index: int = 0
    best_loss: float = math.inf
    epochs_since_improve: int = 0
    patience: int = 2
    threshold: float = 1e-3
    decay_factor: float = 0.1
    resolution_bump_on_first_decay: bool = False
    decays: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULERS:
            raise ConfigError(f"Unknown scheduler '{self.kind}'", key = "scheduler")
        if not self.margin_schedule:
            raise ConfigError("The margin schedule needs at least one entry", key = "arcmargin.margins")
        self.margin_schedule = tuple(float(m) for m in self.margin_schedule)
        if not 0 <= self.margin_index < len(self.margin_schedule):
            raise ConfigError(f"Margin index {self.margin_index} outside the margin schedule")
        if self.patience < 1:
            raise ConfigError(f"Patience must be >= 1, got {self.patience}", key = "optim.patience")

    @property
    def margin(self):
        return self.margin_schedule[self.margin_index]

    def begin_epoch(self):
        """ Returns the learning rate of the current epoch """
        if self.kind == "cosine":
            self.lr = cosine_lr(min(self.epoch, self.total_epochs), self.total_epochs, self.lr0)
        return self.lr

    def end_epoch(self, epoch_loss):
        """ Closes the current epoch and returns the schedule events it triggered """
        self.epoch += 1
        if self.kind == "plateau_steps":
            _, events = plateau_step(epoch_loss, self)
            return events
        return frozenset()

def plateau_step(epoch_loss, state):
    """ Feeds one epoch's loss to the plateau detector, mutating state.

        The loss improves when it drops below best_loss * (1 - threshold). After `patience` consecutive
            epochs without improvement the learning rate is multiplied by decay_factor, the margin advances
            one rung (capped at the last one) and the counters reset; the first decay also emits
            resolution_bump when the schedule asks for it.

        :type state: ScheduleState

        :return: The new learning rate and the events fired
        :rtype: Tuple[float, frozenset]
    """
    events = set()
    if epoch_loss < state.best_loss * (1 - state.threshold):
        state.best_loss = epoch_loss
        state.epochs_since_improve = 0
        return state.lr, frozenset()

    state.epochs_since_improve += 1
    if state.epochs_since_improve >= state.patience:
        state.lr *= state.decay_factor
        events.add(LR_DECAYED)
        if state.margin_index < len(state.margin_schedule) - 1:
            state.margin_index += 1
            events.add(MARGIN_ADVANCED)
        if state.resolution_bump_on_first_decay and state.decays == 0:
            events.add(RESOLUTION_BUMP)
        state.decays += 1
        state.epochs_since_improve = 0
        ## Raising the margin raises the loss: the next epoch sets a fresh baseline
        state.best_loss = math.inf
        logger.info("Plateau after %d epochs: lr -> %.6g, margin -> %.2f", state.patience, state.lr, state.margin)
    return state.lr, frozenset(events)
