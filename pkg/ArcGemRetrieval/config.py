""" ArcGemRetrieval.config

    The experiment configuration: a flat file of key=value lines with # comments.

    Every key, its kind and its default are listed in ArcGemRetrieval.constants.CONFIG_DEFAULTS; unknown keys are
        rejected. Values given on the command line (--set key=value) override the file.
"""

import logging
import math
import pathlib

from ArcGemRetrieval.constants import *
from ArcGemRetrieval.errors import ConfigError
from ArcGemRetrieval.head import ArcMarginConfig
from ArcGemRetrieval.imaging import PreprocessConfig, RenderSettings
from ArcGemRetrieval.optim import SgdConfig
from ArcGemRetrieval.trainer import Recipe, StageConfig

logger = logging.getLogger(__name__)

def _parse_bool(value):
    lowered = value.lower()
    if lowered in ("true", "yes", "on", "1"): return True
    if lowered in ("false", "no", "off", "0"): return False
    raise ValueError(f"not a boolean: '{value}'")

def _parse_float(value):
    result = float(value)
    if not math.isfinite(result):
        raise ValueError(f"not a finite number: '{value}'")
    return result

def _parse_list(parser):
    def parse(value):
        items = [item.strip() for item in value.split(",")]
        if not all(items):
            raise ValueError(f"empty entry in list '{value}'")
        return tuple(parser(item) for item in items)
    return parse

PARSERS = {
    "int": int,
    "float": _parse_float,
    "bool": _parse_bool,
    "str": str,
    "ints": _parse_list(int),
    "floats": _parse_list(_parse_float),
    "strs": _parse_list(str),
}

class ExperimentConfig():
    """ A fully resolved configuration.

        Values are read with item syntax (config["arcmargin.scale"]); the raw text of every value is kept so
            that dumps() reproduces the configuration exactly.
    """
    def __init__(self):
        self._raw = {}
        self._values = {}
        for key, (_, default) in CONFIG_DEFAULTS.items():
            self.set(key, default)

    def set(self, key, raw, line = None):
        """ Parses and stores one value

            :raises ConfigError: For an unknown key or an unparsable value, naming the key and the line
        """
        if key not in CONFIG_DEFAULTS:
            raise ConfigError("Unknown configuration key", key = key, line = line)
        kind = CONFIG_DEFAULTS[key][0]
        raw = raw.strip()
        try:
            value = PARSERS[kind](raw)
        except ValueError as e:
            raise ConfigError(f"Cannot parse '{raw}' as {kind}: {e}", key = key, line = line) from e
        self._raw[key] = raw
        self._values[key] = value

    def __getitem__(self, key):
        if key not in self._values:
            raise ConfigError("Unknown configuration key", key = key)
        return self._values[key]

    def __contains__(self, key):
        return key in self._values

    def dumps(self, prefix = ""):
        """ The resolved configuration, one key=value line per key in sorted order

            :param prefix: Only dump the keys starting with it (e.g. "dataset."), defaults to every key
        """
        return "".join(f"{key}={self._raw[key]}\n" for key in sorted(self._raw) if key.startswith(prefix))

    def validate(self):
        """ Checks the values that only make sense together

            :raises ConfigError: Naming the offending key
        """
        for name in self["train.recipes"] + self["fix.recipes"]:
            if f"{self._prefix(name)}.seed" not in self:
                raise ConfigError(f"Unknown recipe '{name}'", key = "train.recipes")
        for name in self["fix.recipes"]:
            if name not in self["train.recipes"]:
                raise ConfigError(f"Recipe '{name}' is finetuned but never trained", key = "fix.recipes")
        for name in self["train.recipes"]:
            prefix = self._prefix(name)
            for key, allowed in [(f"{prefix}.scheduler", SCHEDULERS), (f"{prefix}.pooling", POOLINGS)]:
                if self[key] not in allowed:
                    raise ConfigError(f"Must be one of {allowed}, got '{self[key]}'", key = key)
        if self["optim.plateau_signal"] not in PLATEAU_SIGNALS:
            raise ConfigError(f"Must be one of {PLATEAU_SIGNALS}", key = "optim.plateau_signal")
        if not self["train.resolutions"]:
            raise ConfigError("At least one training resolution is required", key = "train.resolutions")
        if self["fix.margin"] != "keep":
            try: _parse_float(self["fix.margin"])
            except ValueError as e:
                raise ConfigError("Must be 'keep' or a number", key = "fix.margin") from e
        if not 0 <= self["eval.public_fraction"] <= 1:
            raise ConfigError("Must be in [0, 1]", key = "eval.public_fraction")
        if not 0 <= self["eval.map_floor"] <= 1:
            raise ConfigError("Must be in [0, 1]", key = "eval.map_floor")
        if self["eval.k"] < 1:
            raise ConfigError("Must be >= 1", key = "eval.k")
        if self["run.workers"] < 1:
            raise ConfigError("Must be >= 1", key = "run.workers")
        return self

    ## Typed accessors

    @staticmethod
    def _prefix(name):
        return f"recipe_{name.lower()}"

    def dataset_kwargs(self):
        return dict(dataset_seed = self["dataset.seed"], classes = self["dataset.classes"],
                    train_per_class = self["dataset.train_per_class"], index_per_class = self["dataset.index_per_class"],
                    query_per_class = self["dataset.query_per_class"], distractor_classes = self["dataset.distractor_classes"])

    def render_settings(self):
        scale_range = self["dataset.scale_range"]
        if len(scale_range) != 2:
            raise ConfigError("Needs exactly two values", key = "dataset.scale_range")
        return RenderSettings(noise_sigma = self["dataset.noise_sigma"], scale_range = scale_range,
                              rotation_degrees = self["dataset.rotation_degrees"], translation = self["dataset.translation"])

    def backbone_kwargs(self):
        return dict(seed = self["backbone.seed"], patch = self["backbone.patch"], stride = self["backbone.stride"],
                    channels = self["backbone.channels"])

    def head_kwargs(self):
        return dict(embedding_dim = self["head.embedding_dim"], gem_p = self["head.gem_p"])

    def preprocess_config(self, mean = (0.0, 0.0, 0.0)):
        resolutions = self["train.resolutions"]
        return PreprocessConfig(crop_ratio = self["preprocess.crop_ratio"], mean = tuple(mean),
                                train_resolution = resolutions[0], test_resolution = self["fix.resolution"])

    def sgd_config(self):
        return SgdConfig(lr0 = self["optim.lr"], momentum = self["optim.momentum"], weight_decay = self["optim.weight_decay"])

    def arcmargin_config(self, margins = None):
        """ The arcmargin settings at the first rung of a margin schedule (the global schedule by default) """
        margins = margins or self["arcmargin.margins"]
        return ArcMarginConfig(s = self["arcmargin.scale"], m = margins[0], cos_clamp_eps = self["arcmargin.cos_eps"])

    def recipe(self, name):
        """ Builds a recipe: one stage per training resolution.

            The first stage trains for train.stage1_epochs at optim.lr, later ones for train.stage2_epochs at
                optim.lr * train.stage2_lr_factor (compounded per stage). Plateau recipes carry their schedule
                across stages and, when bump_on_first_decay is set, switch the first stage to the next
                resolution on their first decay.

            :raises ConfigError: For an unknown recipe
        """
        prefix = self._prefix(name)
        if f"{prefix}.seed" not in self:
            raise ConfigError(f"Unknown recipe '{name}'", key = "train.recipes")
        scheduler = self[f"{prefix}.scheduler"]
        resolutions = self["train.resolutions"]
        common = dict(scheduler = scheduler, margins = self[f"{prefix}.margins"], scale = self["arcmargin.scale"],
                      cos_clamp_eps = self["arcmargin.cos_eps"], batch_size = self["train.batch_size"],
                      pooling = self[f"{prefix}.pooling"], sgd = self.sgd_config(), patience = self["optim.patience"],
                      threshold = self["optim.threshold"], decay_factor = self["optim.decay_factor"],
                      plateau_signal = self["optim.plateau_signal"])
        stages = []
        for index, resolution in enumerate(resolutions):
            bump = None
            if self[f"{prefix}.bump_on_first_decay"] and index + 1 < len(resolutions):
                bump = resolutions[index + 1]
            stages.append(StageConfig(
                label = f"{name}{index + 1}", resolution = resolution,
                epochs = self["train.stage1_epochs"] if index == 0 else self["train.stage2_epochs"],
                lr0 = self["optim.lr"] * self["train.stage2_lr_factor"]**index,
                bump_resolution = bump, carry_schedule = index > 0 and scheduler == "plateau_steps",
                **common))
        return Recipe(name = name, stages = tuple(stages), seed = self[f"{prefix}.seed"], dataset_seed = self["dataset.seed"])

    def fix_kwargs(self):
        margin = self["fix.margin"]
        return dict(test_resolution = self["fix.resolution"], epochs = self["fix.epochs"], lr_factor = self["fix.lr_factor"],
                    margin = None if margin == "keep" else float(margin), batch_size = self["train.batch_size"])

def parse_config(path = None, overrides = None):
    """ Reads a configuration file on top of the defaults and applies overrides

        :param path: The configuration file; None gives the defaults
        :type path: Union[str, pathlib.Path], optional

        :param overrides: "key=value" strings (as given to --set) or a mapping, applied last
        :type overrides: Union[Iterable[str], Mapping[str, str]], optional

        :raises ConfigError: For malformed lines, unknown keys and unparsable values, naming the key and line
        :raises OSError: If the file cannot be read

        :rtype: ExperimentConfig
    """
    config = ExperimentConfig()
    if path is not None:
        text = pathlib.Path(path).read_text(encoding = "utf-8")
        for number, line in enumerate(text.splitlines(), start = 1):
            if not (line := line.split("#", 1)[0].strip()): continue
            if not (match := CONFIGLINE_RE.match(line)):
                raise ConfigError(f"Expected key=value, got '{line}'", line = number)
            config.set(match.group("key"), match.group("value"), line = number)

    if overrides:
        if hasattr(overrides, "items"): overrides = [f"{key}={value}" for key, value in overrides.items()]
        for override in overrides:
            if not (match := CONFIGLINE_RE.match(override.strip())):
                raise ConfigError(f"Expected key=value, got '{override}'", line = "<cli>")
            config.set(match.group("key"), match.group("value"), line = "<cli>")
    return config.validate()
