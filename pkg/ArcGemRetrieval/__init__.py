""" ArcGemRetrieval

    A desk-scale landmark retrieval pipeline: a synthetic landmark dataset, a frozen random-projection backbone,
        a trainable head (GeM pooling, embedding layer, additive angular margin loss) trained with staged
        progressive-resolution recipes, and exact top-100 search scored by mAP@100.

    Most utilities can be reached by creating an Experiment with a configuration and a run directory: every
        artifact of a run (resolved configuration, manifest, stage logs, checkpoints, descriptor files, results,
        evaluations and the report) is written to that directory.

    The simplest way to reproduce the full pipeline is:
        experiment = Experiment(parse_config("configs/desk.cfg"))
        experiment.generate_data()
        for name in experiment.config["train.recipes"]: experiment.train(name)
        experiment.report()
"""

import logging
import pathlib
from typing import Union

from ArcGemRetrieval.constants import *
from ArcGemRetrieval import fileformats, report, utils
from ArcGemRetrieval.backbone import init_backbone
from ArcGemRetrieval.config import ExperimentConfig, parse_config
from ArcGemRetrieval.errors import ConfigError, DataError, UsageError
from ArcGemRetrieval.head import init_head
from ArcGemRetrieval.imaging import compute_channel_mean, render_row, synth_dataset
from ArcGemRetrieval.numerics import SeededRng
from ArcGemRetrieval.retrieval import (build_descriptor_set, ensemble_concat, leaderboard_split, map_at_100,
                                       preprocess_split, search_topk)
from ArcGemRetrieval.trainer import fix_finetune, init_checkpoint, run_recipe

logger = logging.getLogger(__name__)

class Experiment():
    """ Experiment is a highlevel Object representing one run directory and the configuration that produces it

        :param config: The resolved configuration, defaults to parse_config() (all defaults)
        :type config: ExperimentConfig, optional

        :param run_dir: The run directory, defaults to the configuration's run.dir. It is created when first referenced.
        :type run_dir: Union[str,pathlib.Path], optional

        :return: A new Experiment Instance
    """
    def __init__(self, config: ExperimentConfig = None, run_dir: Union[str,pathlib.Path] = None):
        self.config = config if config is not None else parse_config()
        self.directories = utils.run_directories(run_dir or self.config["run.dir"])
        self.processes = self.config["run.workers"]
        self.settings = self.config.render_settings()
        self._manifest = None
        self._protos = None
        self._backbone = None
        self._mean = None
        self._checkpoints = {}
        self._images = {}

    ## Paths

    def checkpoint_path(self, label):
        return self.directories.run / CHECKPOINT_TEMPLATE.format(label = label)

    def stage_log_path(self, label):
        return self.directories.run / STAGELOG_TEMPLATE.format(label = label)

    def descriptors_path(self, tag):
        return self.directories.run / DESCRIPTORS_TEMPLATE.format(tag = tag)

    def results_path(self, tag):
        return self.directories.run / RESULTS_TEMPLATE.format(tag = tag)

    def eval_path(self, tag):
        return self.directories.run / EVAL_TEMPLATE.format(tag = tag)

    def write_config(self):
        """ Writes the resolved configuration to the run directory and logs it """
        text = self.config.dumps()
        utils.atomic_write(self.directories.config, text)
        logger.info("Resolved configuration (%s):\n%s", self.directories.config, text.rstrip())

    ## Dataset

    def generate_data(self, dump_images = False):
        """ Synthesizes the dataset and writes the manifest and the ground truth.

            :param dump_images: Also write every split rendered at the first training resolution to
                                the images directory (DSC1 containers), defaults to False
            :type dump_images: bool

            :rtype: DatasetManifest
        """
        manifest, protos = synth_dataset(**self.config.dataset_kwargs())
        fileformats.save_manifest(self.directories.manifest, manifest)
        fileformats.save_ground_truth(self.directories.ground_truth, manifest.ground_truth())
        utils.atomic_write(self.directories.dataset_config, self.config.dumps(prefix = DATASET_PREFIX))
        self._manifest, self._protos = manifest, protos
        if dump_images:
            resolution = self.config["train.resolutions"][0]
            for split in SPLITS:
                if (rows := manifest.split(split)):
                    samples = [render_row(row, protos, resolution, self.settings) for row in rows]
                    fileformats.save_image_dump(self.directories.images / f"{split}.dsc1", samples)
        return manifest

    @property
    def manifest(self):
        """ The run's manifest, read from the run directory on first use

            :raises DataError: If gen-data has not been run in this directory
            :raises ConfigError: If the dataset keys differ from the ones the dataset was generated with
        """
        if self._manifest is None:
            if not (path := self.directories.manifest).exists():
                raise DataError(f"No manifest at {path}: generate the dataset first")
            self.check_dataset_config()
            self._manifest = fileformats.load_manifest(path, self.config["dataset.seed"])
        return self._manifest

    def check_dataset_config(self):
        """ Compares the dataset keys with the ones gen-data recorded, since the images are re-rendered from them

            :raises ConfigError: Naming the first key that differs
        """
        if not (path := self.directories.dataset_config).exists():
            logger.warning("No %s in the run directory: the dataset keys cannot be checked", path.name)
            return
        generated = parse_config(path)
        for key in sorted(CONFIG_DEFAULTS):
            if key.startswith(DATASET_PREFIX) and generated[key] != self.config[key]:
                raise ConfigError(f"The dataset was generated with {generated[key]!r}, the configuration has {self.config[key]!r}: "
                                  f"run gen-data again or use the same value", key = key)

    @property
    def protos(self):
        if self._protos is None:
            self._protos = self.manifest.protos()
        return self._protos

    @property
    def backbone(self):
        if self._backbone is None:
            self._backbone = init_backbone(**self.config.backbone_kwargs())
        return self._backbone

    def channel_mean(self):
        """ Channel mean of the train split at the first training resolution """
        if self._mean is None:
            self._mean = compute_channel_mean(self.manifest, self.protos, self.config["train.resolutions"][0], self.settings)
        return self._mean

    ## Training

    def final_label(self, name):
        return f"{name}{len(self.config['train.resolutions'])}"

    def fix_label(self, name):
        return f"{name}{FIX_SUFFIX}"

    def fixed_recipes(self):
        """ Recipes that get a Fix stage """
        if self.config["fix.epochs"] < 1: return []
        return [name for name in self.config["train.recipes"] if name in self.config["fix.recipes"]]

    def train(self, name, fix = True):
        """ Runs a recipe (and its Fix stage when configured), writing a stage log and a checkpoint per stage

            :param name: Recipe name, e.g. "A"
            :param fix: Whether to run the Fix stage of recipes listed in fix.recipes, defaults to True

            :return: The labels of the checkpoints written
            :rtype: List[str]
        """
        recipe = self.config.recipe(name)
        preprocess = self.config.preprocess_config(self.channel_mean())
        checkpoints = run_recipe(recipe, self.manifest, self.backbone, preprocess, **self.config.head_kwargs(),
                                 protos = self.protos, settings = self.settings, processes = self.processes)
        labels, logged = [], 0
        for stage, checkpoint in zip(recipe.stages, checkpoints):
            self._save_stage(stage.label, checkpoint, logged)
            labels.append(stage.label)
            logged = len(checkpoint.log)

        if fix and name in self.fixed_recipes():
            label = self.fix_label(name)
            finetuned = fix_finetune(checkpoints[-1], manifest = self.manifest, rng = SeededRng(recipe.seed, f"recipe/{name}/fix"),
                                     pooling = recipe.stages[-1].pooling, sgd = self.config.sgd_config(), label = label,
                                     protos = self.protos, settings = self.settings, processes = self.processes,
                                     **self.config.fix_kwargs())
            self._save_stage(label, finetuned, logged)
            labels.append(label)
        return labels

    def _save_stage(self, label, checkpoint, logged):
        fileformats.save_stage_log(self.stage_log_path(label), checkpoint.log[logged:])
        fileformats.save_checkpoint(self.checkpoint_path(label), checkpoint)
        self._checkpoints.pop(label, None)

    def baseline(self):
        """ Writes (once) and returns the label of the untrained checkpoint of the first recipe """
        if not self.checkpoint_path(BASELINE_LABEL).exists():
            name = self.config["train.recipes"][0]
            recipe = self.config.recipe(name)
            head = init_head(recipe.seed, self.backbone.channels, classes = self.manifest.class_count, **self.config.head_kwargs())
            checkpoint = init_checkpoint(self.backbone, head, self.config.preprocess_config(self.channel_mean()),
                                         self.config.arcmargin_config(recipe.stages[0].margins))
            fileformats.save_checkpoint(self.checkpoint_path(BASELINE_LABEL), checkpoint)
        return BASELINE_LABEL

    def load_checkpoint(self, label):
        """ Reads (and caches) checkpoint_<label>.agrc

            :raises UsageError: If the checkpoint has not been trained yet
        """
        if label not in self._checkpoints:
            if not (path := self.checkpoint_path(label)).exists():
                raise UsageError(f"No checkpoint '{label}' at {path}: train it first")
            self._checkpoints[label] = fileformats.load_checkpoint(path)
        return self._checkpoints[label]

    def pooling_of(self, label):
        """ The pooling a checkpoint was trained with (GeM unless its recipe says otherwise) """
        if (match := LABEL_RE.match(label)) and f"recipe_{match.group('recipe').lower()}.pooling" in self.config:
            return self.config[f"recipe_{match.group('recipe').lower()}.pooling"]
        return "gem"

    ## Descriptors, search and evaluation

    def _preprocessed(self, split, resolution, preprocess):
        """ Test-preprocessed images of a split; only the most recent resolution is kept in memory """
        key = (split, resolution, preprocess)
        if key not in self._images:
            for stale in [k for k in self._images if k[1] != resolution]:
                del self._images[stale]
            self._images[key] = preprocess_split(self.manifest, split, resolution, preprocess, self.protos, self.settings, self.processes)
        return self._images[key]

    def extract(self, label, split, resolution, pooling = None):
        """ Builds and writes descriptors_<label>_<split>_<resolution>.dsc1

            :return: The tag of the descriptor file and the descriptors
            :rtype: Tuple[str, DescriptorSet]
        """
        checkpoint = self.load_checkpoint(label)
        pooling = pooling or self.pooling_of(label)
        tag = f"{label}_{split}_{resolution}"
        descriptors = build_descriptor_set(checkpoint, self.manifest, split, resolution, pooling = pooling,
                                           processes = self.processes, model_tag = f"{label}@{resolution}",
                                           images = self._preprocessed(split, resolution, checkpoint.preprocess))
        fileformats.save_descriptors(self.descriptors_path(tag), descriptors)
        return tag, descriptors

    def load_descriptors(self, tag):
        return fileformats.load_descriptors(self.descriptors_path(tag))

    def ensemble(self, first, second, out = None):
        """ Concatenates two descriptor files into descriptors_<out>.dsc1 (out defaults to "<first>+<second>")

            :return: The tag of the new descriptor file and the descriptors
        """
        out = out or f"{first}+{second}"
        descriptors = ensemble_concat(self.load_descriptors(first), self.load_descriptors(second))
        fileformats.save_descriptors(self.descriptors_path(out), descriptors)
        return out, descriptors

    def search(self, queries, index, k = None, out = None):
        """ Searches descriptors_<queries> against descriptors_<index> and writes results_<out>.csv (out defaults to queries) """
        out = out or queries
        results = search_topk(self.load_descriptors(queries), self.load_descriptors(index), k or self.config["eval.k"])
        fileformats.save_results(self.results_path(out), results)
        return out, results

    def ground_truth(self):
        if not (path := self.directories.ground_truth).exists():
            raise DataError(f"No ground truth at {path}: generate the dataset first")
        return fileformats.load_ground_truth(path)

    def evaluate(self, tag, results = None, k = None):
        """ Scores results_<tag>.csv (or the given results) against the ground truth and writes eval_<tag>.csv

            The report also scores the public and private halves of the leaderboard split.

            :rtype: EvalReport
        """
        if results is None:
            results = fileformats.load_results(self.results_path(tag))
        ground_truth = self.ground_truth()
        public = leaderboard_split(sorted(ground_truth), self.config["eval.leaderboard_seed"], self.config["eval.public_fraction"])
        evaluation = map_at_100(results, ground_truth, k = k or self.config["eval.k"], public_ids = public)
        fileformats.save_eval_report(self.eval_path(tag), evaluation)
        return evaluation

    def score(self, tag, queries, index):
        """ Search then evaluate, both written under tag """
        _, results = self.search(queries, index, out = tag)
        return self.evaluate(tag, results)

    def report(self):
        """ Evaluates every model and ensemble over the test resolutions and writes report.md and report.csv """
        return report.build_report(self)
