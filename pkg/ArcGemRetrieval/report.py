""" ArcGemRetrieval.report

    The run report: every final model, Fix model and ensemble scored by mAP@100 at each test resolution
        (with the public / private leaderboard halves), the training summary, the trend checks that compare
        stages, resolutions, Fix finetuning and ensembling, and the MD5 of every checkpoint and descriptor file.
"""

import dataclasses
import logging
import math
import typing

from ArcGemRetrieval.constants import *
from ArcGemRetrieval.utils import atomic_write, calculate_md5

logger = logging.getLogger(__name__)

## Allowed drops for the trend checks; efficacy is a required gain over the untrained head
STAGE_TOLERANCE = 0.02
RESOLUTION_TOLERANCE = 0.02
FIX_TOLERANCE = 0.01
ENSEMBLE_TOLERANCE = 0.01
EFFICACY_MARGIN = 0.2

@dataclasses.dataclass(frozen = True)
class ReportRow():
    kind: str
    model: str
    resolution: int
    map_at_100: float
    public_map: float
    private_map: float

@dataclasses.dataclass(frozen = True)
class TrendCheck():
    name: str
    description: str
    value: float
    threshold: float

    @property
    def passed(self):
        return self.value >= self.threshold

@dataclasses.dataclass
class Report():
    rows: typing.List[ReportRow]
    checks: typing.List[TrendCheck]
    stages: typing.List[typing.Tuple[str, typing.Any]]
    digests: typing.List[typing.Tuple[str, str]]

def _cell(value):
    return "n/a" if math.isnan(value) else f"{value:.4f}"

class _Scorer():
    """ Scores (model, resolution) pairs once, resolution by resolution """
    def __init__(self, experiment):
        self.experiment = experiment
        self.scores = {}

    def model(self, label, resolution):
        if (label, resolution) not in self.scores:
            queries, _ = self.experiment.extract(label, "query", resolution)
            index, _ = self.experiment.extract(label, "index", resolution)
            self.scores[label, resolution] = self.experiment.score(f"{label}_{resolution}", queries, index)
        return self.scores[label, resolution]

    def ensemble(self, first, second, resolution):
        name = f"{first}+{second}"
        if (name, resolution) not in self.scores:
            self.model(first, resolution)
            self.model(second, resolution)
            tags = {}
            for split in ("query", "index"):
                tags[split], _ = self.experiment.ensemble(f"{first}_{split}_{resolution}", f"{second}_{split}_{resolution}",
                                                          out = f"{name}_{split}_{resolution}")
            self.scores[name, resolution] = self.experiment.score(f"{name}_{resolution}", tags["query"], tags["index"])
        return self.scores[name, resolution]

def trend_checks(score, config, finals, fixes, ensembles, baseline):
    """ The stage, resolution, Fix, ensemble, efficacy and mAP floor checks of a run

        :param score: Returns the mAP@100 of a model label (or "<first>+<second>" ensemble) at a resolution
        :type score: Callable[[str, int], float]

        :param config: The run configuration (any mapping with the train, fix and eval keys)

        :param finals: Recipe name to its last stage label
        :param fixes: Recipe name to its Fix label, for the recipes that have one
        :param ensembles: (first, second) label pairs; the first pair is checked
        :param baseline: Label of the untrained checkpoint

        :rtype: List[TrendCheck]
    """
    recipes = list(finals)
    train_resolutions = config["train.resolutions"]
    fix_resolution = config["fix.resolution"]
    first_res, last_res = train_resolutions[0], train_resolutions[-1]

    checks = []
    for name in recipes:
        final = finals[name]
        if len(train_resolutions) > 1:
            checks.append(TrendCheck(f"stage_gain_{name}", f"{final}@{last_res} - {name}1@{first_res}",
                                     score(final, last_res) - score(f"{name}1", first_res), -STAGE_TOLERANCE))
        checks.append(TrendCheck(f"resolution_gain_{name}", f"{final}@{fix_resolution} - {final}@{last_res}",
                                 score(final, fix_resolution) - score(final, last_res), -RESOLUTION_TOLERANCE))
    for name, label in fixes.items():
        checks.append(TrendCheck(f"fix_gain_{name}", f"{label}@{fix_resolution} - {finals[name]}@{fix_resolution}",
                                 score(label, fix_resolution) - score(finals[name], fix_resolution), -FIX_TOLERANCE))
    if ensembles and fix_resolution in config["eval.test_resolutions"]:
        first, second = ensembles[0]
        best = max(score(first, fix_resolution), score(second, fix_resolution))
        checks.append(TrendCheck("ensemble_gain", f"{first}+{second}@{fix_resolution} - max(single)",
                                 score(f"{first}+{second}", fix_resolution) - best, -ENSEMBLE_TOLERANCE))
    for name in recipes:
        checks.append(TrendCheck(f"efficacy_{name}", f"{finals[name]}@{last_res} - {baseline}@{last_res}",
                                 score(finals[name], last_res) - score(baseline, last_res), EFFICACY_MARGIN))
    for name in recipes:
        checks.append(TrendCheck(f"map_floor_{name}", f"{finals[name]}@{last_res}",
                                 score(finals[name], last_res), config["eval.map_floor"]))
    return checks

def build_report(experiment):
    """ Scores every model of the run and writes report.md and report.csv

        :type experiment: ArcGemRetrieval.Experiment

        :rtype: Report
    """
    config = experiment.config
    recipes = list(config["train.recipes"])
    train_resolutions = config["train.resolutions"]
    test_resolutions = config["eval.test_resolutions"]
    fix_resolution = config["fix.resolution"]
    first_res, last_res = train_resolutions[0], train_resolutions[-1]

    finals = {name: experiment.final_label(name) for name in recipes}
    fixes = {name: experiment.fix_label(name) for name in experiment.fixed_recipes()}
    models = list(finals.values()) + list(fixes.values())
    ensembles = []
    if len(recipes) >= 2:
        first, second = recipes[:2]
        ensembles.append((finals[first], finals[second]))
        if second in fixes:
            ensembles.append((finals[first], fixes[second]))
    baseline = experiment.baseline()

    ## What each resolution needs, so that images are rendered once per resolution
    needed = {}
    for resolution in test_resolutions:
        needed.setdefault(resolution, set()).update(models)
    needed.setdefault(last_res, set()).update(list(finals.values()) + [baseline])
    needed.setdefault(fix_resolution, set()).update(models)
    if len(train_resolutions) > 1:
        needed.setdefault(first_res, set()).update(f"{name}1" for name in recipes)

    scorer = _Scorer(experiment)
    rows = []
    for resolution in sorted(needed):
        for label in sorted(needed[resolution]):
            scorer.model(label, resolution)
        if resolution in test_resolutions:
            for pair in ensembles:
                scorer.ensemble(*pair, resolution)
        logger.info("Scored %d models at %d", len(needed[resolution]), resolution)

    for (label, resolution), evaluation in sorted(scorer.scores.items(), key = lambda item: (item[0][1], item[0][0])):
        kind = "ensemble" if "+" in label else ("baseline" if label == baseline else "model")
        rows.append(ReportRow(kind, label, resolution, evaluation.map_at_100, evaluation.public_map, evaluation.private_map))

    def score(label, resolution):
        return scorer.scores[label, resolution].map_at_100

    checks = trend_checks(score, config, finals, fixes, ensembles, baseline)

    stages = []
    for name in recipes:
        labels = [f"{name}{index + 1}" for index in range(len(train_resolutions))]
        if name in fixes: labels.append(fixes[name])
        for label in labels:
            log = experiment.load_checkpoint(label).log
            stages.append((label, log[-1] if log else None))

    run = experiment.directories.run
    digests = [(path.name, calculate_md5(path)) for path in sorted(run.glob("*.agrc")) + sorted(run.glob("*.dsc1"))]

    result = Report(rows = rows, checks = checks, stages = stages, digests = digests)
    atomic_write(experiment.directories.report_md, render_markdown(result, test_resolutions, models, ensembles))
    atomic_write(experiment.directories.report_csv, render_csv(result))
    for check in checks:
        logger.info("%s: %.4f (threshold %.4f) %s", check.name, check.value, check.threshold, "PASS" if check.passed else "FAIL")
    return result

def _grid(result, labels, resolutions):
    lines = ["| Model | " + " | ".join(str(resolution) for resolution in resolutions) + " |",
             "|---" * (len(resolutions) + 1) + "|"]
    for label in labels:
        cells = []
        for resolution in resolutions:
            row = next((row for row in result.rows if row.model == label and row.resolution == resolution), None)
            cells.append("n/a" if row is None else f"{_cell(row.map_at_100)} ({_cell(row.public_map)} / {_cell(row.private_map)})")
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return lines

def render_markdown(result, test_resolutions, models, ensembles):
    """ The report as markdown: cells are "mAP@100 (public / private)" """
    lines = ["# ArcGemRetrieval report", "",
             "## Models", "", "mAP@100 (public / private) by test resolution.", ""]
    lines += _grid(result, models, test_resolutions)
    if ensembles:
        lines += ["", "## Ensembles", ""]
        lines += _grid(result, [f"{first}+{second}" for first, second in ensembles], test_resolutions)

    lines += ["", "## Training", "", "| Stage | Last epoch | Final loss | Final lr | Final margin | Final resolution |", "|---|---|---|---|---|---|"]
    for label, record in result.stages:
        if record is None:
            lines.append(f"| {label} | 0 | n/a | n/a | n/a | n/a |")
        else:
            lines.append(f"| {label} | {record.epoch} | {record.loss:.6f} | {record.lr:.6g} | {record.margin:.2f} | {record.resolution} |")

    lines += ["", "## Trend checks", "", "| Check | Compares | Value | Threshold | Result |", "|---|---|---|---|---|"]
    for check in result.checks:
        lines.append(f"| {check.name} | {check.description} | {check.value:+.4f} | {check.threshold:+.4f} | {'PASS' if check.passed else 'FAIL'} |")

    lines += ["", "## Artifacts", "", "| File | MD5 |", "|---|---|"]
    lines += [f"| {name} | {digest} |" for name, digest in result.digests]
    return "\n".join(lines) + "\n"

def render_csv(result):
    lines = ["kind,model,resolution,map_at_100,public_map,private_map"]
    for row in result.rows:
        lines.append(f"{row.kind},{row.model},{row.resolution},{row.map_at_100!r},{row.public_map!r},{row.private_map!r}")
    return "\n".join(lines) + "\n"
