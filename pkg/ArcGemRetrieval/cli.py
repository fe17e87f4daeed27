import logging
import sys
import time

import click

from ArcGemRetrieval import Experiment
from ArcGemRetrieval.config import parse_config
from ArcGemRetrieval.errors import ArcGemError, ConfigError
from ArcGemRetrieval.fileformats import eval_summary

def elapsed(start):
    diff = time.time() - start
    hm,seconds = divmod(diff,60)
    hours,minutes = divmod(hm,60)
    return f"{int(hours):02} hour{'s' if hours != 1 else ''}, {int(minutes):02} minute{'s' if minutes != 1 else ''}, and {seconds:05.2f} second{'s' if seconds != 1 else ''}"

def experiment_options(func):
    """ The options every subcommand takes to build its Experiment """
    func = click.option("--run-dir", type = click.Path(file_okay = False), default = None,
                        help = "Run directory (overrides run.dir).")(func)
    func = click.option("--set", "overrides", multiple = True, metavar = "KEY=VALUE",
                        help = "Override one configuration key; may be repeated.")(func)
    func = click.option("--config", "config_path", type = click.Path(exists = True, dir_okay = False), default = None,
                        help = "Configuration file (key=value lines).")(func)
    return func

def load_experiment(config_path, overrides, run_dir):
    experiment = Experiment(parse_config(config_path, overrides), run_dir = run_dir)
    experiment.write_config()
    return experiment

@click.group()
@click.option("-v", "--verbose", is_flag = True, help = "Log debug output.")
@click.option("-q", "--quiet", is_flag = True, help = "Only log warnings and errors.")
def cli(verbose, quiet):
    """ Desk-scale landmark retrieval: synthetic data, staged arcmargin training, top-100 search and mAP@100 """
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level = level, format = "%(asctime)s %(levelname)s %(name)s: %(message)s", stream = sys.stderr)

@cli.command("gen-data")
@experiment_options
@click.option("--dump-images", is_flag = True, help = "Also write the rendered images of every split to the images directory.")
def gen_data(config_path, overrides, run_dir, dump_images):
    """ Synthesize the dataset: manifest.csv and ground_truth.csv """
    experiment = load_experiment(config_path, overrides, run_dir)
    manifest = experiment.generate_data(dump_images = dump_images)
    counts = ", ".join(f"{split}={count}" for split, count in manifest.counts.items())
    click.echo(f"Dataset written to {experiment.directories.run}: {counts}")

@cli.command()
@experiment_options
@click.option("--recipe", "recipes", multiple = True, help = "Recipe to train; defaults to every recipe in train.recipes.")
@click.option("--fix/--no-fix", default = True, show_default = True, help = "Run the Fix stage of recipes listed in fix.recipes.")
def train(config_path, overrides, run_dir, recipes, fix):
    """ Train recipes stage by stage, writing stage_<n>.csv and checkpoint_<n>.agrc """
    experiment = load_experiment(config_path, overrides, run_dir)
    for name in recipes or experiment.config["train.recipes"]:
        start = time.time()
        labels = experiment.train(name, fix = fix)
        click.echo(f"Recipe {name} trained ({', '.join(labels)}). Time Elapsed: {elapsed(start)}")

@cli.command()
@experiment_options
@click.option("--checkpoint", "label", required = True, help = "Checkpoint label, e.g. A2 or Bfix.")
@click.option("--split", type = click.Choice(["index", "query", "train"]), required = True, help = "Split to describe.")
@click.option("--resolution", type = int, required = True, help = "Test resolution B.")
@click.option("--pooling", type = click.Choice(["gem", "gap"]), default = None, help = "Pooling; defaults to the recipe's.")
def extract(config_path, overrides, run_dir, label, split, resolution, pooling):
    """ Extract descriptors_<checkpoint>_<split>_<resolution>.dsc1 """
    experiment = load_experiment(config_path, overrides, run_dir)
    tag, descriptors = experiment.extract(label, split, resolution, pooling = pooling)
    click.echo(f"{len(descriptors)} descriptors of dimension {descriptors.dim} written to {experiment.descriptors_path(tag)}")

@cli.command()
@experiment_options
@click.argument("first")
@click.argument("second")
@click.option("--out", default = None, help = "Tag of the ensemble descriptor file; defaults to FIRST+SECOND.")
def ensemble(config_path, overrides, run_dir, first, second, out):
    """ Concatenate the L2-normalized descriptors of two descriptor files (by tag) """
    experiment = load_experiment(config_path, overrides, run_dir)
    tag, descriptors = experiment.ensemble(first, second, out = out)
    click.echo(f"Ensemble of dimension {descriptors.dim} written to {experiment.descriptors_path(tag)}")

@cli.command()
@experiment_options
@click.option("--queries", required = True, help = "Tag of the query descriptor file.")
@click.option("--index", required = True, help = "Tag of the index descriptor file.")
@click.option("-k", "--k", "k", type = int, default = None, help = "Results per query; defaults to eval.k.")
@click.option("--out", default = None, help = "Tag of the results file; defaults to the query tag.")
def search(config_path, overrides, run_dir, queries, index, k, out):
    """ Exact top-k dot-product search, written to results_<out>.csv """
    experiment = load_experiment(config_path, overrides, run_dir)
    tag, results = experiment.search(queries, index, k = k, out = out)
    click.echo(f"{len(results)} queries ranked, written to {experiment.results_path(tag)}")

@cli.command("eval")
@experiment_options
@click.option("--results", "tag", required = True, help = "Tag of the results file.")
@click.option("-k", "--k", "k", type = int, default = None, help = "Cutoff; defaults to eval.k.")
def evaluate(config_path, overrides, run_dir, tag, k):
    """ Score results_<tag>.csv against ground_truth.csv, written to eval_<tag>.csv """
    experiment = load_experiment(config_path, overrides, run_dir)
    report = experiment.evaluate(tag, k = k)
    click.echo(eval_summary(report))
    if report.skipped_queries:
        click.echo(f"{report.skipped_queries} queries without relevant index images were skipped", err = True)

@cli.command()
@experiment_options
def report(config_path, overrides, run_dir):
    """ Score every model and ensemble over eval.test_resolutions and write report.md and report.csv """
    experiment = load_experiment(config_path, overrides, run_dir)
    start = time.time()
    result = experiment.report()
    failed = [check.name for check in result.checks if not check.passed]
    click.echo(f"Report written to {experiment.directories.report_md}. Time Elapsed: {elapsed(start)}")
    if failed:
        click.echo(f"Trend checks below threshold: {', '.join(failed)}", err = True)

def run_command(argv = None):
    """ Runs the command line and maps the outcome to an exit code:
            0 on success, 1 for usage and configuration errors, 2 for runtime and data errors

        :param argv: The arguments (without the program name), defaults to sys.argv[1:]
        :type argv: List[str], optional

        :rtype: int
    """
    try:
        result = cli.main(args = argv, prog_name = "arcgem", standalone_mode = False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.ClickException as e:
        e.show()
        return 2
    except click.Abort:
        click.echo("Aborted!", err = True)
        return 1
    except ConfigError as e:
        click.echo(f"Configuration error: {e}", err = True)
        return 1
    except (ArcGemError, OSError) as e:
        click.echo(f"Error: {e}", err = True)
        return 2
    return result if isinstance(result, int) else 0

if __name__ == "__main__":
    sys.exit(run_command())
