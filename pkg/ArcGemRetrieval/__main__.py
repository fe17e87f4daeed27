import sys

from ArcGemRetrieval.cli import run_command

sys.exit(run_command())
