import re

## Binary containers
CHECKPOINT_MAGIC = b"AGRC"
CHECKPOINT_VERSION = 1
DESCRIPTOR_MAGIC = b"DSC1"
DESCRIPTOR_VERSION = 1

## Run directory layout
RESOLVEDCONFIG = "config.resolved"
DATASETCONFIG = "dataset.resolved"
DATASET_PREFIX = "dataset."
MANIFESTNAME = "manifest.csv"
GROUNDTRUTHNAME = "ground_truth.csv"
STAGELOG_TEMPLATE = "stage_{label}.csv"
CHECKPOINT_TEMPLATE = "checkpoint_{label}.agrc"
DESCRIPTORS_TEMPLATE = "descriptors_{tag}.dsc1"
RESULTS_TEMPLATE = "results_{tag}.csv"
EVAL_TEMPLATE = "eval_{tag}.csv"
REPORTMD = "report.md"
REPORTCSV = "report.csv"
IMAGEDUMPDIR = "images"

## CSV headers
MANIFEST_COLUMNS = "id", "label", "split", "seed"
STAGELOG_COLUMNS = "epoch", "loss", "lr", "margin", "resolution"
GROUNDTRUTH_COLUMNS = "query_id", "relevant_ids"
EVAL_COLUMNS = "query_id", "ap", "relevant_count"
RESULTS_COLUMNS = "query_id", "rank", "index_id", "score"

SPLITS = "train", "index", "query"
POOLINGS = "gem", "gap"
SCHEDULERS = "cosine", "plateau_steps"
PREPROCESS_MODES = "train_augment", "test_style"
PLATEAU_SIGNALS = "train", "val"
HEAD_TENSORS = "gem_p", "W_emb", "b_emb", "W_cls"

## Numerics
L2_EPS = 1e-12
FD_STEP = 1e-4
COS_CLAMP_EPS = 1e-7
GEM_P_RANGE = (1.0, 12.0)

## Imaging
CROP_RATIO = 0.9201
MIN_RENDER_SIDE = 16
PROTO_COMPONENTS = 8
FREQUENCY_RANGE = (1.0, 8.0)

## Retrieval
DEFAULT_K = 100
NORM_TOLERANCE = 1e-4

## Config lines look like "key = value  # comment"
CONFIGLINE_RE = re.compile(r"^(?P<key>[A-Za-z_][\w.]*)\s*=\s*(?P<value>.*?)\s*$")

## Every configuration key, its kind and its default (as it would be written in a config file).
## Desk-scale mapping of the large-scale recipe: batch 256 -> 32, epochs 100/30 -> 15/5,
## resolutions 224/448/576/640 -> 64/128/160/184, embedding 512 -> 32.
CONFIG_DEFAULTS = {
    "dataset.seed": ("int", "7"),
    "dataset.classes": ("int", "20"),
    "dataset.train_per_class": ("int", "40"),
    "dataset.index_per_class": ("int", "10"),
    "dataset.query_per_class": ("int", "5"),
    "dataset.distractor_classes": ("int", "10"),
    "dataset.noise_sigma": ("float", "0.05"),
    "dataset.scale_range": ("floats", "0.8,1.25"),
    "dataset.rotation_degrees": ("float", "15"),
    "dataset.translation": ("float", "0.1"),

    "preprocess.crop_ratio": ("float", "0.9201"),

    "backbone.seed": ("int", "1"),
    "backbone.patch": ("int", "8"),
    "backbone.stride": ("int", "8"),
    "backbone.channels": ("int", "64"),

    "head.embedding_dim": ("int", "32"),
    "head.gem_p": ("float", "3.0"),

    "arcmargin.scale": ("float", "30"),
    "arcmargin.margins": ("floats", "0.15,0.25,0.35"),
    "arcmargin.cos_eps": ("float", "1e-7"),

    "optim.lr": ("float", "0.01"),
    "optim.momentum": ("float", "0.9"),
    "optim.weight_decay": ("float", "0.0001"),
    "optim.decay_factor": ("float", "0.1"),
    "optim.patience": ("int", "2"),
    "optim.threshold": ("float", "0.001"),
    "optim.plateau_signal": ("str", "train"),

    "train.batch_size": ("int", "32"),
    "train.resolutions": ("ints", "64,128"),
    "train.stage1_epochs": ("int", "15"),
    "train.stage2_epochs": ("int", "5"),
    "train.stage2_lr_factor": ("float", "0.1"),
    "train.recipes": ("strs", "A,B"),

    "recipe_a.seed": ("int", "11"),
    "recipe_a.scheduler": ("str", "cosine"),
    "recipe_a.margins": ("floats", "0.15"),
    "recipe_a.pooling": ("str", "gem"),
    "recipe_a.bump_on_first_decay": ("bool", "false"),

    "recipe_b.seed": ("int", "23"),
    "recipe_b.scheduler": ("str", "plateau_steps"),
    "recipe_b.margins": ("floats", "0.15,0.25,0.35"),
    "recipe_b.pooling": ("str", "gem"),
    "recipe_b.bump_on_first_decay": ("bool", "true"),

    "fix.recipes": ("strs", "B"),
    "fix.epochs": ("int", "3"),
    "fix.resolution": ("int", "184"),
    "fix.lr_factor": ("float", "0.1"),
    "fix.margin": ("str", "keep"),

    "eval.k": ("int", "100"),
    "eval.test_resolutions": ("ints", "128,160,184"),
    "eval.public_fraction": ("float", "0.5"),
    "eval.map_floor": ("float", "0.0"),
    "eval.leaderboard_seed": ("int", "2020"),

    "run.dir": ("str", "runs/desk"),
    "run.workers": ("int", "1"),
}

## Checkpoint labels: "<recipe><stage number>", "<recipe>fix", or the untrained baseline
FIX_SUFFIX = "fix"
BASELINE_LABEL = "init"
LABEL_RE = re.compile(r"^(?P<recipe>[A-Za-z]\w*?)(?P<stage>\d+|fix)$")
IMAGEDUMP_TAG_RE = re.compile(r"^images@(?P<height>\d+)x(?P<width>\d+)$")
