import os

## End-to-end training runs take minutes: they only run with ARCGEM_SLOW=1
SLOW = os.environ.get("ARCGEM_SLOW") == "1"

## A configuration small enough to train in seconds
TINY_OVERRIDES = [
    "dataset.classes=4",
    "dataset.train_per_class=6",
    "dataset.index_per_class=3",
    "dataset.query_per_class=2",
    "dataset.distractor_classes=1",
    "backbone.channels=8",
    "head.embedding_dim=8",
    "train.batch_size=8",
    "train.resolutions=24,32",
    "train.stage1_epochs=3",
    "train.stage2_epochs=2",
    "fix.epochs=1",
    "fix.resolution=40",
    "eval.test_resolutions=32,40",
    "eval.k=10",
]
