"""
Five-variant ablation
=====================

Trains every loss variant on three seeds and prints the table next to the
published numbers. Runs are cached, so the acceptance suite and this script
share work when pointed at the same directory (about 40 minutes cold).
"""
import logging
import os
import sys

from fsatrain.data import DatasetConfig, build_dataset, default_mask_library
from fsatrain.experiments import ablation_harness
from fsatrain.model import ModelConfig
from fsatrain.training import desk_config

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = sys.argv[1] if len(sys.argv) > 1 else os.environ.get("FSATRAIN_ACCEPT_DIR", ".acceptance-cache")

cfg = DatasetConfig()
splits = {s: build_dataset(cfg, s) for s in ("train", "val", "test")}
report = ablation_harness(desk_config(), ModelConfig(), splits["train"], splits["val"], splits["test"],
                          default_mask_library(cfg), seeds=(0, 1, 2), out_dir=os.path.join(out, "ablation"))
print(report.format())
