"""
Training with and without forced spatial attention
==================================================

A short run on a slice of the synthetic pedal task: same init, same
batches, only the loss differs. Full-length comparisons live in the
acceptance suite; this one takes a couple of minutes.
"""
import logging

from fsatrain.data import DatasetConfig, build_dataset, default_mask_library
from fsatrain.evaluation import attention_entropy, evaluate, export_cams, leakage_metric
from fsatrain.losses import LossVariant, Variant
from fsatrain.model import ModelConfig
from fsatrain.training import desk_config, run

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = DatasetConfig()
train = build_dataset(cfg, "train")
val = build_dataset(cfg, "val")
lib = default_mask_library(cfg)

# eight epochs, switching to the argmin stage after four
base = desk_config(epochs=8, stage1_epochs=4)
for variant in (Variant.CE, Variant.FSA_TWO_STAGE):
    model, report = run(train, lib, base.replace(loss=LossVariant(variant)), ModelConfig(), val)
    acc, cm = evaluate(model, val)
    ent = attention_entropy(model, val)
    print(f"\n{variant.value}: val acc {acc:.3f}, leakage {leakage_metric(model, val):.4f}")
    print("mean entropy of the true-class map:", {lib.class_names[c]: round(e, 2) for c, e in ent.items()})
    print(cm.format())
    # heatmaps of the first few validation images, PGM + CSV per class
    export_cams(model, val, f"demo-cams/{variant.value}", indices=range(4))
