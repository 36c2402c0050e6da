"""Command-line entry point: ``fsatrain <subcommand> [options]``.

Every subcommand reads one effective configuration (defaults, then an
optional JSON config file, then ``--set key.path=value`` overrides) and
writes it, with its hash, into each artifact directory it creates.
Errors print one line ``error[<category>]: <message>`` to stderr and exit
with 1 (usage/config), 2 (data integrity), 3 (numeric) or 4 (verification).
"""
from __future__ import annotations

import argparse
import copy
import difflib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import SPLITS, DatasetConfig, generate_split, load_dataset, default_mask_library
from .errors import ConfigurationError, FSAError, InputError, VerificationError
from .losses import LossVariant, Variant
from .masks import load as load_library, save as save_library, validate as validate_library
from .model import ModelConfig
from .training import TrainConfig, config_hash, desk_config, load_checkpoint, train
from . import numcore as nc

OUT_ENV = "FSATRAIN_OUT"
log = logging.getLogger("fsatrain")


def default_config() -> dict:
    return {
        "data": DatasetConfig().to_dict(),
        "model": ModelConfig().to_dict(),
        "masks": {"raster": [8, 8], "sigma": 0.08},
        "train": desk_config().to_dict(),
        "eval": {
            "seeds": [0, 1, 2],
            "variants": [v.value for v in Variant],
            "lambda_fsa_grid": [0.1, 1.0, 10.0, 100.0],
            "lambda_reg_grid": [0.2],
            "cam_samples": 8,
        },
        "workers": 1,
    }


def _all_keys(doc: dict, prefix: str = "") -> list[str]:
    out = []
    for k, v in doc.items():
        out.append(prefix + k)
        if isinstance(v, dict):
            out += _all_keys(v, prefix + k + ".")
    return out


def _unknown(key: str, valid: list[str]) -> ConfigurationError:
    near = difflib.get_close_matches(key, valid, n=1, cutoff=0.0)
    hint = f"; did you mean {near[0]!r}?" if near else ""
    return ConfigurationError(f"unknown config key {key!r}{hint}")


def merge(base: dict, override: dict, prefix: str = "", valid: list[str] | None = None) -> dict:
    """Recursively merge ``override`` into a copy of ``base``; unknown keys are errors."""
    valid = valid if valid is not None else _all_keys(base)
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = prefix + k
        if k not in out:
            raise _unknown(key, valid)
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge(out[k], v, key + ".", valid)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> dict:
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    nested: dict = {}
    cur = nested
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = _parse_value(raw)
    return merge(cfg, nested)


def load_config(path: str | None, overrides=()) -> dict:
    cfg = default_config()
    if path and path != "default":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise InputError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: not valid JSON: {e}") from None
        cfg = merge(cfg, doc)
    for item in overrides:
        cfg = apply_override(cfg, item)
    return cfg


def effective_hash(cfg: dict) -> str:
    return config_hash(cfg)


def write_effective(directory: Path, cfg: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "effective_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    (directory / "config_hash.txt").write_text(effective_hash(cfg) + "\n")


def _objects(cfg: dict):
    try:
        data_cfg = DatasetConfig.from_dict(cfg["data"])
        model_cfg = ModelConfig.from_dict(cfg["model"])
        model_cfg.validate()
        train_cfg = TrainConfig.from_dict(cfg["train"])
    except TypeError as e:
        raise ConfigurationError(str(e)) from None
    return data_cfg, model_cfg, train_cfg


# ---------------------------------------------------------------------------
# subcommands

def _data_dir(out: Path) -> Path:
    return out / "data"


def _load_split(out: Path, split: str):
    path = _data_dir(out) / split
    if not (path / "manifest.json").exists():
        raise InputError(f"{path} has no dataset; run gen-data first")
    return load_dataset(path)


def _library(out: Path, cfg: dict, data_cfg: DatasetConfig, model_cfg: ModelConfig):
    path = out / "masks" / "library.json"
    lib = load_library(path) if path.exists() else default_mask_library(
        data_cfg, tuple(cfg["masks"]["raster"]), cfg["masks"]["sigma"])
    validate_library(lib, model_cfg)
    return lib


def cmd_gen_data(args, cfg, out: Path) -> int:
    data_cfg, _, _ = _objects(cfg)
    for split in SPLITS:
        m = generate_split(data_cfg, split, _data_dir(out), workers=int(cfg["workers"]))
        print(f"{split}: {sum(m['counts'].values())} images, drivers {sorted(map(int, m['drivers']))}")
    write_effective(_data_dir(out), cfg)
    return 0


def cmd_gen_masks(args, cfg, out: Path) -> int:
    data_cfg, model_cfg, _ = _objects(cfg)
    lib = default_mask_library(data_cfg, tuple(cfg["masks"]["raster"]), cfg["masks"]["sigma"])
    validate_library(lib, model_cfg)
    path = save_library(lib, out / "masks" / "library.json")
    write_effective(path.parent, cfg)
    print(f"wrote {path} (masks per class {lib.counts})")
    return 0


def _run_dir(out: Path, variant: str, seed: int) -> Path:
    return out / "runs" / f"{variant}_s{seed}"


def cmd_train(args, cfg, out: Path) -> int:
    data_cfg, model_cfg, train_cfg = _objects(cfg)
    seed = args.seed
    train_cfg = train_cfg.replace(shuffle_seed=seed)
    model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "init_seed": seed})
    run_dir = Path(args.run) if args.run else _run_dir(out, train_cfg.loss.variant.value, seed)
    train_data, val_data = _load_split(out, "train"), _load_split(out, "val")
    lib = _library(out, cfg, data_cfg, model_cfg)
    write_effective(run_dir, cfg)
    from .model import build
    with nc.precision(train_cfg.precision):
        model = build(model_cfg)
    model, report = train(model, train_data, lib, train_cfg, val_data, run_dir, resume_from=args.resume,
                          stop_after=args.stop_after)
    last = report.records[-1]
    print(f"{run_dir}: epoch {last.epoch} loss {last.total:.4f} val_acc {last.val_acc:.4f}")
    return 0


def _latest_checkpoint(run_dir: Path) -> Path:
    cks = sorted((run_dir / "checkpoints").glob("epoch_*"))
    if not cks:
        raise InputError(f"{run_dir} has no checkpoints")
    return cks[-1]


def cmd_eval(args, cfg, out: Path) -> int:
    from .evaluation import attention_entropy, evaluate, leakage_metric

    run_dir = Path(args.run) if args.run else _run_dir(out, Variant.parse(cfg["train"]["loss"]["variant"]).value,
                                                       args.seed)
    ck = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(run_dir)
    model, _, meta = load_checkpoint(ck)
    data = _load_split(out, args.split)
    acc, cm = evaluate(model, data)
    result = {
        "checkpoint": str(ck),
        "split": args.split,
        "accuracy": acc,
        "confusion": cm.to_dict(),
        "leakage": leakage_metric(model, data),
        "attention_entropy": attention_entropy(model, data),
    }
    dest = run_dir / f"eval_{args.split}"
    write_effective(dest, cfg)
    (dest / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    print(f"{args.split} accuracy {acc:.4f}\n{cm.format()}")
    return 0


def cmd_cams(args, cfg, out: Path) -> int:
    from .evaluation import export_cams, export_epoch_grid

    run_dir = Path(args.run) if args.run else _run_dir(out, Variant.parse(cfg["train"]["loss"]["variant"]).value,
                                                       args.seed)
    data = _load_split(out, args.split)
    n = min(int(cfg["eval"]["cam_samples"]), len(data))
    idx = list(range(n))
    dest = run_dir / "cams"
    model, _, _ = load_checkpoint(_latest_checkpoint(run_dir))
    export_cams(model, data, dest / "final", idx)
    cks = sorted((run_dir / "checkpoints").glob("epoch_*"))
    export_epoch_grid(cks, data, dest / "epochs", idx)
    write_effective(dest, cfg)
    print(f"wrote CAMs for {n} samples and a {len(cks)}-row epoch grid to {dest}")
    return 0


def cmd_sweep(args, cfg, out: Path) -> int:
    from .experiments import sweep

    data_cfg, model_cfg, train_cfg = _objects(cfg)
    lib = _library(out, cfg, data_cfg, model_cfg)
    dest = out / "sweep"
    write_effective(dest, cfg)
    rows = sweep(train_cfg, model_cfg, _load_split(out, "train"), _load_split(out, "val"), lib,
                 cfg["eval"]["lambda_fsa_grid"], cfg["eval"]["lambda_reg_grid"], cfg["eval"]["seeds"][:args.seeds]
                 if args.seeds else cfg["eval"]["seeds"], dest / "runs", dest / "sweep.csv")
    print(f"wrote {len(rows)} rows to {dest / 'sweep.csv'}")
    return 0


def cmd_ablate(args, cfg, out: Path) -> int:
    from .experiments import ablation_harness

    data_cfg, model_cfg, train_cfg = _objects(cfg)
    lib = _library(out, cfg, data_cfg, model_cfg)
    seeds = list(range(args.seeds)) if args.seeds else cfg["eval"]["seeds"]
    dest = out / "ablation"
    write_effective(dest, cfg)
    test_manifest = str((_data_dir(out) / "test" / "manifest.json").resolve())
    report = ablation_harness(train_cfg, model_cfg, _load_split(out, "train"), _load_split(out, "val"),
                              _load_split(out, "test"), lib, seeds, cfg["eval"]["variants"], dest / "runs",
                              test_manifest)
    (dest / "report.json").write_text(report.dumps())
    (dest / "report.txt").write_text(report.format() + "\n")
    print(report.format())
    return 0


def cmd_gradcheck(args, cfg, out: Path) -> int:
    from . import gradcheck

    report = gradcheck.run(range(args.seeds), progress=lambda m: print(m, file=sys.stderr))
    print(report.format())
    dest = out / "gradcheck"
    write_effective(dest, cfg)
    (dest / "gradcheck.txt").write_text(report.format() + "\n")
    if not report.ok:
        raise VerificationError("finite-difference check exceeded the tolerance")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic train/val/test splits"),
    "gen-masks": (cmd_gen_masks, "write the default attention mask library"),
    "train": (cmd_train, "train one model"),
    "eval": (cmd_eval, "accuracy, confusion, leakage and entropy of a checkpoint"),
    "cams": (cmd_cams, "export CAM heatmaps and an epoch grid"),
    "sweep": (cmd_sweep, "lambda sweep, CSV of train/val accuracy"),
    "ablate": (cmd_ablate, "five-variant ablation table"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient verification"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default", help="JSON config file (default: built-in defaults)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, value parsed as JSON (repeatable)")
    common.add_argument("--out", default=None, help=f"output root (env {OUT_ENV}, default ./fsatrain-out)")
    common.add_argument("--precision", choices=["float32", "float64"], default=None)
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fsatrain", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("train", "eval", "cams"):
            sp.add_argument("--variant", default=None, help="loss variant, e.g. fsa_two_stage")
            sp.add_argument("--seed", type=int, default=0, help="model init and shuffle seed")
            sp.add_argument("--run", default=None, help="run directory (default <out>/runs/<variant>_s<seed>)")
        if name == "train":
            sp.add_argument("--resume", default=None, help="checkpoint directory to continue from")
            sp.add_argument("--stop-after", type=int, default=None, help="stop after this epoch")
        if name == "eval":
            sp.add_argument("--checkpoint", default=None)
        if name in ("eval", "cams"):
            sp.add_argument("--split", default="test", choices=SPLITS)
        if name in ("sweep", "ablate"):
            sp.add_argument("--seeds", type=int, default=None, help="use seeds 0..N-1")
        if name == "gradcheck":
            sp.add_argument("--seeds", type=int, default=20)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = list(args.overrides)
        if getattr(args, "variant", None):
            overrides.append(f"train.loss.variant={json.dumps(Variant.parse(args.variant).value)}")
        if args.precision:
            overrides.append(f'train.precision="{args.precision}"')
        if args.deterministic is not None:
            overrides.append(f"train.deterministic={json.dumps(args.deterministic)}")
        cfg = load_config(args.config, overrides)
        LossVariant(**cfg["train"]["loss"])
        out = Path(args.out or os.environ.get(OUT_ENV) or "fsatrain-out")
        return COMMANDS[args.command][0](args, cfg, out)
    except FSAError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
