"""``ads`` command line.

Exit codes: 0 success, 2 bad input or configuration, 3 numeric divergence,
4 verification failure (grad-check).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np
import yaml

from . import checkpoint, harness
from . import tensor as T
from .backbone import DualEncoder
from .config import VARIANTS, ConfigError, RunConfig, run_config_from_dict
from .data import FormatError, VersionError, load_dataset, save_dataset
from .model import AdsModel
from .training import (DivergenceError, EPOCH_LOG_HEADER, count_trainable_params, freeze_backbone,
                       trainable_param_formula)

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4
SPLITS = ("train", "val", "test")


class InputError(Exception):
    """Bad path or inconsistent inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def load_config(path: str | None, preset_name: str | None = None, overrides=()) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if preset_name:
        raw["preset"] = preset_name
    for item in overrides:
        keys, value = _parse_override(item)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {k} is not a section")
        node[keys[-1]] = value
    return run_config_from_dict(raw)


def echo_config(rc: RunConfig, out_dir: str) -> None:
    with open(os.path.join(out_dir, "config.yaml"), "w") as fh:
        yaml.safe_dump(rc.to_dict(), fh, sort_keys=False)


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def load_splits(data_dir: str, rc: RunConfig):
    splits = []
    for name in SPLITS:
        path = os.path.join(data_dir, f"{name}.adsd")
        if not os.path.exists(path):
            raise InputError(f"missing dataset file {path} (run `ads generate` first)")
        splits.append(load_dataset(path))
    spec = splits[0].spec
    for f in ("m", "n", "patch_dim", "vocab_size"):
        if getattr(spec, f) != getattr(rc.model, f):
            raise ConfigError(f"dataset {f}={getattr(spec, f)} disagrees with model.{f}={getattr(rc.model, f)}")
    return tuple(splits)


def get_backbone(rc: RunConfig, path: str | None, out_dir: str | None = None) -> DualEncoder:
    if path:
        obj = checkpoint.load(path, expect_config=rc.model)
        if isinstance(obj, AdsModel):
            obj = obj.backbone
        return obj
    t0 = time.perf_counter()
    backbone, losses = harness.pretrain_backbone(rc)
    print(f"pretrained backbone: {len(losses)} steps, final loss "
          f"{np.mean(losses[-20:]) if losses else float('nan'):.4f} ({time.perf_counter() - t0:.1f}s)")
    if out_dir:
        checkpoint.save(os.path.join(out_dir, "backbone.ads1"), backbone, {"pretrain_steps": len(losses)})
    return backbone


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args, rc: RunConfig) -> int:
    out = _ensure_dir(args.out)
    splits = harness.make_splits(rc.data)
    for name, ds in zip(SPLITS, splits):
        save_dataset(os.path.join(out, f"{name}.adsd"), ds)
        print(f"{name}: {len(ds)} samples, label mean {ds.labels.mean():.3f}")
    echo_config(rc, out)
    return EXIT_OK


def cmd_pretrain(args, rc: RunConfig) -> int:
    out = _ensure_dir(args.out)
    backbone, losses = harness.pretrain_backbone(rc)
    checkpoint.save(os.path.join(out, "backbone.ads1"), backbone, {"pretrain_steps": len(losses)})
    with open(os.path.join(out, "pretrain_log.csv"), "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i + 1},{v:.9g}\n" for i, v in enumerate(losses))
    echo_config(rc, out)
    print(f"saved {os.path.join(out, 'backbone.ads1')} (final loss {np.mean(losses[-20:]):.4f})")
    return EXIT_OK


def _write_outcomes(out: str, outcomes, append: bool) -> None:
    harness.write_results(os.path.join(out, "results.csv"), [o.row for o in outcomes], append=append)
    harness.write_timings(os.path.join(out, "timings.csv"), outcomes, append=append)


def cmd_train(args, rc: RunConfig) -> int:
    out = _ensure_dir(args.out)
    splits = load_splits(args.data, rc)
    variant = args.variant or rc.train.variant
    seed = rc.train.seed if args.seed is None else args.seed
    backbone = get_backbone(rc, args.backbone, out)
    outcome = harness.run_variant(backbone, splits, rc, variant, seed, keep_model=True)
    model = outcome.model
    n = count_trainable_params(model)
    expected = trainable_param_formula(model.cfg, variant)
    print(f"{variant}: {n} trainable parameters (closed form {expected}){'' if n == expected else '  MISMATCH'}")
    stem = f"{variant.lower()}_seed{seed}"
    checkpoint.save(os.path.join(out, f"{stem}.ads1"), model, {"seed": seed})
    with open(os.path.join(out, f"{stem}_epochs.csv"), "w") as fh:
        fh.write(EPOCH_LOG_HEADER + "\n")
        fh.writelines(h.csv() + "\n" for h in outcome.history)
    _write_outcomes(out, [outcome], append=True)
    echo_config(rc, out)
    print(outcome.row.csv())
    return EXIT_OK


def _suite(args, rc: RunConfig, jobs, title: str) -> int:
    out = _ensure_dir(args.out)
    splits = load_splits(args.data, rc)
    backbone = get_backbone(rc, args.backbone, out)
    outcomes = harness.run_jobs(backbone, splits, rc, jobs, workers=args.parallel_seeds)
    _write_outcomes(out, outcomes, append=False)
    echo_config(rc, out)
    table = harness.summarize([o.row for o in outcomes])
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(table)
    print(title)
    print(table, end="")
    return EXIT_OK


def cmd_ablate(args, rc: RunConfig) -> int:
    jobs = [(v, s, None) for v in harness.ABLATION_VARIANTS for s in rc.seeds]
    return _suite(args, rc, jobs, "ablation (mean test accuracy over seeds)")


def cmd_sweep_layers(args, rc: RunConfig) -> int:
    jobs = [("ADS", s, k) for k in range(1, rc.model.L + 1) for s in rc.seeds]
    return _suite(args, rc, jobs, "adapter placement sweep (ADS, adapters in layers K..L)")


def cmd_peft_compare(args, rc: RunConfig) -> int:
    jobs = [(v, s, None) for v in harness.PEFT_VARIANTS for s in rc.seeds]
    return _suite(args, rc, jobs, "PEFT comparison")


def cmd_grad_check(args, rc: RunConfig) -> int:
    variants = args.variants.split(",") if args.variants else VARIANTS
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    t0 = time.perf_counter()
    report = harness.grad_check(rc.model, variants, entries=args.entries, seed=args.seed)
    print("tensor,max_rel_err")
    for line in report.lines():
        print(line)
    name, err = report.worst
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: max relative error {err:.3e} ({name}), tolerance {report.tolerance:g}, "
          f"{len(report.errors)} tensors, {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_inspect(args, rc: RunConfig | None) -> int:
    if not os.path.exists(args.checkpoint):
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    model = checkpoint.load(args.checkpoint, expect_config=rc.model if rc is not None else None)
    if not isinstance(model, AdsModel):
        raise InputError(f"{args.checkpoint} holds a bare backbone, not a trained model")
    path = args.data
    if os.path.isdir(path):
        path = os.path.join(path, "test.adsd")
    if not os.path.exists(path):
        raise InputError(f"dataset not found: {path}")
    ds = load_dataset(path)
    for f in ("m", "n", "patch_dim", "vocab_size"):
        if getattr(ds.spec, f) != getattr(model.cfg, f):
            raise ConfigError(f"dataset {f} disagrees with checkpoint config")
    idx = [int(i) for i in args.samples.split(",")]
    if min(idx) < 0 or max(idx) >= len(ds):
        raise InputError(f"sample index out of range [0, {len(ds)})")
    att, norms = harness.inspect_rows(model, ds, idx)
    if model.sharing == "NONE":
        print(f"no sharing states ({model.variant} variant)")
    else:
        print("\n".join(att))
    print()
    print("\n".join(norms))
    if args.out:
        _ensure_dir(args.out)
        if att:
            with open(os.path.join(args.out, "attention.csv"), "w") as fh:
                fh.write("\n".join(att) + "\n")
        with open(os.path.join(args.out, "adapter_norms.csv"), "w") as fh:
            fh.write("\n".join(norms) + "\n")
    return EXIT_OK


def cmd_count_params(args, rc: RunConfig) -> int:
    cfg = rc.model
    print("variant,K,trainable_params")
    for v in VARIANTS:
        ks = range(1, cfg.L + 1) if v in ("ADS", "V2T", "NO_SHARING") and args.all_k else [cfg.K]
        for k in ks:
            print(f"{v},{k},{trainable_param_formula(cfg.replace(K=k), v)}")
    if args.verify:
        with T.precision(cfg.dtype):
            bb = DualEncoder(cfg)
            for v in VARIANTS:
                m = AdsModel(bb, v, cfg)
                freeze_backbone(m)
                if count_trainable_params(m) != trainable_param_formula(cfg, v):
                    print(f"count mismatch for {v}", file=sys.stderr)
                    return EXIT_VERIFY
        print("instantiated counts match the closed form")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ads", description="Adapter-state sharing experiments on a toy dual encoder.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False, out=True, backbone=False, parallel=False):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--preset", choices=("toy", "paper"), help="base preset (overrides the file's)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        if data:
            sp.add_argument("--data", required=True, help="directory holding train/val/test .adsd files")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        if backbone:
            sp.add_argument("--backbone", help="pretrained backbone checkpoint (skips pretraining)")
        if parallel:
            sp.add_argument("--parallel-seeds", type=int, default=1, metavar="N",
                            help="run up to N jobs concurrently (capped by ADS_THREADS)")
        return sp

    common(sub.add_parser("generate", help="write train/val/test datasets"))
    common(sub.add_parser("pretrain", help="contrastively pretrain a backbone"))
    t = common(sub.add_parser("train", help="train one variant"), data=True, backbone=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--seed", type=int)
    common(sub.add_parser("ablate", help="ADS vs NO_SHARING vs V2T vs NO_ADAPTERS"),
           data=True, backbone=True, parallel=True)
    common(sub.add_parser("sweep-layers", help="ADS with adapters in K..L for every K"),
           data=True, backbone=True, parallel=True)
    common(sub.add_parser("peft-compare", help="ADS vs adapters vs LoRA vs prompt tuning"),
           data=True, backbone=True, parallel=True)
    g = common(sub.add_parser("grad-check", help="finite-difference check of every trainable tensor"), out=False)
    g.add_argument("--variants", help="comma-separated subset of variants")
    g.add_argument("--entries", type=int, default=4, help="random coordinates probed per tensor")
    g.add_argument("--seed", type=int, default=0)
    i = sub.add_parser("inspect", help="sharing attention rows and adapter norms for some samples")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True, help=".adsd file or directory (uses test.adsd)")
    i.add_argument("--samples", default="0", help="comma-separated sample indices")
    i.add_argument("--config", help="if given, the checkpoint must match its model section")
    i.add_argument("--out", help="also write attention.csv / adapter_norms.csv here")
    c = common(sub.add_parser("count-params", help="closed-form trainable-parameter counts"), out=False)
    c.add_argument("--all-k", action="store_true", help="list adapter variants for every K")
    c.add_argument("--verify", action="store_true", help="also instantiate each variant and compare")
    return p


COMMANDS = {
    "generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train, "ablate": cmd_ablate,
    "sweep-layers": cmd_sweep_layers, "peft-compare": cmd_peft_compare, "grad-check": cmd_grad_check,
    "inspect": cmd_inspect, "count-params": cmd_count_params,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "inspect":
            rc = load_config(args.config) if args.config else None
        else:
            rc = load_config(args.config, args.preset, args.set)
        with T.precision(rc.model.dtype if rc is not None else T.get_dtype()):
            return COMMANDS[args.command](args, rc)
    except (ConfigError, InputError, FormatError, VersionError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
