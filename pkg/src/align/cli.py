"""``align`` command line: synth, train, eval, explain, theory-check.

Exit status is 0 on success, 1 for invalid input or configuration and 2
when a check or lemma reports a violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_arrays, load_module, save_module
from .config import ConfigError, RunConfig, load_config
from .data import build_splits, read_dataset, stack, write_dataset
from .gradcam import explain
from .metrics import evaluate, mask_iou, masker_masks, ood_eval, perturbation_eval
from .models import ClassifierNet, MaskerNet
from .netpbm import NetpbmError, read_image, write_image
from .tensor import Tensor, no_grad, parameters_hash
from .theory import run_all
from .trainer import IsolationError, train_align, write_trace

logger = logging.getLogger("align")


class UsageError(ValueError):
    pass


class ViolationError(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------------


def _prepare_out(out, force: bool, dry_run: bool) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty; pass --force to write into it")
    if not dry_run:
        out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.json").write_text(cfg.to_json() + "\n")


def _arch_meta(net) -> dict:
    if isinstance(net, ClassifierNet):
        return {"kind": "classifier", "in_channels": net.in_channels, "num_classes": net.num_classes,
                "channels": list(net.channels), "cam_layer_index": net.cam_layer_index}
    return {"kind": "masker", "in_channels": net.in_channels, "hidden": net.hidden}


def _load_net(path: Path, kind: str):
    if not path.exists():
        raise UsageError(f"checkpoint {path} not found")
    _, meta = load_arrays(path)
    arch = meta.get("arch", {})
    if arch.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, header says {arch.get('kind')!r}")
    if kind == "classifier":
        net = ClassifierNet(arch["in_channels"], arch["num_classes"], tuple(arch["channels"]),
                            arch["cam_layer_index"])
    else:
        net = MaskerNet(arch["in_channels"], arch["hidden"])
    load_module(path, net)
    net.eval()
    return net


def _load_run(ckpt_dir: Path):
    ckpt_dir = Path(ckpt_dir)
    if (ckpt_dir / "checkpoints").is_dir():
        ckpt_dir = ckpt_dir / "checkpoints"
    classifier = _load_net(ckpt_dir / "classifier.ckpt", "classifier")
    masker_path = ckpt_dir / "masker.ckpt"
    masker = _load_net(masker_path, "masker") if masker_path.exists() else None
    return classifier, masker


def _split_arrays(samples):
    x, y, g, _ = stack(samples)
    return x, y, g


def _write_report(report, folder: Path, stem: str) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    report.write_json(folder / f"{stem}.json")
    report.write_csv(folder / f"{stem}.csv", stem)


# -- commands ------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out: Path, dry_run: bool = False) -> dict:
    if dry_run:
        return {"dry_run": True}
    splits = build_splits(cfg.data)
    manifest = write_dataset(out, splits, cfg.data)
    _echo_config(cfg, out)
    return manifest


def cmd_train(cfg: RunConfig, data_dir, out: Path, dry_run: bool = False, check_isolation: bool = False) -> dict:
    data_dir = Path(data_dir)
    if not (data_dir / "manifest.json").exists():
        raise UsageError(f"no manifest.json under {data_dir}; run `align synth` first")
    if dry_run:
        return {"dry_run": True}
    splits, manifest = read_dataset(data_dir)
    source = int(manifest["spec"]["source_domain"])
    num_classes = int(manifest["spec"]["num_classes"])
    classifier, masker, state, metrics = train_align(
        splits[source]["train"], splits[source]["val"], cfg.schedule, cfg.losses,
        num_classes=num_classes, check_isolation=check_isolation)
    ckpt = out / cfg.paths.checkpoints
    ckpt.mkdir(parents=True, exist_ok=True)
    save_module(ckpt / "classifier.ckpt", classifier, {"arch": _arch_meta(classifier),
                                                       "best_iteration": state.best_iteration})
    save_module(ckpt / "masker.ckpt", masker, {"arch": _arch_meta(masker), "best_iteration": state.best_iteration})
    write_trace(out / "trace.csv", state.history)
    _write_report(metrics, out / cfg.paths.reports, "val")
    _echo_config(cfg, out)
    return {"best_iteration": state.best_iteration, "best_val_acc": state.best_val_acc,
            "stopped_early": state.stopped_early, "iterations": state.iteration}


def cmd_eval(cfg: RunConfig, checkpoint, data_dir, mode: str, out: Path, dry_run: bool = False) -> dict:
    if mode not in ("id", "ood", "perturb"):
        raise UsageError(f"mode must be id, ood or perturb, got {mode!r}")
    data_dir = Path(data_dir)
    if not (data_dir / "manifest.json").exists():
        raise UsageError(f"no manifest.json under {data_dir}")
    classifier, masker = _load_run(Path(checkpoint))
    if dry_run:
        return {"dry_run": True}
    splits, manifest = read_dataset(data_dir)
    source = int(manifest["spec"]["source_domain"])
    split = cfg.eval.split
    before = parameters_hash(classifier.params() + (masker.params() if masker else []))
    reports = out / cfg.paths.reports
    summary = {"mode": mode, "split": split}
    if mode == "id":
        x, y, g = _split_arrays(splits[source][split])
        report = evaluate(classifier, masker, x, y, g, cfg.eval.selector())
        _write_report(report, reports, "id")
        summary["report"] = report.to_dict()
    elif mode == "ood":
        targets = {d: _split_arrays(parts[split]) for d, parts in splits.items() if d != source}
        report = ood_eval(classifier, masker, targets, source, cfg.eval.selector(), explanations=True)
        for d, r in report.per_domain.items():
            _write_report(r, reports, f"ood_domain{d}")
        _write_report(report, reports, "ood")
        summary["report"] = report.to_dict()
    else:
        x, y, g = _split_arrays(splits[source][split])
        report = perturbation_eval(classifier, x, y, cfg.eval.mask_source, cfg.eval.sigma,
                                   masker=masker, gt_masks=g, seed=cfg.data.seed)
        _write_report(report, reports, f"perturb_{cfg.eval.mask_source}")
        summary["report"] = report.to_dict()
    after = parameters_hash(classifier.params() + (masker.params() if masker else []))
    if after != before:
        raise IsolationError("evaluation changed model parameters")
    _echo_config(cfg, out)
    return summary


def cmd_explain(checkpoint, image_path, out: Path, class_index: int | None = None,
                cfg: RunConfig | None = None, dry_run: bool = False) -> dict:
    cfg = cfg or RunConfig()
    classifier, masker = _load_run(Path(checkpoint))
    image = read_image(image_path)
    if image.shape[0] != classifier.in_channels:
        raise UsageError(f"image has {image.shape[0]} channels, the classifier expects {classifier.in_channels}")
    if dry_run:
        return {"dry_run": True}
    x = image[None]
    if class_index is None:
        class_index = int(np.argmax(classifier.predict_proba(x)[0]))
    if not 0 <= class_index < classifier.num_classes:
        raise UsageError(f"class {class_index} out of range for {classifier.num_classes} classes")
    sal = explain(classifier, x, [class_index], cam_root=cfg.losses.cam_root)
    write_image(out / "heatmap.pgm", np.clip(sal.normalized.data[0], 0.0, 1.0))
    result = {"class": class_index, "heatmap": str(out / "heatmap.pgm")}
    if masker is not None:
        write_image(out / "mask.pgm", masker_masks(masker, x)[0])
        result["mask"] = str(out / "mask.pgm")
    return result


def cmd_theory(trials: int, seed: int, out: Path, dry_run: bool = False) -> dict:
    if trials < 1:
        raise UsageError("trials must be >= 1")
    if dry_run:
        return {"dry_run": True}
    reports = run_all(trials, seed)
    summary = {}
    for name, r in reports.items():
        (out / f"{name}.json").write_text(r.to_json() + "\n")
        summary[name] = {"trials": r.trials, "violations": r.violations}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if any(r.violations for r in reports.values()):
        raise ViolationError("lemma violations: " + ", ".join(
            f"{n}={r.violations}" for n, r in reports.items() if r.violations))
    return summary


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides data.seed and schedule.seed")
    common.add_argument("--out", required=True, help="output directory; everything is written under it")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
    common.add_argument("--dry-run", action="store_true", help="validate inputs and configuration only")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="align", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")
    p = sub.add_parser("train", parents=[common], help="warm-up then joint training on the source domain")
    p.add_argument("--data", required=True, help="dataset directory written by `synth`")
    p.add_argument("--check-isolation", action="store_true", help="hash the frozen network around every step")
    p = sub.add_parser("eval", parents=[common], help="in-domain, held-out-domain or perturbation metrics")
    p.add_argument("--checkpoint", required=True, help="run directory written by `train`")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("id", "ood", "perturb"), default="id")
    p = sub.add_parser("explain", parents=[common], help="Grad-CAM heatmap and masker output as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="P6 image")
    p.add_argument("--class", dest="class_index", type=int, help="class to explain (default: argmax)")
    p = sub.add_parser("theory-check", parents=[common], help="numerical lemma checks")
    p.add_argument("--trials", type=int, default=200)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = _prepare_out(args.out, args.force, args.dry_run)
        if args.dry_run:
            print(cfg.to_json())
        if args.command == "synth":
            result = cmd_synth(cfg, out, args.dry_run)
            result = {"counts": result.get("counts"), "out": str(out)} if not args.dry_run else result
        elif args.command == "train":
            result = cmd_train(cfg, args.data, out, args.dry_run, args.check_isolation)
        elif args.command == "eval":
            result = cmd_eval(cfg, args.checkpoint, args.data, args.mode, out, args.dry_run)
        elif args.command == "explain":
            result = cmd_explain(args.checkpoint, args.image, out, args.class_index, cfg, args.dry_run)
        else:
            seed = args.seed if args.seed is not None else cfg.data.seed
            result = cmd_theory(args.trials, seed, out, args.dry_run)
    except (ViolationError, IsolationError) as exc:
        print(f"align: violation: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, CheckpointError, NetpbmError, FileNotFoundError, ValueError) as exc:
        print(f"align: error: {exc}", file=sys.stderr)
        return 1
    if not args.dry_run:
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
