"""Command-line entry point: `cpmn {synth|train|eval|infer}`.

Settings resolve in order: built-in defaults < config file (`--config`, flat
`key = value` lines with dotted keys) < environment variables (prefix CPMN_,
dots become underscores, upper-cased: `CPMN_TRAIN_EPOCHS`) < command flags.
Every run echoes the fully resolved settings to `config.cfg` in its output
directory so a run can be reproduced from that file alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset_io, inference, metrics_report, trainer
from .core_types import CPMNConfig, Phase
from .nets import bottleneck_extent
from .synth_phantom import PhantomGenerationError, PhantomSpec, generate_dataset

CONFIG_KEYS = (
    "data.patch_size",
    "loss.lambda1",
    "loss.lambda2",
    "loss.lambda3",
    "loss.focal_gamma",
    "loss.focal_alpha",
    "loss.center_lr",
    "ifa.alpha",
    "ifa.beta",
    "train.lr",
    "train.lr_min",
    "train.batch_size",
    "train.epochs",
    "train.ablation",
    "net.width_scale",
    "run.seed",
    "eval.threshold",
)


def parse_flat_config(path: str | Path) -> dict[str, str]:
    """Parse `key = value` lines; blank lines and `#` comments are ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def _env_overrides() -> dict[str, str]:
    values = {}
    for key in CONFIG_KEYS:
        env_name = "CPMN_" + key.replace(".", "_").upper()
        if env_name in os.environ:
            values[key] = os.environ[env_name]
    return values


def _parse_patch(value: str) -> tuple[int, int, int]:
    parts = [int(p) for p in value.replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ValueError(f"patch size must be 1 or 3 integers, got {value!r}")
    return tuple(parts)


def resolve_ifa_auto(patch_size: tuple[int, int, int]) -> tuple[int, int]:
    """Desk default: granularity 8 when the bottleneck tiles evenly, else 1;
    connection range = node count - 1 (fully connected)."""
    ext = bottleneck_extent(patch_size)
    n_full = ext[0] * ext[1] * ext[2]
    beta = 8 if all(e % 2 == 0 for e in ext) and n_full // 8 >= 2 else 1
    alpha = max(n_full // beta - 1, 1)
    return alpha, beta


def assemble_settings(args: argparse.Namespace) -> dict[str, str]:
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        values.update(parse_flat_config(args.config))
    values.update(_env_overrides())
    flag_map = {
        "patch_size": "data.patch_size",
        "lambda1": "loss.lambda1",
        "lambda2": "loss.lambda2",
        "lambda3": "loss.lambda3",
        "ifa_alpha": "ifa.alpha",
        "ifa_beta": "ifa.beta",
        "lr": "train.lr",
        "lr_min": "train.lr_min",
        "batch_size": "train.batch_size",
        "epochs": "train.epochs",
        "ablation": "train.ablation",
        "width_scale": "net.width_scale",
        "seed": "run.seed",
        "threshold": "eval.threshold",
    }
    for attr, key in flag_map.items():
        flag_value = getattr(args, attr, None)
        if flag_value is not None:
            values[key] = str(flag_value)
    return values


def build_config(values: dict[str, str]) -> tuple[CPMNConfig, dict]:
    """Resolve merged settings into a CPMNConfig plus trainer extras."""
    defaults = CPMNConfig()
    patch = _parse_patch(values.get("data.patch_size", "96,224,224"))
    alpha_raw = values.get("ifa.alpha", "auto")
    beta_raw = values.get("ifa.beta", "auto")
    if alpha_raw == "auto" or beta_raw == "auto":
        auto_alpha, auto_beta = resolve_ifa_auto(patch)
        alpha = auto_alpha if alpha_raw == "auto" else int(alpha_raw)
        beta = auto_beta if beta_raw == "auto" else int(beta_raw)
    else:
        alpha, beta = int(alpha_raw), int(beta_raw)
    config = CPMNConfig(
        patch_size=patch,
        lambda1=float(values.get("loss.lambda1", defaults.lambda1)),
        lambda2=float(values.get("loss.lambda2", defaults.lambda2)),
        lambda3=float(values.get("loss.lambda3", defaults.lambda3)),
        alpha=alpha,
        beta=beta,
        center_lr=float(values.get("loss.center_lr", defaults.center_lr)),
        focal_gamma=float(values.get("loss.focal_gamma", defaults.focal_gamma)),
        focal_alpha=float(values.get("loss.focal_alpha", defaults.focal_alpha)),
        lr=float(values.get("train.lr", defaults.lr)),
        lr_min=float(values.get("train.lr_min", defaults.lr_min)),
        batch_size=int(values.get("train.batch_size", defaults.batch_size)),
        epochs=int(values.get("train.epochs", defaults.epochs)),
        seed=int(values.get("run.seed", defaults.seed)),
        threshold=float(values.get("eval.threshold", defaults.threshold)),
    )
    extras = {
        "ablation": values.get("train.ablation", "mls_ifa_ifd"),
        "width_scale": float(values.get("net.width_scale", 1.0)),
    }
    return config, extras


def echo_config(config: CPMNConfig, extras: dict, path: Path) -> None:
    lines = [
        f"data.patch_size = {','.join(str(p) for p in config.patch_size)}",
        f"loss.lambda1 = {config.lambda1}",
        f"loss.lambda2 = {config.lambda2}",
        f"loss.lambda3 = {config.lambda3}",
        f"loss.focal_gamma = {config.focal_gamma}",
        f"loss.focal_alpha = {config.focal_alpha}",
        f"loss.center_lr = {config.center_lr}",
        f"ifa.alpha = {config.alpha}",
        f"ifa.beta = {config.beta}",
        f"train.lr = {config.lr}",
        f"train.lr_min = {config.lr_min}",
        f"train.batch_size = {config.batch_size}",
        f"train.epochs = {config.epochs}",
        f"train.ablation = {extras['ablation']}",
        f"net.width_scale = {extras['width_scale']}",
        f"run.seed = {config.seed}",
        f"eval.threshold = {config.threshold}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _run_dir(args: argparse.Namespace, tag: str) -> Path:
    if args.out:
        return Path(args.out)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path("runs") / f"{stamp}-{tag}"


def make_split(case_ids_by_label: dict[int, list[str]], train_frac, val_frac, seed) -> dict:
    """Stratified deterministic train/val/test assignment."""
    split: dict[str, str] = {}
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 23])
    for label in sorted(case_ids_by_label):
        ids = list(case_ids_by_label[label])
        order = rng.permutation(len(ids))
        n_train = int(round(len(ids) * train_frac))
        n_val = int(round(len(ids) * val_frac))
        for rank, idx in enumerate(order):
            if rank < n_train:
                split[ids[idx]] = "train"
            elif rank < n_train + n_val:
                split[ids[idx]] = "val"
            else:
                split[ids[idx]] = "test"
    return split


def cmd_synth(args: argparse.Namespace) -> int:
    extent = _parse_patch(args.extent)
    spec = PhantomSpec(
        extent=extent,
        vessel_count=args.vessels,
        embolism_count=args.embolisms,
        noise_sigma=args.noise_sigma,
        seed=args.seed if args.seed is not None else 0,
    )
    seed = spec.seed
    cases = generate_dataset(spec, args.pe, args.normal, seed)
    by_label: dict[int, list[str]] = {0: [], 1: []}
    for case in cases:
        by_label[case.label].append(case.case_id)
    split = make_split(by_label, args.train_frac, args.val_frac, seed)
    out = Path(args.out)
    manifest = dataset_io.save_dataset(cases, split, out)
    counts = {name: sum(1 for v in split.values() if v == name) for name in ("train", "val", "test")}
    print(
        f"wrote {len(manifest.cases)} cases ({args.pe} PE / {args.normal} normal) to {out}; "
        f"split: {counts}"
    )
    return 0


def _load_cases(data_dir: str) -> tuple[dataset_io.DatasetManifest, list]:
    manifest, iterator = dataset_io.load_dataset(data_dir)
    return manifest, list(iterator)


def cmd_train(args: argparse.Namespace) -> int:
    settings = assemble_settings(args)
    config, extras = build_config(settings)
    if extras["ablation"] not in trainer.ABLATIONS:
        print(
            f"error: invalid ablation {extras['ablation']!r}; "
            f"valid names: {', '.join(trainer.ABLATIONS)}",
            file=sys.stderr,
        )
        return 2
    manifest, cases = _load_cases(args.data)
    run_dir = _run_dir(args, f"train-{extras['ablation']}")
    run_dir.mkdir(parents=True, exist_ok=True)
    effective, _ = trainer.resolve_ablation(extras["ablation"], config)
    echo_config(effective, extras, run_dir / "config.cfg")
    state = trainer.fit(
        cases,
        manifest.split,
        config,
        out_dir=run_dir,
        width_scale=extras["width_scale"],
        ablation=extras["ablation"],
    )
    print(
        f"trained {extras['ablation']} for {config.epochs} epochs; "
        f"best val metric {state.best_metric:.4f} at epoch {state.best_epoch}; "
        f"checkpoints in {run_dir / 'checkpoints'}"
    )
    return 0


def _eval_net_and_phase(checkpoint_path: str, phase_flag: str):
    state = trainer.load_checkpoint(checkpoint_path)
    if phase_flag == "auto":
        phase = state.plan.eval_phase
    else:
        phase = Phase(phase_flag)
    return state, phase


def cmd_eval(args: argparse.Namespace) -> int:
    if args.compare:
        return _cmd_compare(args)
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 1
    state, phase = _eval_net_and_phase(args.checkpoint, args.phase)
    config = state.config
    manifest, cases = _load_cases(args.data)
    chosen = [c for c in cases if manifest.split[c.case_id] == args.split]
    if not chosen:
        print(f"error: no cases in split {args.split!r}", file=sys.stderr)
        return 1
    net = state.nets[phase]
    rows = []
    for case in chosen:
        volume = case.nct if phase is Phase.NCT else case.ctpa
        pred = inference.predict_case(net, volume, config, with_cam=False)
        rows.append(
            metrics_report.CaseEval(
                case_id=case.case_id,
                label=case.label,
                score=pred.pe_probability,
                pred_mask=inference.binarize_probmap(pred.seg_probmap, config.threshold),
                true_mask=case.mask.labels,
            )
        )
    run_dir = _run_dir(args, "eval")
    run_dir.mkdir(parents=True, exist_ok=True)
    roc_path = Path(args.roc_out) if args.roc_out else run_dir / "roc.png"
    report = metrics_report.evaluate(rows, config.threshold, roc_out=roc_path)
    report["checkpoint"] = str(args.checkpoint)
    report["phase"] = phase.value
    report["split"] = args.split
    metrics_report.write_report(report, run_dir / "report.json")
    echo_config(config, {"ablation": state.plan.name, "width_scale": state.width_scale},
                run_dir / "config.cfg")
    dice_text = "n/a" if report["mean_dice"] is None else f"{report['mean_dice']:.3f}"
    print(
        f"evaluated {len(rows)} {args.split} cases on the {phase.value} pathway: "
        f"sens {report['sensitivity']:.3f} spec {report['specificity']:.3f} "
        f"auc {report['auc']:.3f} dice {dice_text}; report in {run_dir}"
    )
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    path_a, path_b = args.compare
    report_a = json.loads(Path(path_a).read_text(encoding="utf-8"))
    report_b = json.loads(Path(path_b).read_text(encoding="utf-8"))
    rows_a = {row["case_id"]: row for row in report_a["per_case"]}
    rows_b = {row["case_id"]: row for row in report_b["per_case"]}
    if set(rows_a) != set(rows_b):
        print("error: reports cover different case sets", file=sys.stderr)
        return 1
    ids = sorted(rows_a)
    labels = [rows_a[i]["label"] for i in ids]
    scores_a = [rows_a[i]["score"] for i in ids]
    scores_b = [rows_b[i]["score"] for i in ids]
    correct_a = [int(rows_a[i]["correct"]) for i in ids]
    correct_b = [int(rows_b[i]["correct"]) for i in ids]
    result = {
        "n_cases": len(ids),
        "auc_a": metrics_report.roc_auc(scores_a, labels)[0],
        "auc_b": metrics_report.roc_auc(scores_b, labels)[0],
        "accuracy_a": float(np.mean(correct_a)),
        "accuracy_b": float(np.mean(correct_b)),
        "delong_p": metrics_report.delong_test(scores_a, scores_b, labels),
        "permutation_p": metrics_report.permutation_test(
            correct_a, correct_b, args.n_perm, args.seed if args.seed is not None else 0
        ),
    }
    text = json.dumps(result, indent=2)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "compare.json").write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 1
    state, phase = _eval_net_and_phase(args.checkpoint, args.phase)
    config = state.config
    manifest, cases = _load_cases(args.data)
    if args.split != "all":
        cases = [c for c in cases if manifest.split[c.case_id] == args.split]
    run_dir = _run_dir(args, "infer")
    run_dir.mkdir(parents=True, exist_ok=True)
    net = state.nets[phase]
    summary = {}
    for case in cases:
        volume = case.nct if phase is Phase.NCT else case.ctpa
        pred = inference.predict_case(net, volume, config, with_cam=args.cam)
        prob_path = run_dir / f"{case.case_id}.prob.raw"
        dataset_io.write_array(prob_path, pred.seg_probmap)
        entry = {"pe_probability": pred.pe_probability, "seg_probmap": prob_path.name}
        if pred.cam is not None:
            cam_path = run_dir / f"{case.case_id}.cam.raw"
            dataset_io.write_array(cam_path, pred.cam)
            entry["cam"] = cam_path.name
        summary[case.case_id] = entry
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"wrote predictions for {len(cases)} cases to {run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpmn",
        description="Dual-phase mutual-learning embolism screening: synthesize data, "
        "train the pathway pair, run inference, and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dual-phase dataset")
    synth.add_argument("--pe", type=int, default=20, help="number of embolism cases")
    synth.add_argument("--normal", type=int, default=60, help="number of normal cases")
    synth.add_argument("--extent", default="64", help="volume extent, e.g. 64 or 96,64,64")
    synth.add_argument("--vessels", type=int, default=6, help="vessel count template (per-case 3..n)")
    synth.add_argument("--embolisms", type=int, default=3, help="embolism count template (per-case 1..n)")
    synth.add_argument("--noise-sigma", type=float, default=0.03)
    synth.add_argument("--train-frac", type=float, default=0.7)
    synth.add_argument("--val-frac", type=float, default=0.1)
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument("--out", required=True, help="output dataset directory")
    synth.set_defaults(func=cmd_synth)

    train = sub.add_parser("train", help="train the dual-pathway model on a dataset")
    train.add_argument("--data", required=True, help="dataset directory with manifest.json")
    train.add_argument("--config", help="flat key=value config file")
    train.add_argument("--ablation", choices=trainer.ABLATIONS, default=None)
    train.add_argument("--patch-size", dest="patch_size", default=None)
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--lr-min", dest="lr_min", type=float, default=None)
    train.add_argument("--lambda1", type=float, default=None)
    train.add_argument("--lambda2", type=float, default=None)
    train.add_argument("--lambda3", type=float, default=None)
    train.add_argument("--ifa-alpha", dest="ifa_alpha", default=None)
    train.add_argument("--ifa-beta", dest="ifa_beta", default=None)
    train.add_argument("--width-scale", dest="width_scale", type=float, default=None)
    train.add_argument("--threshold", type=float, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", default=None, help="run directory (default runs/<stamp>-<tag>)")
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint or compare two reports")
    evaluate.add_argument("--data", help="dataset directory")
    evaluate.add_argument("--checkpoint", help="checkpoint file (best.pt/last.pt)")
    evaluate.add_argument("--split", default="test", choices=("train", "val", "test"))
    evaluate.add_argument("--phase", default="auto", choices=("auto", "nct", "ctpa"))
    evaluate.add_argument("--roc-out", dest="roc_out", default=None, help="ROC image path")
    evaluate.add_argument("--compare", nargs=2, metavar=("A.json", "B.json"), default=None,
                          help="compare two report files with DeLong + permutation tests")
    evaluate.add_argument("--n-perm", dest="n_perm", type=int, default=10000)
    evaluate.add_argument("--seed", type=int, default=None)
    evaluate.add_argument("--out", default=None)
    evaluate.set_defaults(func=cmd_eval)

    infer = sub.add_parser("infer", help="write per-case probability maps for a checkpoint")
    infer.add_argument("--data", required=True)
    infer.add_argument("--checkpoint", required=True)
    infer.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    infer.add_argument("--phase", default="auto", choices=("auto", "nct", "ctpa"))
    infer.add_argument("--cam", action=argparse.BooleanOptionalAction, default=True)
    infer.add_argument("--seed", type=int, default=None)
    infer.add_argument("--out", default=None)
    infer.set_defaults(func=cmd_infer)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PhantomGenerationError as err:
        print(f"generation error: {err}", file=sys.stderr)
        return 1
    except (ValueError, dataset_io.DatasetIOError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
