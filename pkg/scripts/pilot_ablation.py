"""Desk-scale pilot: train each ablation once and print test metrics + timing."""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from cpmn.cli import make_split
from cpmn.core_types import CPMNConfig, Phase
from cpmn.inference import binarize_probmap, predict_case
from cpmn.metrics_report import CaseEval, evaluate
from cpmn.synth_phantom import PhantomSpec, generate_dataset
from cpmn.trainer import fit, load_checkpoint


def run(args):
    extent = (args.extent,) * 3
    spec = PhantomSpec(extent=extent)
    t0 = time.time()
    cases = generate_dataset(spec, args.pe, args.normal, seed=args.data_seed)
    by_label = {0: [], 1: []}
    for c in cases:
        by_label[c.label].append(c.case_id)
    split = make_split(by_label, 0.7, 0.1, args.data_seed)
    print(f"dataset: {len(cases)} cases in {time.time()-t0:.1f}s; "
          f"split sizes: { {s: list(split.values()).count(s) for s in ('train','val','test')} }",
          flush=True)

    config = CPMNConfig(
        patch_size=extent, alpha=1, beta=8 if args.extent == 64 else 1,
        batch_size=args.batch, epochs=args.epochs, seed=args.seed,
    )
    results = {}
    for ablation in args.ablations:
        t0 = time.time()
        out = Path(args.out) / f"{ablation}-s{args.seed}"
        out.mkdir(parents=True, exist_ok=True)
        fit(cases, split, config, out_dir=out, width_scale=args.width, ablation=ablation)
        train_time = time.time() - t0
        state = load_checkpoint(out / "checkpoints" / "best.pt")
        phase = state.plan.eval_phase
        net = state.nets[phase]
        rows = []
        t1 = time.time()
        for case in cases:
            if split[case.case_id] != "test":
                continue
            vol = case.nct if phase is Phase.NCT else case.ctpa
            pred = predict_case(net, vol, state.config, with_cam=False)
            rows.append(CaseEval(case.case_id, case.label, pred.pe_probability,
                                 binarize_probmap(pred.seg_probmap, config.threshold),
                                 case.mask.labels))
        report = evaluate(rows, config.threshold)
        results[ablation] = {
            "dice": report["mean_dice"], "auc": report["auc"],
            "sens": report["sensitivity"], "spec": report["specificity"],
            "train_s": round(train_time, 1), "eval_s": round(time.time() - t1, 1),
            "best_epoch": state.best_epoch,
        }
        print(f"{ablation}: {json.dumps(results[ablation])}", flush=True)
    print(json.dumps(results, indent=2))


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--extent", type=int, default=32)
    parser.add_argument("--pe", type=int, default=40)
    parser.add_argument("--normal", type=int, default=120)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--batch", type=int, default=4)
    parser.add_argument("--width", type=float, default=0.25)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--data-seed", type=int, default=2026)
    parser.add_argument("--ablations", nargs="+",
                        default=["single_nct", "single_ctpa", "mls", "mls_ifa", "mls_ifa_ifd"])
    parser.add_argument("--out", default="/tmp/pilot")
    run(parser.parse_args())
