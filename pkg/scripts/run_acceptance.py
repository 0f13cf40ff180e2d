"""Train the acceptance model once and report the end-to-end numbers.

Covers the training-dependent checks (tracking quality, the decimation stress
test against the IoU baseline, and the cross-clip similarity margin). The
formula, gradient, assignment and metric oracles live in the pytest suite.

    python3 scripts/run_acceptance.py [--out results/acceptance]
"""

import argparse
import json
import time
from pathlib import Path

import torch

from simassoc import experiment as ex
from simassoc.train import save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, help="write model.ckpt and summary.json here")
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = ex.acceptance_config()
    t0 = time.perf_counter()
    model, history = ex.train_model(cfg)
    train_s = time.perf_counter() - t0
    print(f"trained {len(history)} steps in {train_s:.0f}s")

    held = ex.eval_sequences(cfg)
    rep = ex.evaluate_model(model, held, cfg.match)
    stress = ex.eval_sequences(cfg, ex.STRESS_DECIMATION)
    model_stress = ex.evaluate_model(model, stress, cfg.match).idf1
    iou_stress = ex.evaluate_iou_baseline(stress).idf1
    pos, neg, margin = ex.crossclip_margin(model, held, cfg)

    summary = {
        "train_seconds": train_s,
        "idf1": rep.idf1,
        "id_switch_rate": rep.id_switches / rep.gt_count,
        "stress_idf1_model": model_stress,
        "stress_idf1_iou": iou_stress,
        "crossclip_intra": pos,
        "crossclip_inter": neg,
        "crossclip_margin": margin,
    }
    print(f"held-out IDF1          {rep.idf1:.4f}   (target >= 0.90)")
    print(f"id switches / GT       {summary['id_switch_rate']:.4f}   (target <= 0.05)")
    print(f"decimation {ex.STRESS_DECIMATION} IDF1       model {model_stress:.4f} vs IoU {iou_stress:.4f}"
          f"   (gap target >= 0.10)")
    print(f"cross-clip margin      {margin:.4f}   (intra {pos:.3f}, inter {neg:.3f}; target >= 0.30)")

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, None, args.out / "model.ckpt")
        (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        (args.out / "run.yaml").write_text(cfg.dump())


if __name__ == "__main__":
    main()
