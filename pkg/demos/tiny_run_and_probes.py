"""Train a small model on bursty sequences, then run a few probes on the endpoint.

Finishes in a couple of minutes on a laptop; the numbers are far from the
full-size runs but every stage of the pipeline is exercised.

    python demos/tiny_run_and_probes.py --out /tmp/tiny
"""

import argparse
import logging
from pathlib import Path

from coopetition import probes as P
from coopetition import trainer as T
from coopetition.checkpoint import list_checkpoints


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/tiny_demo")
    ap.add_argument("--classes", type=int, default=64)
    ap.add_argument("--sequences", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = T.TrainConfig.from_flat({
        "bank.num_classes": args.classes, "bank.exemplars_per_class": 10, "bank.d_in": 16,
        "model.d_model": 32, "model.num_heads": 4, "total_sequences": args.sequences,
        "lr": 3e-4, "eval_n": 500, "model_seed": args.seed, "data_seed": args.seed,
    })
    out = Path(args.out)
    res = T.train(cfg, out)

    print("\nseqs        ICL    FLIP   CIWL   IWL(plain)")
    for step in res.metrics.steps()[::4] + [res.step]:
        m = res.metrics.at(step)
        print(f"{step * cfg.batch_size:<10d} {m['EVAL_ICL']['in_context_accuracy']:.3f}  "
              f"{m['EVAL_FLIP']['in_context_accuracy']:.3f}  "
              f"{m['EVAL_CIWL']['in_context_accuracy']:.3f}  {m['EVAL_IWL']['plain_accuracy']:.3f}")

    model, _, bank, _ = T.load_model(list_checkpoints(out)[-1])
    reports = [
        P.composition_ablation(model, bank, "all-but-values", n=1000),
        P.composition_ablation(model, bank, "all-but-queries", n=1000),
        P.l1_output_ablation(model, bank, n=1000),
        P.induction_strength(model, bank, n=1000),
    ]
    print()
    for rep in reports:
        rep.write(out / "probes")
        name = rep.probe + (f"[{rep.tag}]" if rep.tag else "")
        shown = ", ".join(f"{k}={v:.3f}" for k, (v, _) in rep.summary.items())
        print(f"{name:40s} {shown}")
    print(f"\nprobe CSVs in {out / 'probes'}")


if __name__ == "__main__":
    main()
