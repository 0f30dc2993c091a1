"""Run the four desk-scale ablations and save the numbers as JSON.

    python demos/ablation_study.py --epochs 12 --out ablations.json

Each run trains a small network from scratch on 10 synthetic sequences; the
whole sweep is 30 runs. Variants shared between protocols are trained once.
"""

import argparse
import json
import logging
import time

import numpy as np

from advimmu import ablations as A


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [round(float(v), 4) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--out", default="ablations.json")
    ap.add_argument("--only", nargs="*", default=["gsm", "regularizer", "depth", "pseudo"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    h = A.Harness(epochs=args.epochs)
    protocols = {
        "gsm": A.gsm_ablation,
        "regularizer": A.regularizer_ablation,
        "depth": A.depth_sweep,
        "pseudo": A.pseudo_label_study,
    }
    report = {"epochs": args.epochs, "seeds": list(h.seeds)}
    t0 = time.perf_counter()
    for name in args.only:
        report[name] = to_jsonable(protocols[name](h))
        print(f"{name}: {'pass' if report[name]['passed'] else 'FAIL'}", flush=True)
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2)
    report["minutes"] = round((time.perf_counter() - t0) / 60, 1)
    report["run_seconds"] = {f"{k[0]}|{k[1]}": round(v, 1) for k, v in h.seconds.items()}
    with open(args.out, "w") as f:
        json.dump(report, f, indent=2)
    print(json.dumps({k: v for k, v in report.items() if k != "run_seconds"}, indent=2))


if __name__ == "__main__":
    main()
