"""End-to-end walk through the command line tool on a tiny dataset.

    python demos/quickstart_pipeline.py [workdir]

Generates four 32x32 sequences, pseudo-labels them with SBICAC, trains the
unfolded model for a few epochs, then evaluates and writes predictions.
Takes well under a minute.
"""

import json
import sys
import tempfile
from pathlib import Path

from advimmu.cli import main as advimmu


def run(*args):
    print("$ advimmu", " ".join(args))
    code = advimmu(list(args))
    if code:
        sys.exit(code)
    print()


def main():
    work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="advimmu-"))
    work.mkdir(parents=True, exist_ok=True)
    config = work / "config.json"
    config.write_text(json.dumps({
        "paths": {"dataset": str(work / "data"), "run_dir": str(work / "run")},
        "scene": {"height": 32, "width": 32, "frames": 8},
        "dataset": {"sequences": 4, "weather": "mixed"},
        "unfold": {"K": 2},
        "epochs": 4,
        "optim": {"lr": 3e-3},
    }, indent=2))

    run("gen-data", "--config", str(config))
    run("cluster", "--config", str(config))
    run("train", "--config", str(config), "-v")
    run("eval", "--config", str(config), "--per-frame-out", str(work / "run" / "frames.csv"))
    run("infer", "--config", str(config))

    print("run directory:", work / "run")
    for p in sorted((work / "run").iterdir()):
        print("  ", p.name)


if __name__ == "__main__":
    main()
