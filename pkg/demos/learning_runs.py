"""Desk-scale learning runs: HAN+sum at k/n = 0.25 against the k/n = 1.0 baseline.

Trains both runs on the same 10k-sample synthetic split (up to 20k steps,
plateau stopping on), evaluates on a held-out 2k split and writes, per run,
``checkpoint.hckp`` and ``metrics.csv`` plus a shared ``summary.json``.
The acceptance suite re-evaluates these checkpoints.

    python3 demos/learning_runs.py [out_dir]     # default: artifacts/learning
"""

import json
import sys
import time
from pathlib import Path

from hvqa.config import RunConfig
from hvqa.data import generate_dataset
from hvqa.training import train

DATA = {"train_n": 10_000, "train_seed": 0, "per_scene": 1, "eval_n": 2_000, "eval_seed": 1}
RUNS = {"k025": 0.25, "k100": 1.0}


def run_all(out_dir):
    """Train both runs; returns ``{run: (steps, minutes, train_acc, eval_acc, fraction)}``."""
    out_dir = Path(out_dir)
    train_ds = generate_dataset(DATA["train_n"], DATA["train_seed"], per_scene=DATA["per_scene"])
    eval_ds = generate_dataset(DATA["eval_n"], DATA["eval_seed"])
    found, summary = {}, {"data": DATA, "runs": {}}
    for name, fraction in RUNS.items():
        cfg = RunConfig().with_overrides({"attention.mode": "han", "attention.fraction": fraction,
                                          "aggregation.kind": "sum"})
        t0 = time.perf_counter()
        res = train(cfg, train_ds, eval_ds, out_dir=out_dir / name,
                    log=lambda row: print(name, {k: row[k] for k in ("step", "train_acc", "eval_acc")}, flush=True))
        minutes = (time.perf_counter() - t0) / 60
        last = res.rows[-1]
        found[name] = (res.step, minutes, last["train_acc"], last["eval_acc"], fraction)
        summary["runs"][name] = {"fraction": fraction, "steps": res.step, "stopped": res.stopped,
                                 "minutes": round(minutes, 2), "train_acc": last["train_acc"],
                                 "eval_acc": last["eval_acc"]}
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return found


if __name__ == "__main__":
    root = Path(__file__).resolve().parent.parent
    for name, row in run_all(Path(sys.argv[1]) if len(sys.argv) > 1 else root / "artifacts" / "learning").items():
        print(name, row)
