"""Overfit a small synthetic split and report training-set AP.

    python scripts/overfit.py                       # configs/overfit.cfg as is
    python scripts/overfit.py --set optim.iterations=1500 --set seed=1
"""
import argparse
import logging
import time
from pathlib import Path

from diveseg.config import load_config
from diveseg.runtime import build_dataset, evaluate, train

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "overfit.cfg"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(CONFIG))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)

    cfg = load_config(args.config, dict(kv.split("=", 1) for kv in args.set))
    start = time.time()
    result = train(cfg)
    print(f"trained {cfg.optim.iterations} iterations in {time.time() - start:.0f}s")
    print("final losses:", {k: round(v, 4) for k, v in result.losses[-1].items()})
    dataset, names = build_dataset(cfg, "train")
    for mode in ("agnostic", "multi"):
        report = evaluate(result.model, dataset, mode, class_names=names)
        print(report.table(f"{mode} (training set)"))


if __name__ == "__main__":
    main()
