"""Train the full model and the three reduced variants on the same data.

    python scripts/ablation.py                                  # overfit.cfg, held-out split
    python scripts/ablation.py --set optim.iterations=300 --mode agnostic
"""
import argparse
import logging
from pathlib import Path

from diveseg.config import load_config
from diveseg.runtime import ablate

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "overfit.cfg"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(CONFIG))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--mode", choices=("agnostic", "multi"), default="multi")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)

    overrides = {"data.eval_split": "val", "output_dir": "runs/ablation"}
    overrides.update(kv.split("=", 1) for kv in args.set)
    report = ablate(load_config(args.config, overrides), mode=args.mode)
    print(report.table())
    for row in report.rows[1:]:
        print(f"{row.label}: -{row.param_delta} params (closed form {row.expected_delta})")


if __name__ == "__main__":
    main()
