"""Five-arm fusion ablation (Uniform FiLM, Horizon, Readout, pre-scan fusion, Joint).

Thin wrapper over ``rmsdepth ablate``; extra flags are passed through, e.g.

    python scripts/run_ablation.py --epochs 30 --out runs/ablation
"""
import sys

from rmsdepth.cli import main

if __name__ == "__main__":
    sys.exit(main(["-v", "ablate", *sys.argv[1:]]))
