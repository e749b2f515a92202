#!/usr/bin/env python3
"""
GVS experiment entry point.

Examples:
    python run_experiment.py phantom-gen --seed 0 --size 64x64 --count 200 --amp 0.3 --out data/phantom
    python run_experiment.py train --data data/phantom/manifest.json --out runs/gvs_l10
    python run_experiment.py synthesize --gen runs/gvs_l10/checkpoints/epoch_20.ckpt \
        --data data/phantom/manifest.json --out runs/gvs_l10_syn
    python run_experiment.py eval-adice --data runs/gvs_l10_syn/manifest.json --out runs/gvs_l10_adice --plot
    python run_experiment.py report runs/*_adice --out runs/summary

Run `python run_experiment.py <subcommand> --help` for every option.
"""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
