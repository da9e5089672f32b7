"""Scripted reproduction: ``python scripts/repro.py --profile smoke --out repro_out``."""
import sys

from camalkit.cli import main

if __name__ == "__main__":
    sys.exit(main(["repro", *sys.argv[1:]]))
