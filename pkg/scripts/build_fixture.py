#!/usr/bin/env python3
"""Rebuild the committed fixture dataset from scratch.

Requires the exporter package (and torch): pip install -e exporter.
Rebuilding with the default seed reproduces the committed annotation
bytes; the trained weights depend on the torch version in use.
"""

import sys
from pathlib import Path

try:
    from clrp_exporter.fixture import main
except ImportError:
    sys.exit("the exporter package is not installed; "
             "run: pip install -e exporter --no-build-isolation")

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    argv = sys.argv[1:]
    if not any(a.startswith("--out") for a in argv):
        argv = ["--out", str(ROOT / "fixtures"), *argv]
    sys.exit(main(argv))
