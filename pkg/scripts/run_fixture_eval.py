#!/usr/bin/env python3
"""Run the full evaluation battery on the committed fixture dataset.

Produces the pointing game report, the mean-patch ablation report and a
neuron ablation matrix under results/ (or --out). Everything goes through
the public CLI so the outputs match what a user would get by hand.
"""

import argparse
import sys
from pathlib import Path

from clrp.cli import main as clrp

ROOT = Path(__file__).resolve().parent.parent


def run(argv):
    print("+ clrp " + " ".join(argv))
    code = clrp(argv)
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--fixtures", default=str(ROOT / "fixtures"))
    parser.add_argument("--out", default=str(ROOT / "results"))
    parser.add_argument("--workers", type=int, default=4)
    parser.add_argument("--neuron-layer", default="fc0")
    parser.add_argument("--neurons", default="0,7,28,35")
    args = parser.parse_args()

    fixtures = Path(args.fixtures)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ["--model", str(fixtures / "model")]
    annotations = ["--annotations", str(fixtures / "annotations.jsonl")]

    run(["pointing", *model, *annotations,
         "--energy", "0.25,0.5,0.75", "--center-baseline",
         "--workers", str(args.workers),
         "--out-json", str(out / "pointing.json"),
         "--out-csv", str(out / "pointing.csv")])
    run(["ablate", *model, *annotations, "--seed", "42",
         "--out-json", str(out / "ablation.json"),
         "--out-csv", str(out / "ablation.csv")])
    run(["neurons", *model, *annotations,
         "--image", str(fixtures / "images" / "composite_000.png"),
         "--layer", args.neuron_layer, "--neurons", args.neurons,
         "--out", str(out / "neurons")])
    run(["explain", *model,
         "--image", str(fixtures / "images" / "composite_000.png"),
         "--method", "clrp2", "--target", "top2", "--png",
         "--out", str(out / "maps")])
    print(f"reports written under {out}")


if __name__ == "__main__":
    main()
