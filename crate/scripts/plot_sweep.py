#!/usr/bin/env python3
"""Plot `fqbert sweep` tables or `fqbert perf --json` reports.

  fqbert sweep --checkpoint ckpt.fqck ... > sweep.txt
  python3 scripts/plot_sweep.py sweep.txt -o sweep.png

  fqbert perf --preset bert-base --grid "8x16,16x16" --json perf.json
  python3 scripts/plot_sweep.py perf.json -o perf.png
"""

import argparse
import json
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_sweep(path: str, out: str) -> None:
    ks, errs = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, err = line.split()
            ks.append(int(k))
            errs.append(float(err))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ks, errs, marker="o")
    ax.set_xlabel("weight bitwidth")
    ax.set_ylabel("mean relative logit error")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


def plot_perf(path: str, out: str) -> None:
    with open(path) as fh:
        data = json.load(fh)
    reports = data if isinstance(data, list) else [data]
    labels = [f"N={r['hw']['pes_per_pu']}" for r in reports]
    lat = [r["latency_ms"] for r in reports]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(labels, lat)
    ax.set_ylabel("modeled latency (ms)")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("input")
    ap.add_argument("-o", "--out", default="plot.png")
    args = ap.parse_args()
    if args.input.endswith(".json"):
        plot_perf(args.input, args.out)
    else:
        plot_sweep(args.input, args.out)


if __name__ == "__main__":
    sys.exit(main())
