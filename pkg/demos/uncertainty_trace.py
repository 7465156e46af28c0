"""Summarise how mean uncertainty and batch perplexity move together in a run.

Reads the metrics.csv written by ``edvae train`` (EdVAE runs only), bins the
first ``--window`` iterations and prints the binned averages together with
their Spearman rank correlation.

    edvae train --config demos/configs/edvae_synth.json --out runs/edvae
    python demos/uncertainty_trace.py runs/edvae/metrics.csv
"""

import argparse
import csv

import numpy as np


def ranks(x):
    order = np.argsort(x, kind="stable")
    r = np.empty(len(x))
    r[order] = np.arange(len(x))
    # average ranks over ties
    vals, inv = np.unique(x, return_inverse=True)
    sums = np.bincount(inv, weights=r)
    counts = np.bincount(inv)
    return (sums / counts)[inv]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("metrics", help="metrics.csv of an EdVAE run")
    p.add_argument("--window", type=int, default=2000)
    p.add_argument("--bins", type=int, default=10)
    args = p.parse_args()

    with open(args.metrics) as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["iter"]) < args.window]
    u = np.array([float(r["mean_uncertainty"]) for r in rows])
    ppl = np.array([float(r["perplexity"]) for r in rows])
    if np.isnan(u).all():
        raise SystemExit("no uncertainty column values; is this an EdVAE run?")

    for chunk_u, chunk_p, chunk_i in zip(np.array_split(u, args.bins), np.array_split(ppl, args.bins),
                                         np.array_split(np.arange(len(rows)), args.bins)):
        print(f"iters {chunk_i[0]:>5}-{chunk_i[-1]:<5} mean u {chunk_u.mean():.3e}  batch perplexity {chunk_p.mean():.3f}")
    rho = np.corrcoef(ranks(u), ranks(ppl))[0, 1]
    print(f"Spearman rank correlation over {len(rows)} iterations: {rho:.3f}")


if __name__ == "__main__":
    main()
