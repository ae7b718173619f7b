#!/usr/bin/env python3
"""Recompute FAR and similarity-curve numbers in report.json from the raw dumps.

Reads trial_scores.csv and curve_embeddings.csv next to report.json and checks
every derived number. Exit status 0 when all agree within the tolerance.
"""

import argparse
import csv
import json
import math
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np


def nearest_rank(scores, p):
    s = np.sort(np.asarray(scores, dtype=np.float64))
    rank = min(max(math.ceil(p * len(s) / 100.0), 1), len(s))
    return float(s[rank - 1])


def load_trials(path):
    genuine, synthetic = [], defaultdict(list)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            score = float(row["score"])
            if row["kind"] == "genuine":
                genuine.append(score)
            else:
                synthetic[(row["system"], int(row["seed_index"]))].append(score)
    return genuine, synthetic


def load_curves(path):
    curves = defaultdict(list)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            emb = np.array([float(x) for x in row["embedding"].split()])
            curves[(row["system"], int(row["pair"]))].append((row["w"], emb))
    return curves


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class Checker:
    def __init__(self, tol):
        self.tol = tol
        self.checked = 0
        self.failures = []

    def close(self, what, got, want):
        self.checked += 1
        if want is None or got is None:
            if not (want is None and (got is None or math.isnan(got))):
                self.failures.append(f"{what}: recomputed {got}, report {want}")
        elif abs(got - want) > self.tol:
            self.failures.append(f"{what}: recomputed {got!r}, report {want!r}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("dir", type=Path, help="evaluation output directory")
    ap.add_argument("--tol", type=float, default=1e-12)
    args = ap.parse_args()

    rep = json.loads((args.dir / "report.json").read_text())
    genuine, synthetic = load_trials(args.dir / "trial_scores.csv")
    curves = load_curves(args.dir / "curve_embeddings.csv")
    chk = Checker(args.tol)

    percentiles = rep["config"]["percentiles"]
    thresholds = [nearest_rank(genuine, p) for p in percentiles]
    for p, got, want in zip(percentiles, thresholds, rep["thresholds"]):
        chk.close(f"threshold p{p:g}", got, want)
    if len(genuine) != rep["verifier"]["n_genuine_trials"]:
        chk.failures.append("genuine trial count differs from the report")

    baseline = rep["baseline"]
    far_raw = {}
    for system in rep["systems"]:
        seeds = sorted(i for (s, i) in synthetic if s == system)
        per_seed = []
        for i in seeds:
            sc = np.asarray(synthetic[(system, i)])
            row = [float(np.mean(sc >= t)) for t in thresholds]
            per_seed.append(row)
            for j, (got, want) in enumerate(zip(row, rep["far_table"]["per_seed"][system][i])):
                chk.close(f"far {system} seed {i} col {j}", got, want)
        far_raw[system] = [float(np.median(col)) for col in zip(*per_seed)]
        for j, (got, want) in enumerate(zip(far_raw[system], rep["far_table"]["raw"][system])):
            chk.close(f"far raw {system} col {j}", got, want)
    for system in rep["systems"]:
        for j, want in enumerate(rep["far_table"]["normalized"][system]):
            base = far_raw[baseline][j]
            got = (1.0 if system == baseline else far_raw[system][j] / base) if base > 0 else None
            chk.close(f"far normalized {system} col {j}", got, want)

    for system, sc in rep["similarity_curve"].items():
        mean = np.zeros(len(rep["config"]["interpolation_grid"]))
        for p, pair in enumerate(sc["pairs"]):
            rows = curves[(system, p)]
            ref = rows[-1][1]
            scores = [cosine(e, ref) for _, e in rows[:-1]]
            mean += np.asarray(scores) / len(sc["pairs"])
            for g, (got, want) in enumerate(zip(scores, pair["scores"])):
                chk.close(f"curve {system} pair {p} point {g}", got, want)
            diffs = np.diff(scores)
            chk.close(f"curve {system} pair {p} drop", float(max(0.0, diffs.max())), pair["max_adjacent_drop"])
            chk.close(f"curve {system} pair {p} rise", float(max(0.0, (-diffs).max())), pair["max_adjacent_rise"])
        for g, (got, want) in enumerate(zip(mean, sc["mean"])):
            chk.close(f"curve {system} mean point {g}", float(got), want)

    if chk.failures:
        for f in chk.failures[:20]:
            print("MISMATCH", f)
        print(f"{len(chk.failures)} of {chk.checked} values disagree")
        return 1
    print(f"all {chk.checked} recomputed values agree within {args.tol:g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
