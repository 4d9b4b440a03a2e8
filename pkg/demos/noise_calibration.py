"""Accuracy and ECE of both models as label noise increases.

Trains the recurrent agent and the one-pass supervised classifier on the
same 10-class gaussian mixture at each noise rate, with the same epochs
and learning rate, and prints the final test numbers.  The full setting
takes around half an hour; ``--scale smoke`` finishes in seconds.
"""

import argparse

from ric_lab import suite

ap = argparse.ArgumentParser()
ap.add_argument("--scale", choices=sorted(suite.SCALES), default="full-desk")
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

print("noise   model       accuracy  ECE     confidence")
for row in suite.noise_study(args.seed, args.scale):
    for model in ("ric", "supervised"):
        r = row[model]
        print(f"{row['noise_rate']:.4f}  {model:10s}  {r['accuracy']:.4f}    {r['ece']:.4f}  "
              f"{r['mean_confidence']:.4f}")
