"""Train the agent on a ring task, then look at refinement step by step.

The ring task mixes easy points (near a ring's centre radius) with hard
ones (between rings).  After training we print the per-step accuracy of
the mean action, then run value-halted inference and compare how long
correct and incorrect predictions kept refining.

Takes a few minutes on one core.  Pass ``--epochs`` to shorten it.
"""

import argparse

from ric_lab import suite

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=200)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

scale = suite.Scale(ring_epochs=args.epochs)
res = suite.halting_study(args.seed, scale)

print("step  accuracy  confidence")
for row in res["anytime"]:
    print(f"{row['step']:4d}  {row['accuracy']:.4f}    {row['mean_confidence']:.4f}")

h = res["halting"]
print()
print(f"full-horizon accuracy {res['accuracy_full']:.4f}, "
      f"with halting {res['accuracy_halted']:.4f} "
      f"after {res['mean_halt_step']:.2f} steps on average (T = {res['horizon']})")
print(f"mean halt step: correct {h['correct']['mean']:.2f}, incorrect {h['incorrect']['mean']:.2f}")
print("halt-step histogram (correct):  ", h["correct"]["histogram"])
print("halt-step histogram (incorrect):", h["incorrect"]["histogram"])
