"""Classifier norm on a separable task, supervised versus recurrent agent.

Cross-entropy keeps pushing ||W|| up once every training point is
classified correctly.  This script prints both norm trajectories along
with the epochs at which each model was judged converged.
"""

import argparse

from ric_lab import suite

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

res = suite.logit_scale_study(args.seed)
e_s = res["supervised_convergence_epoch"]
print(f"supervised converged at epoch {e_s}: ||W|| {res['supervised_norm_at_convergence']:.3f}"
      f" -> {res['supervised_norm_at_10x']:.3f} at epoch {10 * e_s}"
      f" (x{res['supervised_ratio']:.2f})")
if res["ric_converged"]:
    e_r = res["ric_convergence_epoch"]
    print(f"agent converged at epoch {e_r}: ||W|| {res['ric_norm_at_convergence']:.3f}"
          f" -> {res['ric_norm_final']:.3f} after {9 * e_s} more epochs"
          f" (x{res['ric_ratio']:.2f})")
else:
    print("agent did not converge within the epoch budget")

for name in ("supervised_norms", "ric_norms"):
    norms = res.get(name, [])
    step = max(1, len(norms) // 10)
    print(name.split("_")[0], [round(v, 3) for v in norms[::step]])
