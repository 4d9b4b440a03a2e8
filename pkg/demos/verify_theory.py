"""Monte-Carlo checks of the identities behind the shaped log-score reward.

Run with ``python demos/verify_theory.py``.  Each line reports a Monte-Carlo
estimate, the exact or analytic target, and whether they agree within
three standard errors (or the stated tolerance).
"""

import numpy as np

from ric_lab import theoryverify as tv


def show(out):
    print(f"{out.claim:28s} est={out.estimate: .6f} target={out.target: .6f} "
          f"se={out.stderr:.1e} {'ok' if out.passed else 'FAIL'}")


# Discounting by gamma is the same as stopping at a geometric step.
rewards = np.random.default_rng(0).uniform(-1, 1, size=30)
show(tv.verify_geometric_identity(rewards, gamma=0.8, samples=10**6))

# The expected log-score of a Dirichlet action falls short of log mu_y by
# the expected Bregman divergence of -log.
show(tv.verify_bregman_gap([4.0, 2.0, 1.0], y=0, samples=10**6))

# For large concentration that shortfall is roughly Var / (2 mu^2).
out = tv.verify_quadratic_penalty([0.3, 0.7], c=100.0, samples=10**6)
show(out)
print("  c * penalty over c = 100, 200, 400:", np.round(out.details["c_times_penalty"], 4))

# Expected log-score = -H(q) - KL(q || mu) - variance penalty.
out = tv.verify_reward_decomposition([0.6, 0.3, 0.1], alpha=[6.0, 3.0, 1.0], samples=10**6)
show(out)
print("  ceiling {ceiling:.4f}  bias {bias:.4f}  variance {variance:.4f}".format(**out.details))

# A shared head must also score the ambiguous first step, which keeps the
# best logit scale finite even though the last step is separable.
feats, y = tv.two_step_features()
out = tv.verify_finite_logit_scale(feats, y)
show(out)
print("  mixture loss is smallest at scale", out.details["alpha_min"])
