"""
Checking the consistency bounds numerically
===========================================

Sample field pairs that pass the per-voxel cross-sanity check, measure how
close they come to the global bounds, and look at a case where the bound
on the summed error does not follow from the per-voxel check alone.
"""

import numpy as np

from sanereg.bounds import (estimate_alpha_beta, lambda_c_guidance, relaxation_bound,
                            sample_checked_pairs, verify_cs_bound, verify_thm1)

rng = np.random.default_rng(0)

for alpha, beta in [(0.1, 12.0), (0.1, 10.0), (0.01, 0.03)]:
    g, gt = sample_checked_pairs(400, (8, 8), alpha, beta, rng)
    ratios = [verify_thm1(a, b, alpha, beta).lhs / relaxation_bound(alpha, beta, 64)
              for a, b in zip(g, gt)]
    cs = [verify_cs_bound(g[i], g[i + 1], alpha, beta, tildes=(gt[i], gt[i + 1]))
          for i in range(0, 400, 2)]
    print(f"alpha={alpha:<5} beta={beta:<5} worst |g+g~|^2 / bound = {max(ratios):.4f}  "
          f"CS violations {sum(not r.satisfied for r in cs)}/{len(cs)}")

# One voxel that passes the check with a large displacement. The per-voxel
# tolerance grows with |g|^2, so the summed error can exceed a bound that
# depends on beta alone.
alpha, beta = 0.1, 12.0
g = np.array([100.0, 0.0]).reshape(2, 1, 1)
gt = np.array([-70.0, 0.0]).reshape(2, 1, 1)
err = float(((g + gt) ** 2).sum())
tol = alpha * float((g ** 2).sum() + (gt ** 2).sum()) + beta
print(f"\nlarge-field voxel: error {err:.0f} < tolerance {tol:.0f} passes the check")
print(f"but the error exceeds beta (2 - alpha) N / (1 - alpha) = {relaxation_bound(alpha, beta, 1):.2f}")

# the sufficient condition is an energy budget on the fields
n = 64
budget = beta * n / (alpha * (1 - alpha))
print(f"summed |g|^2 + |g~|^2 below {budget:.1f} on an 8x8 grid guarantees the bound")

# guidance for the cross-sanity weight
for lam in (0.01, 0.001, None):
    gd = lambda_c_guidance(0.1, 10.0, lambda_c=lam)
    print(f"lambda_c={gd.lambda_c:<6} (1-alpha) beta = {gd.factor:g}  "
          f"per-voxel bound {gd.per_voxel_bound:.4f}  loose={gd.loose}")

# choosing beta from the displacements a model produces
fields = [g[0] for g in sample_checked_pairs(5, (16, 16), 0.1, 1.0, rng)]
alpha, beta = estimate_alpha_beta(fields)
print(f"\nheuristic on 5 sample fields: alpha={alpha}, beta={beta:.4f}")
