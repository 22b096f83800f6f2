"""How a fixed subcluster budget T is split across the top-R clusters.

Each gamma turns ranked NN probabilities into quotas
S_r = min(N, round(g_r / sum(g) * T)); "none" is the even split.
"""
import numpy as np

from clusterrank.allocator import allocate

N, T = 64, 100
cases = {
    "confident": [0.70, 0.15, 0.08, 0.04, 0.03],
    "two-way":   [0.45, 0.40, 0.08, 0.05, 0.02],
    "flat":      [0.21, 0.20, 0.20, 0.20, 0.19],
}

for name, p in cases.items():
    print(f"{name}: p = {p}")
    for gamma in ("none", "sum", "std", "exp"):
        S = allocate(np.array(p), gamma, T, N)
        print(f"  {gamma:<5s} S = {S.tolist()}  (total {S.sum()})")
