"""
Balanced train/test splits by simulated annealing
=================================================

Words belong to overlapping semantic categories, and a fair evaluation
holds out the same fraction of every category.  Greedy assignment can't do
that when memberships overlap; annealing single-element flips against the
squared deviation cost gets close in one pass.

Run:  python3 demos/category_split.py
"""

import numpy as np

import geoprobe as gp

rng = np.random.default_rng(2)

# 2-level hierarchy: 6 coarse categories, each the union of 4 fine ones
elements = [f"word{i:03d}" for i in range(360)]
fine = [set(elements[15 * j : 15 * j + 15]) for j in range(24)]
coarse = [set().union(*fine[4 * i : 4 * i + 4]) for i in range(6)]
categories = coarse + fine

assign = gp.sa_split(categories, test_fraction=0.2, iterations=200_000, seed=0)

initial = assign.cost_trace[0][1]
print(f"cost: initial {initial:.1f} -> final {assign.final_cost:.1f}")

print("held-out fraction per coarse category (target 0.20):")
for i, members in enumerate(coarse):
    t = sum(1 for m in members if assign.labels[m] == "test")
    print(f"  C{i}: {t / len(members):.3f}  ({t}/{len(members)})")

worst = max(
    abs(sum(1 for m in c if assign.labels[m] == "test") / len(c) - 0.2) for c in categories
)
print(f"worst deviation over all {len(categories)} categories: {worst:.3f}")

# training still needs a validation slice; peel it off the train side
train, val = gp.carve_validation(assign, fraction=0.1, seed=0)
print(f"train {len(train)}  val {len(val)}  test {len(assign.test_elements())}")
