"""
Fitting an emergence curve over training checkpoints
====================================================

Probe scores per checkpoint trace how a structure appears during training.
A 4-parameter logistic in log10(words) summarizes the trajectory; the
midpoint crossing gives the emergence point, and data_gap compares the
model's word budget with a child's.

Run:  python3 demos/emergence_curve.py
"""

import numpy as np

import geoprobe as gp

rng = np.random.default_rng(1)

# checkpoint word counts, log-spaced from 100k to 10B words
words = np.logspace(5, 10, 12)

# synthetic probe scores: floor 0.1, ceiling 0.85, midpoint at 300M words
true_mu = np.log10(3e8)
scores = 0.1 + 0.75 / (1.0 + np.exp(-(np.log10(words) - true_mu) / 0.5))
scores = scores + 0.01 * rng.standard_normal(len(words))

curve = gp.fit_emergence(list(zip(words, scores)))
print(f"fitted floor {curve.a:.3f}  ceiling {curve.b:.3f}  mu {curve.mu:.3f}  sigma {curve.sigma:.3f}")
print(f"true midpoint {true_mu:.3f} log10 words")

point = gp.emergence_point(curve, level=0.5)
flag = " (extrapolated)" if point.extrapolated else ""
print(f"emergence at {point.words:.3g} words{flag}")

# where the curve completes 90% of its rise
p90 = gp.emergence_point(curve, level=0.9)
print(f"90% of the rise at {p90.words:.3g} words")

# normalized curve on a plotting grid
grid = np.linspace(5, 10, 11)
rel = gp.relative_scores(curve, grid)
for x, r in zip(grid, rel):
    print(f"  10^{x:4.1f} words   {'#' * int(round(40 * r))}")

# a 10B-word model has seen ~3 orders of magnitude more text than a child
gap = gp.data_gap(1e10, gp.CHILD_WORDS_PER_YEAR)
print(f"data gap vs one child-year: {gap:.1f} orders of magnitude")
