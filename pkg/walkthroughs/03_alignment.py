"""Fit gridded crop areas to national totals without overfilling any cell.

    python3 walkthroughs/03_alignment.py
"""
import numpy as np

from fertgrid import downscale as D

# two crops on three cells; the first cell is nearly full already
layers = np.array([[6.0, 2.0, 1.0],
                   [3.0, 0.0, 1.0]])
cap = np.array([10.0, 5.0, 8.0])
totals = [9.0, 7.0]

P, rounds = D.align_joint(layers, totals, cap)
print("aligned areas\n", P.round(3))
print("per crop", P.sum(1), "target", totals)
print("per cell", P.sum(0).round(3), "capacity", cap)
print("redistribution rounds:", rounds)

# a total that cannot fit raises instead of writing a wrong grid
try:
    D.align_joint(layers, [9.0, 19.0], cap)
except D.InfeasibleError as exc:
    print("refused:", exc)

# cells with new cropland borrow the crop share of their neighbourhood
base = np.zeros((41, 41))
nr0 = np.ones((41, 41))
base[20, 30] = 0.5
print("ratio at the centre:", D.neighbor_ratio(base, nr0, (20, 20)))
print("ratio with no crop anywhere:", D.neighbor_ratio(np.zeros_like(base), nr0, (20, 20)))
