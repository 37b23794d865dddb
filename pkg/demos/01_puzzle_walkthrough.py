"""Walk through one pretext example by hand: grid, shuffle, targets, decode.

Writes PNGs into demos/out/ so each stage can be looked at.
"""
import os

import numpy as np

from hsjp.codecs import write_image
from hsjp.heatmap import STRIDE, decode_peaks, default_sigma, mosaic_png, render_targets
from hsjp.puzzle import fisher_yates, make_grid, shuffle_image, shuffled_centers
from hsjp.rng import Rng
from hsjp.synthdata import gen_pretext_corpus

out = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out, exist_ok=True)

size, n = 96, 3
image = gen_pretext_corpus(1, size, seed=7)[0]
write_image(os.path.join(out, "01_original.png"), image)

# the grid: n x n square cells, padded up when size is not a multiple of n
grid = make_grid(size, n)
print("patch side", grid.patch_side, "padded size", grid.padded_size)

# a uniform permutation; mapping[k] is the cell patch k moves to
perm = fisher_yates(grid.cells, Rng(7))
print("permutation", perm.mapping)
shuffled = shuffle_image(image, grid, perm)
write_image(os.path.join(out, "01_shuffled.png"), shuffled)

# one heatmap per ORIGINAL patch, peaked where that patch now sits
centers = shuffled_centers(grid, perm, size) / STRIDE
sigma = default_sigma(n, size / STRIDE)
targets = render_targets(centers, sigma, size // STRIDE, size // STRIDE)
print("targets", targets.data.shape, "sigma", round(sigma, 3))
with open(os.path.join(out, "01_targets.png"), "wb") as fh:
    fh.write(mosaic_png(targets.data, columns=n))

# decoding the clean targets gives the centres back (sub-pixel)
peaks = decode_peaks(targets.data[None]).points[0]
print("max decode error (heatmap px)", np.abs(peaks - centers).max().round(3))

# the predicted grid location of each patch is the argmax cell
cell = (centers // (size / STRIDE / n)).astype(int)
print("patch -> (col, row):")
for k, (c, r) in enumerate(cell):
    print(f"  {k} -> ({c}, {r})")
