# coding: utf-8

# # Positions for grids of different sizes
#
# One 3D sinusoidal grid is built for the largest image. A smaller image
# takes the centered block of that grid, so its middle patch keeps the code
# of the large image's middle patch.

import numpy as np

from varivit import posemb

master = posemb.build_sinusoidal_3d((6, 6, 6), 384)
print("master grid", master.shape, "dim", master.dim)


# The block for a 4x4x4 grid starts one cell in along every axis, and
# for 5x5x5 it starts at 1 as well because the center of 6 is 3.

for g in (4, 5, 6):
    print(g, posemb.select_ranges(master.shape, (g, g, g)))


# Every selected row is a row of the master. Nothing is recomputed or blended.

sub = posemb.center_and_select(master, (4, 4, 4))
rows = {r.tobytes() for r in master.flat()}
print("all rows from master:", all(r.tobytes() in rows for r in sub))


# Compare with trilinear resizing: the corner of a resized 4^3 grid is the
# master's corner, while center-and-select keeps the master's (1,1,1).

resized = posemb.interp_resize(master, (4, 4, 4))
print("resize corner == master corner:", np.allclose(resized[0], master.grid[0, 0, 0]))
print("select corner == master (1,1,1):", np.array_equal(sub[0], master.grid[1, 1, 1]))


# Cosine similarity to the center patch drops off with distance.

sim = posemb.cosine_similarity_map(master, (3, 3, 3))
print(np.round(sim[3, :, :], 2))
