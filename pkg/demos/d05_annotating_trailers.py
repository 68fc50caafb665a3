"""
Annotating trailer shots by frame retrieval
===========================================

Each trailer frame retrieves its four nearest movie frames. Each hit votes
for the shot that contains it. Every trailer shot takes the majority shot.
"""

import numpy as np

from ipot.dataio import annotate_alignment

rng = np.random.default_rng(5)
n_shots, per_shot, dim = 12, 8, 16
centers = rng.standard_normal((n_shots, dim))
movie = np.repeat(centers, per_shot, axis=0) + 0.05 * rng.standard_normal((n_shots * per_shot, dim))
bounds = [(s * per_shot, (s + 1) * per_shot) for s in range(n_shots)]

# %%
# A trailer made of short, slightly noisy sub-clips.
source = [7, 2, 10, 2, 5]
clips = [movie[bounds[s][0] + 1 : bounds[s][0] + 5] + 0.01 * rng.standard_normal((4, dim)) for s in source]
trailer = np.concatenate(clips)
trailer_bounds = [(4 * t, 4 * t + 4) for t in range(len(source))]

pairs = annotate_alignment(movie, bounds, trailer, trailer_bounds)
print("annotated (movie shot, trailer shot):", pairs.tolist())
print("all correct:", pairs[:, 0].tolist() == source)
