"""
How the fusion weighs views
===========================

Three fake "coarse" volumes disagree about a voxel.  The softmax over
view scores decides whose opinion wins; equal scores reduce to the
plain average, and a single view passes through untouched.
"""

import numpy as np

from voxrecon.fusion import fuse_average, fuse_weighted, normalize_scores
from voxrecon.tensor import Tensor

shape = (1, 1, 2, 2, 2)
coarse = [Tensor(np.full(shape, v, np.float32)) for v in (0.9, 0.2, 0.4)]

# view 0 is confident, the others are not
raw = [Tensor(np.full(shape, v, np.float32)) for v in (3.0, 0.0, 0.0)]
scores = normalize_scores(raw)
print("weights   ", [round(float(s.data.flat[0]), 3) for s in scores])
print("fused     ", round(float(fuse_weighted(coarse, scores).data.flat[0]), 3))
print("average   ", round(float(fuse_average(coarse).data.flat[0]), 3))

# reordering the views only reorders the weights
perm = [2, 0, 1]
again = fuse_weighted([coarse[i] for i in perm], normalize_scores([raw[i] for i in perm]))
print("permuted  ", round(float(again.data.flat[0]), 3))

# huge scores do not overflow; the max is subtracted first
big = normalize_scores([Tensor(np.full(shape, v, np.float32)) for v in (1000.0, 999.0)])
print("large raw ", [round(float(s.data.flat[0]), 4) for s in big])
print("one view  ", np.array_equal(fuse_weighted(coarse[:1], normalize_scores(raw[:1])).data, coarse[0].data))
