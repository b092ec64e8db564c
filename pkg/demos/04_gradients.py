"""
Checking the gradients
======================

The autodiff engine is checked against central differences.  A single
convolution is linear in each weight so any step works; the whole network
has kinks (ReLU, max-pool) and needs the step ladder.
"""

import numpy as np

from voxrecon.gradcheck import finite_difference_gradcheck, model_gradcheck
from voxrecon.nnops import conv, conv_transpose
from voxrecon.tensor import Tensor, mul, sum_all

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((2, 3, 5, 5, 5)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 3, 3, 3, 3)), requires_grad=True)
probe = Tensor(rng.standard_normal((2, 4, 3, 3, 3)))
err = finite_difference_gradcheck(lambda: sum_all(mul(conv(x, w, stride=2, pad=1), probe)), [x, w], eps=1e-3)
print(f"conv3d: max rel. error {err:.1e}")

# <conv(a), b> == <a, convT(b)> with the same weights
b = rng.standard_normal((2, 4, 3, 3, 3))
lhs = np.vdot(conv(Tensor(x.data), Tensor(w.data), stride=2, pad=1).data, b)
rhs = np.vdot(x.data, conv_transpose(Tensor(b), Tensor(w.data), stride=2, pad=1).data)
print(f"adjoint: {lhs:.6f} vs {rhs:.6f}")

# one coordinate per parameter tensor of Toy at 16^3; takes about a minute
rep = model_gradcheck("Toy", resolution=16, coords=1, seed=0)
print(f"Toy network: max rel. error {rep.max_rel_error:.1e} over {rep.probed} coordinates, "
      f"{rep.redrawn} redrawn near kinks")
