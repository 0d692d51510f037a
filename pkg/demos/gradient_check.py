"""
Checking hand-written gradients
===============================

Every layer in partpool carries its own backward pass. Here we compare a few
of them against central finite differences in float64.
"""

import numpy as np

from partpool.gradcheck import check_layer
from partpool.parts import CompactBilinear, CoordinateTransfer, RandomMaclaurinProjection
from partpool.tensor import Conv2d, MaxPool2x2

rng = np.random.default_rng(0)

# a 3x3 convolution with stride 2 on a small batch
conv = Conv2d(3, 4, kernel=3, stride=2, rng=rng)
print("conv", check_layer(conv, rng.standard_normal((2, 3, 7, 7)), rng))

# max pooling is piecewise linear; random inputs keep us away from ties
print("maxpool", check_layer(MaxPool2x2(), rng.standard_normal((1, 2, 4, 6)), rng))

# the coordinate transfer layer pools a 3x3 window around each part location;
# the second part sits in a corner so its window is clipped, the third is absent
locations = np.array([[[2, 3], [0, 0], [-1, -1]]])
transfer = CoordinateTransfer(window=3)
print("transfer", check_layer(transfer, rng.standard_normal((1, 5, 6, 6)), rng,
                              forward_kwargs={"locations": locations}))

# compact bilinear features: <phi(x), phi(y)> estimates <x, y>^2
proj = RandomMaclaurinProjection(in_dim=6, out_dim=4096, seed=1, dtype=np.float64)
phi = CompactBilinear(proj)
x = rng.standard_normal(6)
y = x + 0.3 * rng.standard_normal(6)
print("kernel", (x @ y) ** 2, "estimate", float((phi.forward(x[None]) * phi.forward(y[None])).sum()))
print("compact bilinear", check_layer(CompactBilinear(RandomMaclaurinProjection(6, 8, seed=2)),
                                      rng.standard_normal((3, 6)), rng))
