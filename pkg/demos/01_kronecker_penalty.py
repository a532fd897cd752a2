# The quadratic penalty never builds the Kronecker products it sums.
# Here we build them anyway, for a tiny network, and compare.
import numpy as np

from boml.bomla import KronPair, KroneckerPrecision, LaplacePosterior, LayerPrecision, quad_penalty
from boml.diffcore import Network, ParamSet

rng = np.random.default_rng(0)
net = Network.mlp([3, 4, 2], "tanh")
print("weight shapes (out, in + bias):", net.shapes)

# vec is column-major, so (A kron G) vec(X) == vec(G X A^T)
A, G, X = rng.normal(size=(4, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
lhs = np.kron(A, G) @ X.ravel(order="F")
rhs = (G @ X @ A.T).ravel(order="F")
print("vec identity error:", np.abs(lhs - rhs).max())

layers = []
for out_dim, in_dim in net.shapes:
    pairs = tuple(
        KronPair(1.0, np.cov(rng.normal(size=(in_dim, 20))), np.cov(rng.normal(size=(out_dim, 20))))
        for _ in range(3)
    )
    layers.append(LayerPrecision(np.full((out_dim, in_dim), 1e-2), pairs))

mean = ParamSet(tuple(rng.normal(size=s) for s in net.shapes))
post = LaplacePosterior(mean, KroneckerPrecision(tuple(layers)))
theta = mean.map(lambda w: w + 0.1 * rng.normal(size=w.shape))

d = (theta - mean).flatten()
dense = 0.5 * d @ post.precision.dense() @ d
print("factored penalty:", quad_penalty(theta, post))
print("dense penalty:   ", dense)
print("dense precision would need", post.precision.dense().nbytes, "bytes; factors use",
      sum(p.left.nbytes + p.right.nbytes for layer in layers for p in layer.pairs))
