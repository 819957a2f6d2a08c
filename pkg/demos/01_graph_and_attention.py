"""A walk through the graph pieces on a single synthetic window.

Run with ``python3 demos/01_graph_and_attention.py``. Takes a few seconds.
"""
import numpy as np

from mstgcn import graph as G
from mstgcn.data import SyntheticSpec, build_windows, builtin_layout, generate_synthetic
from mstgcn.features import FeatureNet, FeatureNetConfig
from mstgcn.stgcn import MSTGCN, ModelConfig

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

# a small night: 1 subject, 20 epochs of 6-channel signal at 100 Hz
ds = generate_synthetic(SyntheticSpec(subjects=1, epochs_per_subject=20, seed=1))
print(ds.manifest)

# the distance graph only depends on where the electrodes sit
layout = builtin_layout("isruc6")
dc = G.build_dc_adjacency(layout)
print("distance adjacency\n", dc.weights)

# every channel of an epoch becomes a 256-d feature vector
net = FeatureNet.init(FeatureNetConfig(), rng)
trace = []
feats = net.forward(ds.signals[0].astype(float), trace=trace)
for stage, shape in trace:
    print(f"{stage:>12}  {shape}")

# the functional graph is learned from those features, one per epoch
w = rng.uniform(0.0, 0.01, size=feats.shape[1])
A = G.learn_fc_adjacency(feats, w)
print("learned adjacency rows sum to", A.data.sum(axis=1))

# rescale the Laplacian into [-1, 1] and build the Chebyshev basis
L = G.scaled_laplacian(dc)
print("scaled Laplacian spectrum", np.linalg.eigvalsh(L.data))
stack = G.cheb_stack(L, 3)
print("T_2 =\n", stack.polys[2].data)

# the whole model on one window (d = 2 gives 5 epochs of context)
cfg = ModelConfig(n_channels=6, n_domains=1, d=2)
model = MSTGCN(cfg, dc, rng)
windows = build_windows(ds, 2)
x = ds.signals[windows.rows[:4]].astype(float)        # (4, 5, 6, 3000)
out = model.forward(x)
print("class probabilities\n", out.class_probs.data)
print("temporal attention of the first window\n", out.aux["fc.l0.temporal"].data[0])
print("spatial attention of the first window\n", out.aux["dc.l0.spatial"].data[0])
