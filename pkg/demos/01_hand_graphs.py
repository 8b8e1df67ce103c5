"""The three hand graphs and what one GCN layer does on them.

Run: python3 demos/01_hand_graphs.py
"""

import numpy as np

from handseg.gcn_encoder import GcnLayerParams, gcn_layer_forward
from handseg.hand_graph import (
    ANATOMICAL, PALM_STAR, adjacency, build_topology, export_edge_list, finger_reference)

# %% degree profile of each structure
for kind in (ANATOMICAL, finger_reference(), PALM_STAR):
    topo = build_topology(kind)
    deg = topo.degrees()
    print(f"{str(kind):14s} edges={len(topo.edges)} palm degree={deg[0]:2d} "
          f"sorted degrees={sorted(deg.tolist(), reverse=True)}")

# %% the edge-list format the ablation run stores next to its CSV
print()
print(export_edge_list(build_topology(finger_reference())).splitlines()[:6], "...")

# %% one sum-aggregation layer: a bump at the index tip spreads to its neighbours only
x = np.zeros((21, 3))
x[8, 0] = 1.0
layer = GcnLayerParams(np.array([[1.0, 0.0, 0.0]]), np.zeros(1))
print()
for kind in (ANATOMICAL, finger_reference(), PALM_STAR):
    out, _ = gcn_layer_forward(x, adjacency(build_topology(kind), with_self_loops=True), layer)
    print(f"{str(kind):14s} nodes touched after one layer: {np.flatnonzero(out[:, 0]).tolist()}")
