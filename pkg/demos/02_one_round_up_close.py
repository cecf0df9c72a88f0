"""Walk through the server side of a single RKD round, stage by stage.

The simulator does all of this inside ``server_aggregate``; here we call the
pieces by hand on the same submissions so each intermediate is visible.

    python demos/02_one_round_up_close.py
"""
from pathlib import Path

import numpy as np

from rkd import defense, load_config
from rkd.simulator import build_federation, initial_global, local_train
from rkd.rng import derive_seed

FIXTURE = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "desk_blobs.toml"

fed = build_federation(load_config(FIXTURE))
g = initial_global(fed)
ids = [c.client_id for c in fed.clients]
params = [local_train(c, g, fed, derive_seed(fed.seed, "client", c.client_id, 0)) for c in fed.clients]
roles = ["M" if c.malicious else "." for c in fed.clients]

# 1. cosine similarity of each submitted model to the current global model
scores = defense.cosine_scores(params, g, ids)
print("client  role  cosine")
for cid, role, s in zip(ids, roles, scores.scores):
    print(f"{cid:6d}  {role:>4s}  {s:.6f}")

# 2. one-dimensional HDBSCAN over those scores; Q shrinks as rounds go by
q = defense.dynamic_min_cluster_size(len(ids), 0)
clusters = defense.cluster_clients(scores, q)
print(f"\nQ = {q}, labels = {clusters.labels.tolist()}")
print("cluster means:", {k: round(v, 6) for k, v in clusters.cluster_means.items()})
benign = sorted(clusters.benign_clients)
print("benign cluster (highest mean):", benign)

# 3. median of the benign models and L1 distance of each to it
sel = defense.median_selection([params[i] for i in benign], benign)
print(f"\nL1 to median: {np.round(sel.distances, 3).tolist()}")
print(f"threshold mu + sigma = {sel.threshold:.3f}, ensemble = {list(sel.selected)}")

# 4. the ensemble would now teach a fresh student by distillation (see demo 04)
caught = [cid for cid, r in zip(ids, roles) if r == "M" and cid not in benign]
print(f"\nattackers outside the benign cluster: {caught}")
