"""How the one-dimensional HDBSCAN splits a handful of similarity scores.

We build the condensed tree for seven scores, print each cluster's birth level
and stability, and show which clusters Excess of Mass keeps (marked *). With a
minimum size of 3 no split leaves two big-enough halves, so the root survives
alone and every score lands in one cluster.

    python demos/03_hdbscan_on_scores.py
"""
from rkd.clustering import condensed_tree, excess_of_mass, hdbscan_1d

scores = [0.10, 0.12, 0.50, 0.52, 0.53, 0.90, 0.95]

for q in (2, 3):
    tree = condensed_tree(scores, q)
    keep = set(excess_of_mass(tree))
    print(f"min cluster size {q}")
    print("  id  parent  birth lambda  stability  members")
    for c in tree:
        mark = "*" if c.cluster_id in keep else " "
        parent = "-" if c.parent is None else str(c.parent)
        print(f" {mark}{c.cluster_id:2d}  {parent:>6s}  {c.birth_lambda:12.3f}  {c.stability:9.3f}  "
              f"{sorted(c.points.tolist())}")
    print("  labels:", hdbscan_1d(scores, q).tolist(), "\n")

# Identical scores collapse to a single point: distances are zero, lambda is
# infinite, and the root is the only sensible answer.
print("all equal:", hdbscan_1d([0.7] * 5, 2).tolist())
# Fewer points than the minimum cluster size cannot form any cluster.
print("too few:  ", hdbscan_1d([0.7, 0.1], 3).tolist())
