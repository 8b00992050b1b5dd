#!/usr/bin/env python3
"""Convert a raw Planetoid dataset (ind.<name>.* files) to the gnnrobust text format.

    python3 scripts/planetoid_to_text.py data/planetoid cora cora.txt

Uses the usual public split: the ``x`` rows are training nodes, the next
500 nodes are validation and ``test.index`` names the test nodes.  Test
indices missing from the graph (citeseer) get zero feature rows and no
label, which makes them plain unlabeled nodes of class 0 outside every mask.
"""
import argparse
import os
import pickle
import sys

import numpy as np
import scipy.sparse as sp

from gnnrobust.graph import Graph, csr_from_edges, save_graph


def _load(root, name, part):
    with open(os.path.join(root, f"ind.{name}.{part}"), "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def convert(root, name):
    x, y, tx, ty, allx, ally, graph = (_load(root, name, p) for p in ("x", "y", "tx", "ty", "allx", "ally", "graph"))
    with open(os.path.join(root, f"ind.{name}.test.index")) as fh:
        test_idx = np.array([int(line) for line in fh if line.strip()])
    test_sorted = np.sort(test_idx)
    lo, hi = test_sorted[0], test_sorted[-1]
    tx, ty = sp.csr_matrix(tx), np.asarray(ty)
    if hi - lo + 1 > tx.shape[0]:
        full_x = sp.lil_matrix((hi - lo + 1, tx.shape[1]))
        full_x[test_sorted - lo, :] = tx
        full_y = np.zeros((hi - lo + 1, ty.shape[1]))
        full_y[test_sorted - lo, :] = ty
        tx, ty = full_x.tocsr(), full_y
    feats = sp.vstack([sp.csr_matrix(allx), tx]).tolil()
    labels = np.vstack([np.asarray(ally), ty])
    feats[test_idx, :] = feats[test_sorted, :]
    labels[test_idx, :] = labels[test_sorted, :]
    n = feats.shape[0]

    src, dst = [], []
    for u, nbrs in graph.items():
        for v in nbrs:
            if u != v and u < n and v < n:
                src.append(min(u, v))
                dst.append(max(u, v))
    keys = np.unique(np.array(src, dtype=np.int64) * n + np.array(dst, dtype=np.int64))
    indptr, indices = csr_from_edges(n, keys // n, keys % n, directed=False)

    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    masks[0][:np.asarray(y).shape[0]] = True
    masks[1][np.asarray(y).shape[0]:np.asarray(y).shape[0] + 500] = True
    masks[2][test_idx] = True
    masks[1] &= ~masks[2]
    return Graph(np.asarray(feats.todense(), dtype=np.float32), indptr, indices,
                 labels.argmax(axis=1), *masks, num_classes=labels.shape[1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("root", help="directory holding the ind.<name>.* files")
    p.add_argument("name", help="cora, citeseer or pubmed")
    p.add_argument("out", help="output text file")
    args = p.parse_args(argv)
    g = convert(args.root, args.name)
    save_graph(g, args.out)
    print(f"{args.name}: {g.num_nodes} nodes, {g.num_edges} edge slots, {g.num_features} features, "
          f"{g.num_classes} classes -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
