#!/usr/bin/env python3
"""Convert the raw LINQS Cora files (cora.content, cora.cites) into a graph bundle.

The bundle keeps the largest connected component, which yields the common
2485-node / 5069-edge variant of Cora. Nodes are renumbered 0..N-1 in the
order of the sorted paper ids; classes are numbered by sorted class name.

Usage: convert_cora.py <raw_dir> <out_dir> [--full]
"""

import argparse
import os
from collections import defaultdict, deque


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("raw_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--full", action="store_true", help="keep every node instead of the largest component")
    args = ap.parse_args()

    features = {}
    labels = {}
    with open(os.path.join(args.raw_dir, "cora.content")) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            pid = parts[0]
            features[pid] = parts[1:-1]
            labels[pid] = parts[-1]

    adj = defaultdict(set)
    with open(os.path.join(args.raw_dir, "cora.cites")) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2:
                continue
            a, b = parts
            if a == b or a not in features or b not in features:
                continue
            adj[a].add(b)
            adj[b].add(a)

    keep = set(features)
    if not args.full:
        seen = set()
        best = set()
        for start in features:
            if start in seen:
                continue
            comp = {start}
            queue = deque([start])
            seen.add(start)
            while queue:
                u = queue.popleft()
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        comp.add(v)
                        queue.append(v)
            if len(comp) > len(best):
                best = comp
        keep = best

    order = sorted(keep, key=int)
    index = {pid: i for i, pid in enumerate(order)}
    classes = sorted(set(labels[p] for p in order))
    class_index = {c: i for i, c in enumerate(classes)}

    os.makedirs(args.out_dir, exist_ok=True)
    edges = set()
    for u in order:
        for v in adj[u]:
            if v in index:
                a, b = index[u], index[v]
                edges.add((min(a, b), max(a, b)))
    with open(os.path.join(args.out_dir, "edges.tsv"), "w") as fh:
        for a, b in sorted(edges):
            fh.write(f"{a}\t{b}\n")
    with open(os.path.join(args.out_dir, "features.csv"), "w") as fh:
        for pid in order:
            fh.write(",".join(features[pid]) + "\n")
    with open(os.path.join(args.out_dir, "labels.csv"), "w") as fh:
        for pid in order:
            fh.write(f"{class_index[labels[pid]]}\n")
    print(f"nodes={len(order)} edges={len(edges)} features={len(features[order[0]])} classes={len(classes)}")


if __name__ == "__main__":
    main()
