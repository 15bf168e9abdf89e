"""Turn the HetRec 2011 lastfm-2k listening counts into train/val/test TSVs.

Input is user_artists.dat (userID <tab> artistID <tab> weight, one header
line). Listening counts are binarized: any positive weight becomes a single
implicit interaction. Edges are split globally at random, 7:2:1 by default,
and written as bare user<tab>item pairs that the loader can re-index.

Usage:
    python3 scripts/prepare_lastfm.py path/to/user_artists.dat [--out data/lastfm]
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from scar.data import split_edges


def read_user_artists(path):
    """Parse user_artists.dat into a unique (E, 2) int array of positive edges."""
    pairs = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if lineno == 1 and not parts[0].isdigit():
                continue  # column header
            if len(parts) != 3:
                raise SystemExit(f"{path}:{lineno}: expected 3 tab-separated fields")
            user, artist, weight = parts
            if float(weight) > 0:
                pairs.add((int(user), int(artist)))
    if not pairs:
        raise SystemExit(f"{path}: no positive interactions found")
    return np.array(sorted(pairs), dtype=np.int64)


def write_split(path, edges):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in edges:
            fh.write(f"{u}\t{i}\n")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("input", help="path to user_artists.dat")
    ap.add_argument("--out", default=os.path.join("data", "lastfm"),
                    help="output directory (default: data/lastfm)")
    ap.add_argument("--ratios", default="0.7,0.2,0.1",
                    help="train,val,test edge ratios (default: 0.7,0.2,0.1)")
    ap.add_argument("--seed", type=int, default=0, help="split seed (default: 0)")
    args = ap.parse_args(argv)

    ratios = tuple(float(r) for r in args.ratios.split(","))
    if len(ratios) != 3:
        ap.error("--ratios needs exactly three comma-separated numbers")

    edges = read_user_artists(args.input)
    train, val, test = split_edges(edges, ratios=ratios, seed=args.seed)

    os.makedirs(args.out, exist_ok=True)
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_split(os.path.join(args.out, f"{name}.tsv"), part)

    users = np.unique(edges[:, 0]).size
    items = np.unique(edges[:, 1]).size
    print(f"{len(edges)} interactions, {users} users, {items} artists")
    print(f"train/val/test = {len(train)}/{len(val)}/{len(test)} -> {args.out}")


if __name__ == "__main__":
    main()
