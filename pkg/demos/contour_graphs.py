"""From events to contour graphs on one synthetic slice.

A slice of events becomes a two-channel frame. Every 8x8 patch with events is
a node of the global graph, and nearby patches are joined. Louvain splits that
graph into communities; the large ones are kept and each collapses to one
contour node.

    python demos/contour_graphs.py [out.txt]
"""

import sys

import numpy as np

from cvheat.events import encode_frame, slice_stream
from cvheat.graphs import GraphConfig, build_bundle, dump_bundle
from cvheat.synthetic import scene_stream


def main(out=None):
    res = 128
    events, gts = scene_stream(1, res, 10_000, seed=4, noise_rate=0.15)
    frame = encode_frame(slice_stream(events, 10_000)[0], res, res)
    print(f"{len(events)} events, {len(gts)} objects")
    for g in gts:
        print(f"  class {g.class_id} box " + " ".join(f"{v * res:.0f}" for v in g.box))

    bundle = build_bundle(frame, GraphConfig(node_threshold=8, dist_threshold=24.0))
    sizes = sorted((len(s) for s in bundle.communities), reverse=True)
    print(f"global graph: {bundle.global_graph.num_nodes} nodes, {bundle.global_graph.num_edges} edges")
    print(f"communities by size: {sizes}")
    print(f"kept {len(bundle.kept)}; contour node centres (x, y):")
    for p in bundle.contour.pos:
        print(f"  {p[0]:6.1f} {p[1]:6.1f}")

    if out:
        with open(out, "w") as fh:
            fh.write(dump_bundle(bundle))
        print(f"full dump written to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
