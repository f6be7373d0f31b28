"""Contour-aware heat conduction detection for event camera streams."""

from cvheat.events import Event, EventSlice, EventTensor, encode_frame, encode_voxel, parse_events, slice_stream
from cvheat.graphs import GraphBundle, GraphConfig, SpatialGraph, build_bundle, louvain_partition
from cvheat.heat import dct2, hco_apply, idct2

__all__ = [
    "Event",
    "EventSlice",
    "EventTensor",
    "GraphBundle",
    "GraphConfig",
    "SpatialGraph",
    "build_bundle",
    "dct2",
    "encode_frame",
    "encode_voxel",
    "hco_apply",
    "idct2",
    "louvain_partition",
    "parse_events",
    "slice_stream",
]

__version__ = "0.1.0"
