"""Vascular-topology guided segmentation: vessel graphs, topology fusion and a
structural contrastive loss, with a CPU-scale toy backbone."""
from .edt import DistanceField, brute_force_edt, exact_edt
from .estimators import VasGuideSegmenter, VesselTopologyEncoder
from .graph import VesselGraph, build_knn, encode_vessels, init_node_features, normalize_adjacency
from .metrics import MetricReport, evaluate
from .pipeline import BackboneConfig
from .scl import MemoryBank, SclConfig
from .skeleton import KeypointSet, Skeleton, sample_keypoints, skeletonize
from .volume import PhantomSpec, Volume, connected_components, load_rvol, make_phantom, save_rvol

__version__ = "0.1.0"
