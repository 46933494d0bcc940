"""kNN vessel graphs over skeleton keypoints, adjacency normalization, node features."""
import json
from dataclasses import dataclass, replace

import numpy as np

from .skeleton import KeypointSet
from .validation import ValidationError

MAX_NODES = 1024
NODE_INPUT_WIDTH = 7  # normalized position (3) + radius (1) + orientation (3)


@dataclass(frozen=True)
class VesselGraph:
    keypoints: KeypointSet
    k: int
    adjacency: np.ndarray
    norm_adjacency: np.ndarray = None
    node_features: np.ndarray = None
    embeddings: np.ndarray = None

    @property
    def n(self):
        return len(self.keypoints)

    def edges(self):
        """Undirected edges ``(i, j)`` with ``i < j`` in lexicographic order."""
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return [(int(a), int(b)) for a, b in zip(i, j)]


def knn_indices(points, k):
    """Directed k nearest neighbors of every point, self excluded.

    Ties in distance go to the smaller index.
    """
    pts = np.asarray(points, dtype=np.float64)
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def build_knn(kp, k):
    n = len(kp)
    if n > MAX_NODES:
        raise ValidationError(f"graph has {n} nodes; at most {MAX_NODES} supported")
    if not 1 <= k < n:
        raise ValidationError(f"k must satisfy 1 <= k < N (N={n}), got k={k}")
    nbrs = knn_indices(kp.points, k)
    a = np.zeros((n, n), dtype=np.float64)
    a[np.repeat(np.arange(n), k), nbrs.ravel()] = 1.0
    a = np.maximum(a, a.T)
    np.fill_diagonal(a, 0.0)
    return VesselGraph(keypoints=kp, k=int(k), adjacency=a)


def normalize_adjacency(g):
    """Symmetric normalization with self-loops: D^-1/2 (A + I) D^-1/2."""
    a_hat = g.adjacency + np.eye(g.n)
    deg = a_hat.sum(axis=1)
    return replace(g, norm_adjacency=a_hat / np.sqrt(np.outer(deg, deg)))


def node_attributes(kp):
    """Raw MLP input rows: ``[p_hat, r_hat, n]`` with positions min-max scaled
    per axis to [0, 1] and radii divided by their maximum."""
    pts = kp.points
    lo, span = pts.min(axis=0), np.ptp(pts, axis=0)
    p_hat = np.where(span > 0, (pts - lo) / np.where(span > 0, span, 1.0), 0.0)
    rmax = kp.radii.max()
    r_hat = kp.radii / rmax if rmax > 0 else np.zeros_like(kp.radii)
    return np.hstack([p_hat, r_hat[:, None], kp.orientations])


def init_node_features(g, params, widths, prefix="mlp"):
    """Stack ``MLP([p_hat, r_hat, n])`` row by row into the node feature matrix."""
    from .autograd import Tape
    from .nn import mlp_forward

    if widths[0] != NODE_INPUT_WIDTH:
        raise ValidationError(f"MLP input width must be {NODE_INPUT_WIDTH}, got {widths[0]}")
    tape = Tape()
    x = mlp_forward(tape, params, tape.constant(node_attributes(g.keypoints)), widths, prefix)
    return replace(g, node_features=x.data.copy())


def encode_vessels(mask, n_keypoints=256, k=8, dist=None):
    """Skeletonize, sample keypoints and build the normalized kNN graph.

    ``k`` is clipped to ``N - 1`` when the skeleton yields few keypoints.
    """
    from .edt import exact_edt
    from .skeleton import sample_keypoints, skeletonize

    d = exact_edt(mask) if dist is None else dist
    kp = sample_keypoints(skeletonize(mask), d, n_keypoints)
    if len(kp) < 2:
        a = np.zeros((1, 1))
        return normalize_adjacency(VesselGraph(keypoints=kp, k=0, adjacency=a))
    return normalize_adjacency(build_knn(kp, min(int(k), len(kp) - 1)))


# ---------------------------------------------------------------------------
# JSON artifact


def _num(v):
    return format(float(v), ".17g")


def _dump(value):
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ",".join(_dump(v) for v in value) + "]"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return _num(value)


def graph_to_json(g):
    """Serialize with canonical key order and 17 significant digits."""
    kp = g.keypoints
    fields = [
        ("n", g.n),
        ("k", g.k),
        ("points", kp.points.tolist()),
        ("radii", kp.radii.tolist()),
        ("orientations", kp.orientations.tolist()),
        ("edges", [list(e) for e in g.edges()]),
        ("x", [] if g.node_features is None else g.node_features.tolist()),
    ]
    return "{" + ",".join(f'"{key}":{_dump(val)}' for key, val in fields) + "}\n"


def save_graph_json(g, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(graph_to_json(g))


def load_graph_json(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    n = int(doc["n"])
    kp = KeypointSet(
        points=np.array(doc["points"], dtype=np.float64).reshape(n, 3),
        radii=np.array(doc["radii"], dtype=np.float64).reshape(n),
        orientations=np.array(doc["orientations"], dtype=np.float64).reshape(n, 3),
    )
    a = np.zeros((n, n))
    for i, j in doc["edges"]:
        a[i, j] = a[j, i] = 1.0
    x = np.array(doc["x"], dtype=np.float64) if doc["x"] else None
    return normalize_adjacency(VesselGraph(keypoints=kp, k=int(doc["k"]), adjacency=a, node_features=x))
