"""Network blocks on top of the tape: node MLP, GCN stack, cross-attention."""
from dataclasses import dataclass

import numpy as np

from .autograd import ShapeError


@dataclass(frozen=True)
class GcnConfig:
    """Widths ``[d0, ..., d]`` give ``len(widths) - 1`` graph convolution layers.

    ``activation`` is applied after every layer except the last unless
    ``activate_last`` is set; a linear last layer leaves embedding signs free.
    """

    widths: tuple = (32, 32, 32)
    activation: str = "relu"
    activate_last: bool = False

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("GcnConfig needs at least one layer (two widths)")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_count(self):
        return len(self.widths) - 1


def init_mlp(params, widths, prefix="mlp"):
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
        params.glorot(f"{prefix}/w{i}", (w_in, w_out))
        params.zeros(f"{prefix}/b{i}", (1, w_out))


def mlp_forward(tape, params, x, widths, prefix="mlp"):
    """Linear layers with ReLU in between; the last layer stays linear."""
    if x.shape[1] != widths[0]:
        raise ShapeError(f"MLP expects {widths[0]} input columns, got shape {x.shape}")
    h = x
    n_layers = len(widths) - 1
    for i in range(n_layers):
        h = tape.add(tape.matmul(h, params[f"{prefix}/w{i}"]), params[f"{prefix}/b{i}"])
        if i < n_layers - 1:
            h = tape.relu(h)
    return h


def init_gcn(params, cfg, prefix="gcn"):
    for i, (w_in, w_out) in enumerate(zip(cfg.widths[:-1], cfg.widths[1:])):
        params.glorot(f"{prefix}/w{i}", (w_in, w_out))


def gcn_forward(tape, params, cfg, x, norm_adj, prefix="gcn"):
    """Stacked graph convolutions ``H <- act(A_norm H W)``; returns the last H."""
    n = x.shape[0]
    if norm_adj.shape != (n, n):
        raise ShapeError(f"normalized adjacency must be {n}x{n}, got {norm_adj.shape}")
    if x.shape[1] != cfg.widths[0]:
        raise ShapeError(f"GCN expects {cfg.widths[0]} input columns, got shape {x.shape}")
    h = x
    for i in range(cfg.layer_count):
        h = tape.matmul(norm_adj, tape.matmul(h, params[f"{prefix}/w{i}"]))
        last = i == cfg.layer_count - 1
        if cfg.activation == "relu" and (not last or cfg.activate_last):
            h = tape.relu(h)
    return h


def init_attention(params, d_query, d_kv, d_k, d_v, prefix="xattn"):
    params.glorot(f"{prefix}/wq", (d_query, d_k))
    params.glorot(f"{prefix}/wk", (d_kv, d_k))
    params.glorot(f"{prefix}/wv", (d_kv, d_v))


def attention(tape, q, k, v, bias=None):
    """``softmax(q k^T / sqrt(d_k) + bias) v``; returns ``(output, weights)``."""
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys but {v.shape[0]} values")
    logits = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / np.sqrt(q.shape[1]))
    if bias is not None:
        logits = tape.add(logits, bias)
    weights = tape.softmax_rows(logits)
    return tape.matmul(weights, v), weights


def cross_attention(tape, params, f, z, prefix="xattn", return_weights=False):
    """Image tokens ``f`` (T x d_f) attend over topology embeddings ``z`` (N x d)."""
    wq, wk, wv = (params[f"{prefix}/{n}"] for n in ("wq", "wk", "wv"))
    if f.shape[1] != wq.shape[0]:
        raise ShapeError(f"query projection expects width {wq.shape[0]}, tokens have shape {f.shape}")
    if z.shape[1] != wk.shape[0] or z.shape[1] != wv.shape[0]:
        raise ShapeError(f"key/value projections expect width {wk.shape[0]}, embeddings have shape {z.shape}")
    out, weights = attention(tape, tape.matmul(f, wq), tape.matmul(z, wk), tape.matmul(z, wv))
    return (out, weights) if return_weights else out
