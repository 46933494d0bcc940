"""Toy token backbone with vessel-topology fusion, training and inference.

The backbone cuts the volume into non-overlapping P^3 patches, projects each
patch linearly to a token (plus a learned position embedding), optionally
fuses topology information into the tokens, and decodes every token back to
per-voxel class logits with one linear head.

Internally voxels are kept in *patch order*: row ``t * P**3 + l`` is local
voxel ``l`` of token ``t`` (both x-fastest).  ``Sample.order`` maps those rows
back to flat x-fastest voxel indices.
"""
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .autograd import ParamStore, Tape, adam_step, load_checkpoint, save_checkpoint
from .edt import exact_edt
from .graph import NODE_INPUT_WIDTH, encode_vessels, node_attributes
from .nn import GcnConfig, attention, cross_attention, gcn_forward, init_attention, init_gcn, init_mlp, mlp_forward
from .scl import MemoryBank, SclConfig, class_centers, memory_update, scl_loss, select_anchors
from .validation import ValidationError, as_array, check_binary_mask, check_label_volume, check_same_dims

log = logging.getLogger(__name__)

FUSIONS = ("none", "concat", "distance_bias", "cross_attention")
SCL_MODES = ("none", "fifo", "cats")
DENOMINATOR_MODES = ("paper_literal", "with_positive")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    """Everything needed to rebuild a model.

    ``class_count`` counts output channels including background (label 0),
    so a phantom with three liver classes needs ``class_count=4``.
    """

    patch_size: int = 4
    token_dim: int = 32
    d_k: int = 32
    class_count: int = 4
    fusion: str = "cross_attention"
    scl: str = "cats"
    lambda_scl: float = 0.1
    lr: float = 0.05
    iterations: int = 200
    seed: int = 0
    n_keypoints: int = 256
    k: int = 8
    node_dim: int = 32
    mlp_hidden: int = 32
    gcn_widths: tuple = (32, 32, 32)
    temperature: float = 0.1
    percentile: float = 95.0
    memory_capacity: int = 16
    denominator_mode: str = "paper_literal"

    def __post_init__(self):
        if self.class_count < 2:
            raise ValidationError("class_count must be >= 2")
        if self.patch_size < 1:
            raise ValidationError("patch_size must be >= 1")
        if self.fusion not in FUSIONS:
            raise ValidationError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.scl not in SCL_MODES:
            raise ValidationError(f"scl must be one of {SCL_MODES}, got {self.scl!r}")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ValidationError(f"denominator_mode must be one of {DENOMINATOR_MODES}")
        if self.gcn_widths[0] != self.node_dim:
            raise ValidationError(f"gcn_widths must start at node_dim={self.node_dim}")
        object.__setattr__(self, "gcn_widths", tuple(int(w) for w in self.gcn_widths))

    @property
    def uses_graph(self):
        return self.fusion in ("concat", "cross_attention")

    @property
    def scl_config(self):
        return SclConfig(
            temperature=self.temperature,
            percentile=self.percentile,
            capacity=self.memory_capacity,
            strategy="cats" if self.scl == "none" else self.scl,
            denominator_mode=self.denominator_mode,
        )

    def check_dims(self, dims):
        if any(n % self.patch_size for n in dims):
            raise ValidationError(f"dims {tuple(dims)} are not divisible by patch size {self.patch_size}")


# ---------------------------------------------------------------------------
# Per-volume preprocessing


@dataclass
class Sample:
    """A volume prepared for the backbone (everything that is not learned)."""

    dims: tuple
    patches: np.ndarray          # T x P^3 intensities
    order: np.ndarray            # row -> flat voxel index
    token_of_row: np.ndarray     # row -> token index
    node_attrs: np.ndarray = None
    norm_adj: np.ndarray = None
    edt_tokens: np.ndarray = None
    vessel_rows: np.ndarray = None  # vessel mask in row order
    labels_rows: np.ndarray = None

    @property
    def token_count(self):
        return self.patches.shape[0]


def patch_layout(dims, p):
    """Return ``(order, token_of_row)`` for patch-ordered rows."""
    nx, ny, nz = dims
    gx, gy, gz = nx // p, ny // p, nz // p
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    token = (x // p) + gx * ((y // p) + gy * (z // p))
    local = (x % p) + p * ((y % p) + p * (z % p))
    row = (token * p**3 + local).ravel(order="F")
    order = np.empty(nx * ny * nz, dtype=np.int64)
    order[row] = np.arange(nx * ny * nz)
    return order, order_to_token(order, dims, p)


def order_to_token(order, dims, p):
    nx, ny, _ = dims
    gx, gy = nx // p, ny // p
    x = order % nx
    y = (order // nx) % ny
    z = order // (nx * ny)
    return (x // p) + gx * ((y // p) + gy * (z // p))


def to_rows(volume_array, order):
    return volume_array.ravel(order="F")[order]


def prepare_sample(intensity, vessel_mask, cfg, labels=None):
    """Cut patches and, when the fusion needs it, build the topology inputs.

    With ``fusion='none'`` the vessel mask is never read.
    """
    img = as_array(intensity).astype(np.float64)
    dims = img.shape
    cfg.check_dims(dims)
    p = cfg.patch_size
    order, token_of_row = patch_layout(dims, p)
    patches = to_rows(img, order).reshape(-1, p**3)
    sample = Sample(dims=dims, patches=patches, order=order, token_of_row=token_of_row)
    if cfg.fusion != "none":
        if vessel_mask is None:
            raise ValidationError(f"fusion={cfg.fusion!r} needs a vessel mask")
        check_same_dims(img, vessel_mask, ("intensity", "vessel mask"))
        mask = check_binary_mask(vessel_mask, "vessel mask")
        sample.vessel_rows = to_rows(mask, order)
        if not mask.any():
            raise ValidationError("vessel mask is empty")
        dist = exact_edt(mask)
        if cfg.uses_graph:
            g = encode_vessels(mask, cfg.n_keypoints, cfg.k, dist=dist)
            sample.node_attrs = node_attributes(g.keypoints)
            sample.norm_adj = g.norm_adjacency
        if cfg.fusion == "distance_bias":
            sample.edt_tokens = to_rows(dist.dist, order).reshape(-1, p**3).mean(axis=1)
    if labels is not None:
        check_same_dims(img, labels, ("intensity", "labels"))
        lab = check_label_volume(labels, cfg.class_count - 1)
        sample.labels_rows = to_rows(lab, order)
    return sample


# ---------------------------------------------------------------------------
# Parameters and forward pass


def init_params(cfg, token_count):
    params = ParamStore(cfg.seed)
    p3 = cfg.patch_size**3
    params.glorot("stem/w", (p3, cfg.token_dim))
    params.add("stem/pos", params.rng("stem/pos").normal(0.0, 0.1, size=(token_count, cfg.token_dim)))
    params.glorot("head/w", (cfg.token_dim, p3 * cfg.class_count))
    params.zeros("head/b", (1, p3 * cfg.class_count))
    if cfg.uses_graph:
        init_mlp(params, mlp_widths(cfg), "mlp")
        init_gcn(params, gcn_config(cfg), "gcn")
    if cfg.fusion == "cross_attention":
        init_attention(params, cfg.token_dim, cfg.gcn_widths[-1], cfg.d_k, cfg.token_dim, "xattn")
    elif cfg.fusion == "concat":
        params.glorot("concat/w", (cfg.token_dim + cfg.gcn_widths[-1], cfg.token_dim))
        params.zeros("concat/b", (1, cfg.token_dim))
    elif cfg.fusion == "distance_bias":
        init_attention(params, cfg.token_dim, cfg.token_dim, cfg.d_k, cfg.token_dim, "dbias")
        params.add("dbias/alpha", np.ones((1, 1)))
    return params


def mlp_widths(cfg):
    return (NODE_INPUT_WIDTH, cfg.mlp_hidden, cfg.node_dim)


def gcn_config(cfg):
    return GcnConfig(widths=cfg.gcn_widths)


def encode_tokens(tape, params, sample):
    """Tokens F = patches @ W_stem + position embedding (T x d_f)."""
    return tape.add(tape.matmul(tape.constant(sample.patches), params["stem/w"]), params["stem/pos"])


def topology_embeddings(tape, params, sample, cfg):
    x = mlp_forward(tape, params, tape.constant(sample.node_attrs), mlp_widths(cfg), "mlp")
    return gcn_forward(tape, params, gcn_config(cfg), x, tape.constant(sample.norm_adj), "gcn")


def fuse(tape, params, f, sample, cfg, z=None):
    """Inject topology into the tokens according to ``cfg.fusion``.

    none: F.  cross_attention: F + Attn(F Wq, Z Wk, Z Wv).  concat:
    [F, mean(Z)] W + b.  distance_bias: F + token self-attention whose
    logits get ``-alpha * mean patch distance`` of the key token.
    """
    if cfg.fusion == "none":
        return f
    if cfg.fusion in ("concat", "cross_attention") and z is None:
        raise ValidationError(f"fusion={cfg.fusion!r} needs topology embeddings")
    if cfg.fusion == "cross_attention":
        return tape.add(f, cross_attention(tape, params, f, z, "xattn"))
    if cfg.fusion == "concat":
        zbar = tape.take_rows(tape.mean_rows(z), np.zeros(f.shape[0], dtype=np.int64))
        cat = tape.concat_cols([f, zbar])
        return tape.add(tape.matmul(cat, params["concat/w"]), params["concat/b"])
    if sample.edt_tokens is None:
        raise ValidationError("distance_bias fusion needs per-token distances")
    bias = tape.mul(params["dbias/alpha"], tape.constant(-sample.edt_tokens[None, :]))
    q = tape.matmul(f, params["dbias/wq"])
    k = tape.matmul(f, params["dbias/wk"])
    v = tape.matmul(f, params["dbias/wv"])
    out, _ = attention(tape, q, k, v, bias=bias)
    return tape.add(f, out)


def decode_logits(tape, params, f, cfg):
    """Per-token linear head, unpatched to row-ordered voxel logits (V x C)."""
    token_logits = tape.add(tape.matmul(f, params["head/w"]), params["head/b"])
    return tape.reshape(token_logits, (-1, cfg.class_count))


def forward(tape, params, sample, cfg):
    """Return ``(logits, fused_tokens)``; logits rows are in patch order."""
    f = encode_tokens(tape, params, sample)
    z = topology_embeddings(tape, params, sample, cfg) if cfg.uses_graph else None
    fused = fuse(tape, params, f, sample, cfg, z)
    return decode_logits(tape, params, fused, cfg), fused


def softmax_np(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def total_loss(tape, params, sample, cfg, bank=None, anchor_voxels=None):
    """CE over every voxel plus ``lambda_scl`` times the contrastive loss.

    Returns ``(total, ce, scl, anchors)``; ``scl`` is None when the
    contrastive term is off or no anchors were found.  ``anchor_voxels``
    pins the anchor set (used by gradient checks, where re-selecting anchors
    under perturbation would make the loss discontinuous).
    """
    logits, fused = forward(tape, params, sample, cfg)
    ce = tape.cross_entropy(logits, sample.labels_rows)
    if cfg.scl == "none":
        return ce, ce, None, None
    scfg = cfg.scl_config
    conf = softmax_np(logits.data).max(axis=1)
    anchors = select_anchors(fused, conf, sample.labels_rows, scfg, rows=sample.token_of_row)
    if anchor_voxels is not None:
        anchors.voxels = {c: np.asarray(v, dtype=np.int64) for c, v in anchor_voxels.items()}
        anchors.confidence = {c: conf[v] for c, v in anchors.voxels.items()}
    if anchors.count() == 0:
        return ce, ce, None, anchors
    # fusion=none removes the vessel branch entirely, vessel center included
    vessel = sample.vessel_rows if cfg.fusion != "none" else None
    centers, vessel_center = class_centers(tape, fused, sample.labels_rows, vessel, rows=sample.token_of_row)
    scl = scl_loss(tape, anchors, centers, vessel_center, bank, scfg)
    total = tape.add(ce, tape.scale(scl, cfg.lambda_scl))
    return total, ce, scl, anchors


# ---------------------------------------------------------------------------
# Training and inference


@dataclass
class TrainedModel:
    cfg: BackboneConfig
    params: ParamStore
    bank: MemoryBank
    dims: tuple
    history: list = field(default_factory=list)  # (iter, ce, scl, total)

    def log_csv(self):
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["iter", "ce", "scl", "total"])
        for it, ce, scl, total in self.history:
            w.writerow([it, repr(ce), repr(scl), repr(total)])
        return out.getvalue()


def train(intensity, labels, vessel_mask, cfg):
    """Train a fresh model on one volume; deterministic given ``cfg.seed``."""
    sample = prepare_sample(intensity, vessel_mask, cfg, labels=labels)
    params = init_params(cfg, sample.token_count)
    bank = MemoryBank(cfg.memory_capacity, cfg.scl_config.strategy)
    model = TrainedModel(cfg, params, bank, sample.dims)
    for it in range(cfg.iterations):
        params.zero_grad()
        tape = Tape()
        total, ce, scl, anchors = total_loss(tape, params, sample, cfg, bank)
        row = (it, ce.item(), 0.0 if scl is None else scl.item(), total.item())
        if not all(math.isfinite(v) for v in row[1:]):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it}: ce={row[1]!r} scl={row[2]!r} total={row[3]!r}; "
                f"anchors={None if anchors is None else anchors.count()}, bank size={len(bank)}"
            )
        model.history.append(row)
        tape.backward(total)
        adam_step(params, cfg.lr)
        if anchors is not None and cfg.scl != "none":
            memory_update(bank, anchors)
    return model


def train_toy(prefix, cfg):
    """Train on the phantom files ``<prefix>.{ct,labels,vessel}.rvol``."""
    from .volume import load_rvol

    ct = load_rvol(f"{prefix}.ct.rvol")
    labels = load_rvol(f"{prefix}.labels.rvol")
    vessel = load_rvol(f"{prefix}.vessel.rvol")
    return train(ct, labels, vessel, cfg)


def predict_proba(model, intensity, vessel_mask=None):
    """Per-voxel class probabilities, shape ``dims + (class_count,)``."""
    cfg = model.cfg
    dims = as_array(intensity).shape
    if tuple(dims) != tuple(model.dims):
        raise ValidationError(f"model was trained on dims {model.dims}, got dims {dims}")
    sample = prepare_sample(intensity, vessel_mask, cfg)
    logits, _ = forward(Tape(), model.params, sample, cfg)
    probs = np.empty_like(logits.data)
    probs[sample.order] = softmax_np(logits.data)
    return probs.reshape(tuple(dims) + (cfg.class_count,), order="F")


def infer(model, intensity, vessel_mask=None):
    """Argmax labels as a uint8 array; ties go to the smallest class index."""
    return np.argmax(predict_proba(model, intensity, vessel_mask), axis=-1).astype(np.uint8)


# ---------------------------------------------------------------------------
# Checkpoints


_ENUMS = {
    "fusion": FUSIONS,
    "scl": SCL_MODES,
    "denominator_mode": DENOMINATOR_MODES,
}


def config_records(cfg, dims):
    rec = {"cfg/dims": np.array(dims, dtype=np.float64)}
    for name, value in asdict(cfg).items():
        if name in _ENUMS:
            value = _ENUMS[name].index(value)
        rec[f"cfg/{name}"] = np.atleast_1d(np.array(value, dtype=np.float64))
    return rec


def config_from_records(records):
    kwargs = {}
    for f in fields(BackboneConfig):
        key = f"cfg/{f.name}"
        if key not in records:
            raise ValidationError(f"checkpoint lacks config entry {key!r}")
        arr = records[key]
        if f.name in _ENUMS:
            kwargs[f.name] = _ENUMS[f.name][int(arr[0])]
        elif f.name == "gcn_widths":
            kwargs[f.name] = tuple(int(v) for v in arr)
        elif isinstance(f.default, int):
            kwargs[f.name] = int(arr[0])
        else:
            kwargs[f.name] = float(arr[0])
    return BackboneConfig(**kwargs), tuple(int(v) for v in records["cfg/dims"])


def save_model(model, path):
    records = {f"param/{n}": v for n, v in model.params.state_dict().items()}
    records.update(model.bank.to_records())
    records.update(config_records(model.cfg, model.dims))
    save_checkpoint(path, records)


def load_model(path):
    records = load_checkpoint(path)
    cfg, dims = config_from_records(records)
    p = cfg.patch_size
    params = init_params(cfg, (dims[0] // p) * (dims[1] // p) * (dims[2] // p))
    params.load_state_dict({k[len("param/"):]: v for k, v in records.items() if k.startswith("param/")})
    bank = MemoryBank.from_records(records, cfg.memory_capacity, cfg.scl_config.strategy)
    return TrainedModel(cfg, params, bank, dims)


def with_overrides(cfg, **kwargs):
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})


# ---------------------------------------------------------------------------
# Ablation and end-to-end gradient checks


def ablate(intensity, labels, vessel_mask, cfg, fusions=FUSIONS, scl_modes=SCL_MODES):
    """Train and score every (fusion, scl) pair on one volume.

    Returns rows ``(fusion, scl, dsc, miou, rvd)``.  ``vessel_mask`` may be
    None when only ``fusion='none'`` rows are requested.
    """
    from .metrics import evaluate

    rows = []
    for fusion in fusions:
        for scl in scl_modes:
            run_cfg = replace(cfg, fusion=fusion, scl=scl)
            model = train(intensity, labels, vessel_mask, run_cfg)
            report = evaluate(infer(model, intensity, vessel_mask), labels)
            rows.append((fusion, scl, report.macro_dsc, report.miou, report.mean_rvd))
    return rows


def ablation_csv(rows):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["fusion", "scl", "dsc", "miou", "rvd"])
    for fusion, scl, dsc, miou, rvd in rows:
        w.writerow([fusion, scl, repr(dsc), repr(miou), repr(rvd)])
    return out.getvalue()


def gradcheck_config(fusion, seed=0, denominator_mode="paper_literal", scl="cats"):
    """Narrow widths so finite differences stay cheap on small phantoms."""
    return BackboneConfig(
        patch_size=4, token_dim=6, d_k=5, class_count=4, fusion=fusion, scl=scl,
        lambda_scl=1.0, seed=seed, n_keypoints=16, k=3, node_dim=6, mlp_hidden=5,
        gcn_widths=(6, 5, 4), memory_capacity=4, denominator_mode=denominator_mode,
    )


def gradcheck_pipeline(fusion, scale=8, seed=0, denominator_mode="paper_literal", max_entries=12, eps=1e-5):
    """Finite-difference check of CE + lambda * SCL through the whole model.

    Uses a ``scale``^3 phantom, a memory bank pre-filled with random entries
    and a pinned anchor set.  Returns the worst relative error.
    """
    from .autograd import grad_check
    from .volume import PhantomSpec, make_phantom

    spec = PhantomSpec(dims=(scale,) * 3, seed=seed, branch_count=2, tube_radius_range=(1, 1), class_count=3)
    ct, vessel, labels = make_phantom(spec)
    cfg = gradcheck_config(fusion, seed, denominator_mode)
    sample = prepare_sample(ct, vessel, cfg, labels=labels)
    params = init_params(cfg, sample.token_count)
    rng = np.random.default_rng(seed)
    for name, t in params.items():  # move off the zero/one init so every path is exercised
        t.data = t.data + rng.normal(0.0, 0.3, size=t.shape)
    bank = MemoryBank(cfg.memory_capacity, "cats")
    for c in range(1, cfg.class_count):
        for _ in range(2):
            bank.insert(c, rng.normal(size=cfg.token_dim), rng.uniform())
    _, _, _, anchors = total_loss(Tape(), params, sample, cfg, bank)
    pinned = {c: v for c, v in anchors.voxels.items() if len(v)}
    if not pinned:
        raise ValidationError("gradient check found no anchors")

    def loss(tape):
        return total_loss(tape, params, sample, cfg, bank, anchor_voxels=pinned)[0]

    return grad_check(loss, params, eps=eps, max_entries=max_entries, seed=seed)
