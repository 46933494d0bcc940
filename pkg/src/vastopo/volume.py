"""Voxel volumes, the RVOL file format, connected components and vessel phantoms.

Voxel order is x-fastest everywhere: ``index = x + nx * (y + ny * z)``.  In
memory a volume is a numpy array indexed ``[x, y, z]``, so the flat order is
``array.ravel(order="F")``.
"""
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .validation import ValidationError, as_array, check_binary_mask, make_rng

MAGIC = b"RVOL1\n"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_HEADER_RE = re.compile(
    r"^dims=(\d+),(\d+),(\d+);spacing=([^,;]+),([^,;]+),([^,;]+);dtype=(f32|u8);$"
)


class RvolError(ValueError):
    """Base class for RVOL read errors."""


class RvolFormatError(RvolError):
    """Magic bytes absent: not an RVOL file."""


class RvolHeaderError(RvolError):
    """Header line missing or malformed."""


class RvolTruncatedError(RvolError):
    """Payload ends inside an element."""


class RvolLengthError(RvolError):
    """Payload element count differs from the header dims."""


class PhantomError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3D grid with spacing metadata.

    ``array`` is indexed ``[x, y, z]``.  Float data is stored as float32 and
    label/mask data as uint8; the array is made read-only on construction.
    """

    array: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.array)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"Volume needs a 3D array with positive dims, got {arr.shape}")
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        elif arr.dtype == bool or np.issubdtype(arr.dtype, np.integer):
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValidationError("label volumes must fit in 0..255")
            arr = arr.astype(np.uint8)
        else:
            raise ValidationError(f"unsupported volume dtype {arr.dtype}")
        arr = arr.copy()
        arr.flags.writeable = False
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not (s > 0) or not math.isfinite(s) for s in spacing):
            raise ValidationError(f"spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "array", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return tuple(int(n) for n in self.array.shape)

    @property
    def dtype_code(self):
        return "f32" if self.array.dtype == np.float32 else "u8"

    @property
    def data(self):
        """Flat x-fastest copy of the voxel values."""
        return self.array.ravel(order="F")

    @classmethod
    def from_flat(cls, data, dims, spacing=(1.0, 1.0, 1.0)):
        data = np.asarray(data)
        if data.size != int(np.prod(dims)):
            raise ValidationError(f"data length {data.size} != prod(dims) for dims {tuple(dims)}")
        return cls(data.reshape(tuple(dims), order="F"), spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.array.dtype == other.array.dtype
            and np.array_equal(self.array, other.array)
        )

    __hash__ = None


def flat_index(x, y, z, dims):
    nx, ny, _ = dims
    return x + nx * (y + ny * z)


# ---------------------------------------------------------------------------
# RVOL I/O


def save_rvol(volume, path):
    header = "dims={},{},{};spacing={},{},{};dtype={};\n".format(
        *volume.dims, *(repr(s) for s in volume.spacing), volume.dtype_code
    )
    payload = volume.data.astype(_DTYPES[volume.dtype_code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("utf-8"))
        fh.write(payload)


def load_rvol(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise RvolFormatError(f"{path}: missing RVOL1 magic bytes")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise RvolHeaderError(f"{path}: header line is not terminated")
    try:
        line = raw[len(MAGIC):end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise RvolHeaderError(f"{path}: header is not UTF-8") from exc
    m = _HEADER_RE.match(line)
    if m is None:
        raise RvolHeaderError(f"{path}: malformed header {line!r}")
    dims = tuple(int(v) for v in m.group(1, 2, 3))
    try:
        spacing = tuple(float(v) for v in m.group(4, 5, 6))
    except ValueError as exc:
        raise RvolHeaderError(f"{path}: bad spacing in header {line!r}") from exc
    if min(dims) < 1:
        raise RvolHeaderError(f"{path}: dims must be positive, got {dims}")
    dtype = _DTYPES[m.group(7)]
    payload = raw[end + 1:]
    if len(payload) % dtype.itemsize:
        raise RvolTruncatedError(
            f"{path}: payload of {len(payload)} bytes ends inside a {dtype.itemsize}-byte element"
        )
    count = len(payload) // dtype.itemsize
    expected = dims[0] * dims[1] * dims[2]
    if count != expected:
        raise RvolLengthError(f"{path}: header dims {dims} need {expected} elements, payload has {count}")
    data = np.frombuffer(payload, dtype=dtype)
    try:
        return Volume.from_flat(data, dims, spacing)
    except ValidationError as exc:
        raise RvolHeaderError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Connected components


def connected_components(mask, connectivity=26):
    """Label the connected components of a binary mask.

    Labels are 1..count in order of first encounter along the x-fastest scan;
    0 marks background.  Returns ``(label_array, count)``.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    arr = check_binary_mask(mask)
    rank = 1 if connectivity == 6 else 3
    structure = ndimage.generate_binary_structure(3, rank)
    # label() scans in C order; transposing to [z, y, x] makes that x-fastest
    labels, count = ndimage.label(arr.T, structure=structure)
    return np.ascontiguousarray(labels.T).astype(np.int32), int(count)


# ---------------------------------------------------------------------------
# Synthetic phantom


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    seed: int = 0
    branch_count: int = 2
    tube_radius_range: tuple = (1.5, 2.5)
    class_count: int = 3
    spacing: tuple = field(default=(1.0, 1.0, 1.0))

    def validate(self):
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise PhantomError(f"dims must be three positive ints, got {self.dims}")
        if self.branch_count < 1:
            raise PhantomError("branch_count must be >= 1")
        if self.class_count < 1:
            raise PhantomError("class_count must be >= 1")
        rmin, rmax = self.tube_radius_range
        if rmin < 1 or rmax < rmin:
            raise PhantomError(f"tube_radius_range must satisfy 1 <= min <= max, got {self.tube_radius_range}")


LIVER_BORDER = 2


def _splitmix_uniform(seed, n):
    """Counter-based uniforms in [0, 1): a splitmix64 hash of (seed, index)."""
    with np.errstate(over="ignore"):
        z = np.arange(n, dtype=np.uint64) + np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * np.uint64(0x9E3779B97F4A7C15)
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _segment_distance(points, a, b):
    """Euclidean distance from each row of ``points`` to the segment [a, b]."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def _polyline_distance(points, poly):
    d = np.full(len(points), np.inf)
    for a, b in zip(poly[:-1], poly[1:]):
        np.minimum(d, _segment_distance(points, a, b), out=d)
    return d


def _split_polyline(poly, parts):
    """Cut a polyline into ``parts`` pieces of equal arc length."""
    if parts == 1:
        return [poly]
    seg_len = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    if total == 0.0:
        return [poly] * parts

    def point_at(s):
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg_len) - 1)
        t = 0.0 if seg_len[i] == 0 else (s - cum[i]) / seg_len[i]
        return poly[i] + t * (poly[i + 1] - poly[i])

    cuts = [total * j / parts for j in range(parts + 1)]
    pieces = []
    for s0, s1 in zip(cuts[:-1], cuts[1:]):
        inner = [poly[i] for i in range(len(poly)) if s0 < cum[i] < s1]
        pieces.append(np.array([point_at(s0), *inner, point_at(s1)]))
    return pieces


def phantom_centerlines(spec):
    """Return ``(pieces, radii)``: centerline polylines and their tube radii."""
    spec.validate()
    dims = np.array(spec.dims, dtype=np.float64)
    rmin, rmax = (float(r) for r in spec.tube_radius_range)
    margin = LIVER_BORDER + math.ceil(rmax)
    lo = np.full(3, float(margin))
    hi = dims - 1 - margin
    if np.any(hi < lo):
        raise PhantomError(
            f"dims {tuple(spec.dims)} too small for tubes of radius {rmax} "
            f"inside a {LIVER_BORDER}-voxel border (need every dim >= {2 * margin + 1})"
        )
    rng = make_rng(spec.seed, "phantom")
    center = (lo + hi) / 2
    span = hi - lo

    if spec.branch_count == 1:
        y, z = math.floor(center[1]), math.floor(center[2])
        line = np.array([[lo[0], y, z], [hi[0], y, z]])
        return [line], [float(rng.uniform(rmin, rmax))]

    def jitter(scale):
        return rng.uniform(-scale, scale, size=3) * span

    root = np.array([lo[0], center[1], center[2]]) + jitter(0.1) * [0, 1, 1]
    fork = np.array([lo[0] + 0.4 * span[0], center[1], center[2]]) + jitter(0.05)
    root, fork = np.clip(root, lo, hi), np.clip(fork, lo, hi)
    pieces = [np.array([root, fork])]
    radii = [rmax]
    base_angle = rng.uniform(0, 2 * math.pi)
    for j in range(spec.branch_count):
        theta = base_angle + 2 * math.pi * j / spec.branch_count + rng.uniform(-0.3, 0.3)
        end = np.array([
            hi[0] - rng.uniform(0, 0.1) * span[0],
            center[1] + 0.5 * span[1] * math.cos(theta),
            center[2] + 0.5 * span[2] * math.sin(theta),
        ])
        end = np.clip(end, lo, hi)
        mid = np.clip((fork + end) / 2 + jitter(0.08), lo, hi)
        pieces.append(np.array([fork, mid, end]))
        radii.append(float(rng.uniform(rmin, rmax)))
    return pieces, radii


def make_phantom(spec):
    """Build a deterministic vessel phantom.

    Returns ``(intensity, vessel_mask, labels)`` as Volumes.  The vessel tree is
    a union of voxelized tubes (voxel centers strictly closer than the tube
    radius to a centerline).  Liver voxels (everything but a 2-voxel border)
    get the class of the nearest centerline piece, classes 1..class_count.
    """
    pieces, radii = phantom_centerlines(spec)
    dims = tuple(int(n) for n in spec.dims)
    grid = np.indices(dims).reshape(3, -1).T.astype(np.float64)  # C order over [x, y, z]

    vessel = np.zeros(len(grid), dtype=bool)
    for poly, r in zip(pieces, radii):
        vessel |= _polyline_distance(grid, poly) < r

    per_piece = max(1, math.ceil(spec.class_count / len(pieces)))
    sub_pieces = [sp for poly in pieces for sp in _split_polyline(poly, per_piece)]
    dist = np.stack([_polyline_distance(grid, sp) for sp in sub_pieces])
    nearest = np.argmin(dist, axis=0)  # first minimum wins ties
    classes = nearest % spec.class_count + 1

    coords = grid.astype(np.int64)
    upper = np.array(dims) - 1 - LIVER_BORDER
    liver = np.all((coords >= LIVER_BORDER) & (coords <= upper), axis=1)
    labels = np.where(liver, classes, 0)
    vessel &= liver

    # intensity: smooth base inside the liver, bright vessels, hashed noise
    rel = grid / np.maximum(np.array(dims) - 1, 1)
    smooth = 0.3 + 0.1 * np.cos(math.pi * rel[:, 0]) * np.cos(math.pi * rel[:, 1]) + 0.05 * rel[:, 2]
    intensity = np.where(liver, smooth, 0.05) + 0.6 * vessel
    shape = dims
    intensity = intensity.reshape(shape)
    noise = _splitmix_uniform(spec.seed, int(np.prod(dims))) * 0.1 - 0.05  # flat x-fastest
    intensity = intensity + noise.reshape(shape, order="F")

    return (
        Volume(intensity.astype(np.float32), spec.spacing),
        Volume(vessel.reshape(shape).astype(np.uint8), spec.spacing),
        Volume(labels.reshape(shape).astype(np.uint8), spec.spacing),
    )
