"""Centerline extraction by directional thinning, and keypoint sampling.

Thinning removes simple border voxels (26-connectivity for the foreground,
6-connectivity for the background) in six directional sub-iterations until
nothing changes.  Voxels with a single foreground neighbor are curve ends and
are kept, so already-thin curves survive untouched.
"""
from dataclasses import dataclass
from itertools import product

import numba
import numpy as np

from .edt import DistanceField
from .validation import ValidationError, check_binary_mask


class EmptyMaskError(ValidationError):
    pass


_OFFSETS = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)  # index 13 is the center
_CENTER = 13


def _adjacency_tables():
    n = len(_OFFSETS)
    adj26 = np.full((n, 26), -1, dtype=np.int64)
    adj6 = np.full((n, 6), -1, dtype=np.int64)
    for i in range(n):
        k26 = k6 = 0
        for j in range(n):
            if i == j or j == _CENTER:
                continue
            diff = np.abs(_OFFSETS[i] - _OFFSETS[j])
            if diff.max() == 1:
                adj26[i, k26] = j
                k26 += 1
                if diff.sum() == 1:
                    adj6[i, k6] = j
                    k6 += 1
    l1 = np.abs(_OFFSETS).sum(axis=1)
    in18 = (l1 >= 1) & (l1 <= 2)
    faces = np.flatnonzero(l1 == 1)
    return adj26, adj6, in18, faces


_ADJ26, _ADJ6, _IN18, _FACES = _adjacency_tables()
# sub-iteration order: -x, +x, -y, +y, -z, +z
_DIRECTIONS = np.array(
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]], dtype=np.int64
)


@numba.njit(cache=True)
def _gather(img, x, y, z, offsets, nb):
    for i in range(27):
        nb[i] = img[x + offsets[i, 0], y + offsets[i, 1], z + offsets[i, 2]]


@numba.njit(cache=True)
def _is_simple(nb, adj26, adj6, in18, faces):
    stack = np.empty(27, dtype=np.int64)
    seen = np.zeros(27, dtype=np.bool_)
    # foreground: exactly one 26-component among the 26 neighbors
    comps = 0
    for s in range(27):
        if s == 13 or nb[s] == 0 or seen[s]:
            continue
        comps += 1
        if comps > 1:
            return False
        top = 0
        stack[0] = s
        seen[s] = True
        while top >= 0:
            i = stack[top]
            top -= 1
            for k in range(26):
                j = adj26[i, k]
                if j < 0:
                    break
                if nb[j] != 0 and not seen[j]:
                    seen[j] = True
                    top += 1
                    stack[top] = j
    if comps != 1:
        return False
    # background: exactly one 6-component within the 18-neighborhood touching a face
    seen[:] = False
    comps = 0
    for f in range(6):
        s = faces[f]
        if nb[s] != 0 or seen[s]:
            continue
        comps += 1
        if comps > 1:
            return False
        top = 0
        stack[0] = s
        seen[s] = True
        while top >= 0:
            i = stack[top]
            top -= 1
            for k in range(6):
                j = adj6[i, k]
                if j < 0:
                    break
                if in18[j] and nb[j] == 0 and not seen[j]:
                    seen[j] = True
                    top += 1
                    stack[top] = j
    return comps == 1


@numba.njit(cache=True)
def _deletable(img, x, y, z, nb, offsets, adj26, adj6, in18, faces):
    _gather(img, x, y, z, offsets, nb)
    count = 0
    for i in range(27):
        if i != 13 and nb[i] != 0:
            count += 1
    if count <= 1:
        return False
    return _is_simple(nb, adj26, adj6, in18, faces)


@numba.njit(cache=True)
def _thin(img, directions, offsets, adj26, adj6, in18, faces):
    nx, ny, nz = img.shape
    nb = np.empty(27, dtype=np.uint8)
    cand = np.empty((nx * ny * nz, 3), dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for d in range(6):
            dx, dy, dz = directions[d, 0], directions[d, 1], directions[d, 2]
            n = 0
            for x in range(1, nx - 1):
                for y in range(1, ny - 1):
                    for z in range(1, nz - 1):
                        if img[x, y, z] == 0 or img[x + dx, y + dy, z + dz] != 0:
                            continue
                        if _deletable(img, x, y, z, nb, offsets, adj26, adj6, in18, faces):
                            cand[n, 0] = x
                            cand[n, 1] = y
                            cand[n, 2] = z
                            n += 1
            # sequential re-check keeps every deletion topology-preserving
            for i in range(n):
                x, y, z = cand[i, 0], cand[i, 1], cand[i, 2]
                if _deletable(img, x, y, z, nb, offsets, adj26, adj6, in18, faces):
                    img[x, y, z] = 0
                    changed = True
    return img


@dataclass
class Skeleton:
    voxels: np.ndarray  # (n, 3) int64, lexicographic order
    source_dims: tuple

    def to_mask(self):
        mask = np.zeros(self.source_dims, dtype=bool)
        if len(self.voxels):
            mask[tuple(self.voxels.T)] = True
        return mask

    def __len__(self):
        return len(self.voxels)


def skeletonize(mask):
    """Thin a binary mask to a one-voxel-wide centerline.

    The result is a subset of the mask with the same number of 26-connected
    components.  Deterministic: fixed sub-iteration order, lexicographic scan.
    """
    fg = check_binary_mask(mask)
    if not fg.any():
        raise EmptyMaskError("cannot skeletonize a mask with no foreground")
    padded = np.pad(fg, 1).astype(np.uint8)
    _thin(padded, _DIRECTIONS, _OFFSETS, _ADJ26, _ADJ6, _IN18, _FACES)
    thin = padded[1:-1, 1:-1, 1:-1].astype(bool)
    return Skeleton(voxels=np.argwhere(thin).astype(np.int64), source_dims=fg.shape)


@dataclass
class KeypointSet:
    points: np.ndarray        # (N, 3) float, voxel units
    radii: np.ndarray         # (N,)
    orientations: np.ndarray  # (N, 3) unit or zero rows

    def __len__(self):
        return len(self.points)


def farthest_point_order(points, n):
    """Greedy max-min selection seeded at row 0; ties go to the lowest row."""
    pts = np.asarray(points, dtype=np.int64)
    chosen = [0]
    diff = pts - pts[0]
    best = np.einsum("ij,ij->i", diff, diff)
    for _ in range(1, n):
        i = int(np.argmax(best))
        chosen.append(i)
        diff = pts - pts[i]
        np.minimum(best, np.einsum("ij,ij->i", diff, diff), out=best)
    return np.array(chosen, dtype=np.int64)


def sample_keypoints(sk, d, n_req):
    """Pick up to ``n_req`` spatially uniform skeleton keypoints.

    Small skeletons are kept whole (in skeleton order); otherwise farthest-
    point sampling is run from the lexicographically smallest voxel.  Radius
    is the distance-transform value and orientation the unit gradient at
    each keypoint.
    """
    if int(n_req) < 1:
        raise ValidationError(f"n_req must be >= 1, got {n_req}")
    if len(sk) == 0:
        raise EmptyMaskError("skeleton has no voxels")
    if not isinstance(d, DistanceField):
        raise TypeError("d must be a DistanceField")
    voxels = sk.voxels
    if len(voxels) <= n_req:
        idx = np.arange(len(voxels))
    else:
        idx = farthest_point_order(voxels, int(n_req))
    pts = voxels[idx]
    key = tuple(pts.T)
    return KeypointSet(
        points=pts.astype(np.float64),
        radii=d.dist[key].astype(np.float64),
        orientations=d.unit_grad[key].astype(np.float64),
    )
