"""Exact Euclidean distance transform of a binary mask and its gradient field.

Distances are in voxel units and measured from each foreground voxel to the
nearest background voxel.  The squared transform is computed with separable
lower-envelope-of-parabolas passes on integers, so it is exact.
"""
from dataclasses import dataclass, field

import numpy as np

from .validation import ValidationError, check_binary_mask

EPS_GRAD = 1e-6


class NoBackgroundError(ValidationError):
    """The mask has no background voxel, so distances are undefined."""


@dataclass
class DistanceField:
    dist_sq: np.ndarray  # int64, exact squared distances
    dist: np.ndarray
    grad: np.ndarray = field(default=None)       # (nx, ny, nz, 3)
    unit_grad: np.ndarray = field(default=None)  # (nx, ny, nz, 3)

    @property
    def dims(self):
        return self.dist.shape


def _envelope_1d(f, out):
    """Lower envelope of parabolas for one scanline of squared distances.

    ``f`` holds integer costs with ``-1`` marking infinity.  Writes
    ``min_q (p - q)**2 + f[q]`` into ``out`` (``-1`` where every site is infinite).
    """
    n = len(f)
    sites = [q for q in range(n) if f[q] >= 0]
    if not sites:
        out[:] = -1
        return
    v = [sites[0]]
    z = [-np.inf]  # z[0] is never beaten, so v never empties
    for q in sites[1:]:
        fq = f[q] + q * q
        while True:
            p = v[-1]
            s = (fq - (f[p] + p * p)) / (2 * (q - p))
            if s > z[-1]:
                break
            v.pop()
            z.pop()
        v.append(q)
        z.append(s)
    k = 0
    for p in range(n):
        while k + 1 < len(v) and z[k + 1] < p:
            k += 1
        q = v[k]
        out[p] = (p - q) * (p - q) + f[q]


def squared_edt(mask):
    """Exact squared EDT as int64; -1 where no background exists on any path."""
    fg = check_binary_mask(mask)
    cost = np.where(fg, -1, 0).astype(np.int64)
    for axis in range(3):
        moved = np.moveaxis(cost, axis, -1)
        lines = moved.reshape(-1, moved.shape[-1])
        result = np.empty_like(lines)
        for i in range(len(lines)):
            line = lines[i]
            if line.min() >= 0 and line.max() == 0:
                result[i] = 0
            else:
                _envelope_1d(line.tolist(), result[i])
        cost = np.moveaxis(result.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(cost)


def _finish(dist_sq, fg):
    if fg.all():
        raise NoBackgroundError("mask has no background voxel; distance transform undefined")
    return edt_gradient(DistanceField(dist_sq=dist_sq, dist=np.sqrt(dist_sq.astype(np.float64))))


def exact_edt(mask):
    """Distance from each foreground voxel to the nearest background voxel.

    Returns a ``DistanceField`` with ``grad`` and ``unit_grad`` filled in.
    Raises ``NoBackgroundError`` on an all-foreground mask.
    """
    fg = check_binary_mask(mask)
    if fg.all():
        raise NoBackgroundError("mask has no background voxel; distance transform undefined")
    return _finish(squared_edt(fg), fg)


def brute_force_edt(mask):
    """All-pairs reference transform.  Quadratic; meant for masks up to 16^3."""
    fg = check_binary_mask(mask)
    if fg.all():
        raise NoBackgroundError("mask has no background voxel; distance transform undefined")
    bg_pts = np.argwhere(~fg)
    dist_sq = np.zeros(fg.shape, dtype=np.int64)
    for p in np.argwhere(fg):
        diff = bg_pts - p
        dist_sq[tuple(p)] = np.min(np.einsum("ij,ij->i", diff, diff))
    return _finish(dist_sq, fg)


def edt_gradient(d):
    """Fill ``grad`` (central differences, one-sided at borders) and ``unit_grad``.

    The gradient points toward increasing distance, i.e. into the vessel.
    Where ``|grad| < 1e-6`` the unit vector is zero.
    """
    dist = d.dist
    comps = []
    for axis in range(3):
        if dist.shape[axis] < 2:
            comps.append(np.zeros_like(dist))
        else:
            comps.append(np.gradient(dist, axis=axis, edge_order=1))
    grad = np.stack(comps, axis=-1)
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    ok = norm >= EPS_GRAD
    unit = np.where(ok, grad / np.where(ok, norm, 1.0), 0.0)
    d.grad = grad
    d.unit_grad = unit
    return d
