"""Input validation helpers shared by the functional API and the estimators."""
import hashlib

import numpy as np


class ValidationError(ValueError):
    """Raised when an input array or volume violates a documented precondition."""


class NonBinaryMaskError(ValidationError):
    pass


def sub_seed(seed, name):
    """Derive a reproducible child seed from ``seed`` and a component name."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed, name):
    return np.random.default_rng(sub_seed(seed, name))


def as_array(x):
    """Return the 3D ndarray behind a ``Volume`` or an array-like."""
    arr = getattr(x, "array", x)
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValidationError(f"expected a 3D volume, got array of shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValidationError(f"volume dims must be >= 1, got {arr.shape}")
    return arr


def check_binary_mask(x, name="mask"):
    """Validate a binary volume and return it as a boolean array.

    Accepts bool arrays or numeric arrays whose values are all 0 or 1.
    """
    arr = as_array(x)
    if arr.dtype == bool:
        return arr
    if not np.all((arr == 0) | (arr == 1)):
        bad = np.unique(arr[(arr != 0) & (arr != 1)])[:5]
        raise NonBinaryMaskError(f"{name} must be binary (0/1); found values {bad.tolist()}")
    return arr.astype(bool)


def check_label_volume(x, n_classes=None, name="labels"):
    arr = as_array(x)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValidationError(f"{name} must hold integer labels")
        arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise ValidationError(f"{name} contains negative labels")
    if n_classes is not None and arr.size and arr.max() > n_classes:
        raise ValidationError(f"{name} has label {int(arr.max())} outside 0..{n_classes}")
    return arr.astype(np.int64)


def check_same_dims(a, b, names=("a", "b")):
    sa, sb = as_array(a).shape, as_array(b).shape
    if sa != sb:
        raise ValidationError(f"dims mismatch: {names[0]} has dims {sa}, {names[1]} has dims {sb}")


def check_finite(arr, what="array"):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
    return arr
