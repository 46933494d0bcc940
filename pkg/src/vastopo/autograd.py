"""A small reverse-mode autodiff tape over float64 numpy arrays.

Every forward pass owns a :class:`Tape`; operations are methods on the tape
and record a backward rule as they run.  There is no global graph state, so
independent tapes can share read-only parameters.

    tape = Tape()
    y = tape.relu(tape.matmul(x, w))
    loss = tape.mean(y)
    tape.backward(loss)
"""
import numpy as np

from .validation import sub_seed

CKPT_MAGIC = b"VGNP1\n"


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_2d(op, *ts):
    for t in ts:
        if t.data.ndim != 2:
            raise ShapeError(f"{op} expects 2D tensors, got shape {t.shape}")


class Tape:
    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def constant(self, data):
        return Tensor(data)

    def _record(self, data, parents, backward):
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            self._records.append((out, parents, backward))
        return out

    def backward(self, loss):
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.data)
        for out, parents, backward in reversed(self._records):
            if out.grad is None:
                continue
            for p, g in zip(parents, backward(out.grad)):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g.copy() if p.grad is None else p.grad + g

    # -- elementwise / broadcasting ---------------------------------------

    def add(self, a, b):
        a, b = _as_tensor(a), _as_tensor(b)
        try:
            out = a.data + b.data
        except ValueError:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
        return self._record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a, b):
        a, b = _as_tensor(a), _as_tensor(b)
        try:
            out = a.data - b.data
        except ValueError:
            raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
        return self._record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def mul(self, a, b):
        a, b = _as_tensor(a), _as_tensor(b)
        try:
            out = a.data * b.data
        except ValueError:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
        return self._record(
            out, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    def scale(self, x, c):
        c = float(c)
        return self._record(x.data * c, (x,), lambda g: (g * c,))

    def relu(self, x):
        mask = x.data > 0
        return self._record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))

    def exp(self, x):
        y = np.exp(x.data)
        return self._record(y, (x,), lambda g: (g * y,))

    def log(self, x):
        return self._record(np.log(x.data), (x,), lambda g: (g / x.data,))

    # -- linear algebra / shape --------------------------------------------

    def matmul(self, a, b):
        a, b = _as_tensor(a), _as_tensor(b)
        _check_2d("matmul", a, b)
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
        return self._record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))

    def transpose(self, x):
        _check_2d("transpose", x)
        return self._record(x.data.T.copy(), (x,), lambda g: (g.T,))

    def reshape(self, x, shape):
        old = x.shape
        try:
            out = x.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
        return self._record(out, (x,), lambda g: (g.reshape(old),))

    def take_rows(self, x, index):
        """Gather rows ``x[index]``; repeated indices accumulate gradient."""
        index = np.asarray(index, dtype=np.int64)

        def backward(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, index, g)
            return (gx,)

        return self._record(x.data[index], (x,), backward)

    def concat(self, tensors, axis=0):
        tensors = [_as_tensor(t) for t in tensors]
        try:
            out = np.concatenate([t.data for t in tensors], axis=axis)
        except ValueError:
            shapes = ", ".join(str(t.shape) for t in tensors)
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
        splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
        return self._record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))

    def concat_rows(self, tensors):
        return self.concat(tensors, axis=0)

    def concat_cols(self, tensors):
        return self.concat(tensors, axis=1)

    # -- reductions --------------------------------------------------------

    def sum(self, x, axis=None, keepdims=False):
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return self._record(out, (x,), backward)

    def mean(self, x, axis=None, keepdims=False):
        n = x.data.size if axis is None else x.shape[axis]
        return self.scale(self.sum(x, axis=axis, keepdims=keepdims), 1.0 / n)

    def mean_rows(self, x):
        """Column means as a 1 x d row."""
        _check_2d("mean_rows", x)
        return self.mean(x, axis=0, keepdims=True)

    # -- row-wise nonlinear maps -------------------------------------------

    def softmax_rows(self, x):
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        return self._record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))

    def logsumexp_rows(self, x):
        """Row-wise log-sum-exp, shape ``(n,)``."""
        m = x.data.max(axis=-1, keepdims=True)
        e = np.exp(x.data - m)
        s = e.sum(axis=-1, keepdims=True)
        p = e / s
        return self._record((m + np.log(s))[..., 0], (x,), lambda g: (g[..., None] * p,))

    def normalize_rows(self, x, eps=1e-12):
        """Scale each row to unit L2 norm; rows with norm < eps are an error."""
        norm = np.linalg.norm(x.data, axis=-1, keepdims=True)
        if np.any(norm < eps):
            raise FloatingPointError(f"cannot normalize a row with norm < {eps}")
        y = x.data / norm
        return self._record(y, (x,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,))

    def cross_entropy(self, logits, labels):
        """Mean negative log-likelihood of integer ``labels`` under row softmax."""
        _check_2d("cross_entropy", logits)
        labels = np.asarray(labels, dtype=np.int64)
        n = logits.shape[0]
        if labels.shape != (n,):
            raise ShapeError(f"cross_entropy: {n} logit rows but labels of shape {labels.shape}")
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        rows = np.arange(n)
        loss = -log_p[rows, labels].mean()

        def backward(g):
            grad = np.exp(log_p)
            grad[rows, labels] -= 1.0
            return (grad * (g / n),)

        return self._record(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# Parameters and optimization


class ParamStore:
    """Named trainable tensors plus Adam moment state.

    Initializers draw from a generator keyed by ``(seed, name)``, so a
    parameter's initial value does not depend on creation order.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self._params = {}
        self._adam = {}

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(sorted(self._params))

    def __len__(self):
        return len(self._params)

    def items(self):
        return [(n, self._params[n]) for n in sorted(self._params)]

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def rng(self, name):
        return np.random.default_rng(sub_seed(self.seed, name))

    def glorot(self, name, shape):
        fan_in, fan_out = shape[0], shape[-1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng(name).uniform(-limit, limit, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self):
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, state, strict=True):
        for name, value in state.items():
            if name not in self._params:
                if strict:
                    raise CheckpointError(f"unexpected parameter {name!r}")
                continue
            if self._params[name].shape != np.shape(value):
                raise CheckpointError(
                    f"shape mismatch for {name!r}: store has {self._params[name].shape}, "
                    f"checkpoint has {np.shape(value)}"
                )
            self._params[name].data = np.array(value, dtype=np.float64)
        missing = set(self._params) - set(state)
        if strict and missing:
            raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction; moments live in ``params``."""
    missing = [n for n, t in params.items() if t.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {missing}")
    for name, t in params.items():
        m, v, step = params._adam.get(name, (np.zeros_like(t.data), np.zeros_like(t.data), 0))
        step += 1
        m = beta1 * m + (1 - beta1) * t.grad
        v = beta2 * v + (1 - beta2) * t.grad**2
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        params._adam[name] = (m, v, step)


def grad_check(fn, params, eps=1e-5, max_entries=None, seed=0, names=None):
    """Compare taped gradients with central finite differences.

    ``fn(tape)`` must build a scalar loss from ``params`` on the given tape and
    be deterministic.  Returns the worst relative error
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`` over the checked entries;
    ``max_entries`` caps how many entries per parameter are probed.
    """
    errors = grad_check_report(fn, params, eps=eps, max_entries=max_entries, seed=seed, names=names)
    return max(errors.values(), default=0.0)


def grad_check_report(fn, params, eps=1e-5, max_entries=None, seed=0, names=None):
    """Per-parameter worst relative error; see :func:`grad_check`."""
    params.zero_grad()
    tape = Tape()
    loss = fn(tape)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: loss is not finite")
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    report = {}
    for name in (names or list(params)):
        t = params[name]
        g_ad = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(Tape()).item()
            flat[i] = orig - eps
            f_minus = fn(Tape()).item()
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2 * eps)
            g = g_ad.reshape(-1)[i]
            if not (np.isfinite(g_fd) and np.isfinite(g)):
                raise FloatingPointError(f"grad_check: non-finite gradient for {name}[{i}]")
            worst = max(worst, abs(g - g_fd) / max(1.0, abs(g), abs(g_fd)))
        report[name] = worst
    params.zero_grad()
    return report


# ---------------------------------------------------------------------------
# Checkpoint container


def save_checkpoint(path, records):
    """Write ``{name: array}`` records in alphabetical name order."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        for name in sorted(records):
            arr = np.asarray(records[name], dtype="<f8")
            if "\n" in name:
                raise CheckpointError(f"record name {name!r} contains a newline")
            shape = ",".join(str(n) for n in arr.shape) if arr.ndim else "1"
            fh.write(f"{name}\n{shape}\n".encode("utf-8"))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a VGNP1 checkpoint")
    pos = len(CKPT_MAGIC)
    records = {}
    while pos < len(raw):
        try:
            nl1 = raw.index(b"\n", pos)
            nl2 = raw.index(b"\n", nl1 + 1)
            name = raw[pos:nl1].decode("utf-8")
            shape = tuple(int(s) for s in raw[nl1 + 1:nl2].decode("ascii").split(","))
        except ValueError as exc:
            raise CheckpointError(f"{path}: malformed record header at byte {pos}") from exc
        nbytes = 8 * int(np.prod(shape))
        start = nl2 + 1
        if start + nbytes > len(raw):
            raise CheckpointError(f"{path}: record {name!r} is truncated")
        records[name] = np.frombuffer(raw[start:start + nbytes], dtype="<f8").reshape(shape).copy()
        pos = start + nbytes
    return records
