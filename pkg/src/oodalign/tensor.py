"""Minimal dense tensors with reverse-mode automatic differentiation.

The engine covers exactly the operations the alignment head needs: affine
maps, 3x3 same-padded convolution, per-channel batch normalization, relu,
global max pooling, and a handful of structural ops (gather, concat, stack,
blend).  Operations executed inside a ``with Tape():`` block are recorded;
``backward(scalar)`` replays the record in reverse and returns a gradient
map.  Outside a tape, ops are plain float64 numpy computations.

Design points:

* float64 everywhere; tensor buffers are frozen (numpy writeable=False) so
  recorded values cannot drift.  Parameters change only through
  ``Tensor.assign``, which bumps a version counter; a tape refuses to run
  backward if any recorded tensor was reassigned in the meantime.
* One tape per thread at a time.  Tapes on different threads are fully
  independent.
* ``backward`` is a pure function of the tape: calling it twice yields
  bit-identical gradients.
"""

import threading
from collections.abc import Callable, Sequence

import numpy as np

from .errors import NumericError


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class TapeError(RuntimeError):
    """Tape misuse: nesting, replay after mutation, backward off-tape."""


class Tensor:
    """A frozen float64 array plus autodiff bookkeeping.

    ``requires_grad`` marks the tensor as a differentiation target (leaf) or,
    on op outputs, as carrying gradient.  ``node_id`` is assigned when the
    tensor is first recorded on a tape.
    """

    __slots__ = ("data", "requires_grad", "node_id", "version", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.version = 0
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs exactly one element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def assign(self, new_data) -> None:
        """Replace the buffer in place (parameter update); invalidates tapes."""
        arr = np.array(new_data, dtype=np.float64, order="C")
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} != tensor shape {self.data.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.version += 1

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


_ACTIVE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_ACTIVE, "tape", None)


class _Node:
    __slots__ = ("out_id", "in_ids", "backward_fn", "stamps")

    def __init__(self, out_id, in_ids, backward_fn, stamps):
        self.out_id = out_id
        self.in_ids = in_ids
        self.backward_fn = backward_fn
        # (tensor, version) pairs checked before replay
        self.stamps = stamps


class Tape:
    """Ordered record of operations for one forward pass.

    Single-owner and single-threaded; use as a context manager.  The node
    list is already in topological order because ops append as they run.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._tensors: dict[int, Tensor] = {}
        self._next_id = 0

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.tape = None

    def _watch(self, t: Tensor) -> int:
        if t._tape is self and t.node_id is not None:
            return t.node_id
        nid = self._next_id
        self._next_id += 1
        t.node_id = nid
        t._tape = self
        self._tensors[nid] = t
        return nid

    def record(
        self,
        out: Tensor,
        inputs: Sequence[Tensor],
        backward_fn: Callable[[np.ndarray], list["np.ndarray | None"]],
    ) -> None:
        """Append one op.  ``backward_fn(grad_out)`` returns one gradient per
        input (None for inputs that do not need one)."""
        in_ids = [self._watch(t) for t in inputs]
        out_id = self._watch(out)
        stamps = [(t, t.version) for t in (*inputs, out)]
        self._nodes.append(_Node(out_id, in_ids, backward_fn, stamps))

    def backward(self, scalar: Tensor) -> "GradientMap":
        if scalar.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {scalar.shape}")
        if scalar._tape is not self or scalar.node_id is None:
            raise TapeError("output was not recorded on this tape")
        for node in self._nodes:
            for t, version in node.stamps:
                if t.version != version:
                    raise TapeError(
                        "tensor mutated between forward and backward; "
                        "re-run the forward pass before differentiating"
                    )
        grads: dict[int, np.ndarray] = {scalar.node_id: np.ones_like(scalar.data)}
        for node in reversed(self._nodes):
            gout = grads.get(node.out_id)
            if gout is None:
                continue
            gins = node.backward_fn(gout)
            for nid, g in zip(node.in_ids, gins):
                if g is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = g if acc is None else acc + g
        return GradientMap(self._tensors, grads)


class GradientMap:
    """Gradients from one backward pass, addressed by tensor.

    Keys are captured by tensor identity at backward time, so the map stays
    usable even after the same parameters are recorded on a later tape.
    """

    def __init__(self, tensors: dict[int, Tensor], grads: dict[int, np.ndarray]):
        self._keep = list(tensors.values())
        self._by_tensor = {id(t): grads.get(nid) for nid, t in tensors.items()}

    def of(self, t: Tensor) -> np.ndarray:
        """Gradient of the scalar w.r.t. ``t``; zeros if ``t`` was recorded
        but does not reach the output."""
        try:
            g = self._by_tensor[id(t)]
        except KeyError:
            raise TapeError("tensor was not recorded on the differentiated tape") from None
        if g is None:
            return np.zeros_like(t.data)
        return g


def backward(scalar: Tensor) -> GradientMap:
    """Differentiate a recorded scalar w.r.t. everything on its tape."""
    if scalar._tape is None:
        raise TapeError("scalar was not recorded on any tape")
    return scalar._tape.backward(scalar)


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result; record it when a tape is active and any input
    carries gradient."""
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# running statistics for batch normalization


class RunningStats:
    """Exponential running mean/var per channel, shared across forward passes."""

    def __init__(self, channels: int):
        self.channels = channels
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.count = 0

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, momentum: float) -> None:
        self.mean = (1.0 - momentum) * self.mean + momentum * batch_mean
        self.var = (1.0 - momentum) * self.var + momentum * batch_var
        self.count += 1

    @property
    def initialized(self) -> bool:
        return self.count > 0

    def load(self, mean: np.ndarray, var: np.ndarray, count: int) -> None:
        if mean.shape != (self.channels,) or var.shape != (self.channels,):
            raise ShapeError(
                f"running stats shape {mean.shape}/{var.shape} != ({self.channels},)"
            )
        self.mean = mean.astype(np.float64).copy()
        self.var = var.astype(np.float64).copy()
        self.count = int(count)


# ---------------------------------------------------------------------------
# operations


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine map: (N, I) @ (I, O) + (O,)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"affine expects 2-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine inner dims differ: x {x.shape} vs w {w.shape}")
    if b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"affine bias {b.shape} does not match w {w.shape}")
    xd, wd = x.data, w.data
    needs = [x.requires_grad, w.requires_grad, b.requires_grad]

    def bwd(g):
        gx = g @ wd.T if needs[0] else None
        gw = xd.T @ g if needs[1] else None
        gb = g.sum(axis=0) if needs[2] else None
        return [gx, gw, gb]

    return _finish(xd @ wd + b.data, [x, w, b], bwd)


def conv3x3_same(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution with zero padding 1 and stride 1 on a (C, H, W) map."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv3x3_same expects (C, H, W) input, got {x.shape}")
    if kernels.data.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3_same kernels must be (Co, Ci, 3, 3), got {kernels.shape}")
    if kernels.shape[1] != x.shape[0]:
        raise ShapeError(f"conv channel mismatch: kernels {kernels.shape} vs input {x.shape}")
    if bias.data.ndim != 1 or bias.shape[0] != kernels.shape[0]:
        raise ShapeError(f"conv bias {bias.shape} does not match kernels {kernels.shape}")
    ci, h, w = x.shape
    kd = kernels.data
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    # windows[ci, i, j, ki, kj] = xp[ci, i + ki, j + kj]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    out = np.einsum("oikl,ihwkl->ohw", kd, windows, optimize=True) + bias.data[:, None, None]
    needs = [x.requires_grad, kernels.requires_grad, bias.requires_grad]

    def bwd(g):
        gx = gk = gb = None
        if needs[2]:
            gb = g.sum(axis=(1, 2))
        if needs[1]:
            gk = np.einsum("ohw,ihwkl->oikl", g, windows, optimize=True)
        if needs[0]:
            gxp = np.zeros((ci, h + 2, w + 2))
            for ki in range(3):
                for kj in range(3):
                    gxp[:, ki:ki + h, kj:kj + w] += np.einsum(
                        "ohw,oi->ihw", g, kd[:, :, ki, kj], optimize=True
                    )
            gx = gxp[:, 1:h + 1, 1:w + 1]
        return [gx, gk, gb]

    return _finish(out, [x, kernels, bias], bwd)


_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    mode: str,
) -> Tensor:
    """Per-channel batch normalization over the spatial plane of a (C, H, W) map.

    In ``train`` mode the map is normalized by its own spatial statistics
    (biased variance) and the running stats are updated with momentum 0.1.
    In ``eval`` mode the stored running statistics are used; evaluating
    before any training step or checkpoint load is an error.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim != 3:
        raise ShapeError(f"batchnorm2d expects (C, H, W) input, got {x.shape}")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d gamma {gamma.shape} / beta {beta.shape} vs channels {c}")
    if stats.channels != c:
        raise ShapeError(f"running stats track {stats.channels} channels, input has {c}")
    xd = x.data
    if mode == "train":
        mu = xd.mean(axis=(1, 2))
        var = xd.var(axis=(1, 2))
        stats.update(mu, var, _BN_MOMENTUM)
    else:
        if not stats.initialized:
            raise NumericError(
                "batchnorm2d: uninitialized running statistics; train first or load a checkpoint"
            )
        mu = stats.mean
        var = stats.var
    inv_std = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (xd - mu[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]
    gd = gamma.data
    needs = [x.requires_grad, gamma.requires_grad, beta.requires_grad]

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(1, 2)) if needs[1] else None
        gbeta = g.sum(axis=(1, 2)) if needs[2] else None
        gx = None
        if needs[0]:
            gscaled = g * gd[:, None, None]
            if mode == "train":
                mean_g = gscaled.mean(axis=(1, 2))
                mean_gx = (gscaled * xhat).mean(axis=(1, 2))
                gx = inv_std[:, None, None] * (
                    gscaled - mean_g[:, None, None] - xhat * mean_gx[:, None, None]
                )
            else:
                gx = gscaled * inv_std[:, None, None]
        return [gx, ggamma, gbeta]

    return _finish(out, [x, gamma, beta], bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def bwd(g):
        return [g * mask]

    return _finish(out, [x], bwd)


def adaptive_max_pool_global(x: Tensor) -> Tensor:
    """Global spatial max pool: (C, H, W) -> (C,).  Gradient routes to the
    first (row-major) maximal cell per channel."""
    if x.data.ndim != 3:
        raise ShapeError(f"adaptive_max_pool_global expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    flat = x.data.reshape(c, h * w)
    idx = flat.argmax(axis=1)
    out = flat[np.arange(c), idx]

    def bwd(g):
        gx = np.zeros((c, h * w))
        gx[np.arange(c), idx] = g
        return [gx.reshape(c, h, w)]

    return _finish(out, [x], bwd)


def gather_cells(fmap: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick one grid cell per index pair: (C, H, W), (n,), (n,) -> (n, C)."""
    if fmap.data.ndim != 3:
        raise ShapeError(f"gather_cells expects (C, H, W), got {fmap.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    _, h, w = fmap.shape
    if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= h or cols.max() >= w):
        raise ShapeError(f"gather_cells indices out of range for map {fmap.shape}")
    out = fmap.data[:, rows, cols].T.copy()

    def bwd(g):
        gx = np.zeros(fmap.shape)
        np.add.at(gx, (slice(None), rows, cols), g.T)
        return [gx]

    return _finish(out, [fmap], bwd)


def blend_rows(f_obj: Tensor, f_scene: Tensor, scene_weight: float) -> Tensor:
    """Convex blend of per-object rows with one shared scene vector:
    (1 - w) * f_obj + w * f_scene."""
    if f_obj.data.ndim != 2 or f_scene.data.ndim != 1:
        raise ShapeError(
            f"blend_rows expects (n, C) and (C,), got {f_obj.shape} and {f_scene.shape}"
        )
    if f_obj.shape[1] != f_scene.shape[0]:
        raise ShapeError(f"blend_rows width mismatch: {f_obj.shape} vs {f_scene.shape}")
    w = float(scene_weight)
    out = (1.0 - w) * f_obj.data + w * f_scene.data[None, :]
    needs = [f_obj.requires_grad, f_scene.requires_grad]

    def bwd(g):
        gf = (1.0 - w) * g if needs[0] else None
        gs = w * g.sum(axis=0) if needs[1] else None
        return [gf, gs]

    return _finish(out, [f_obj, f_scene], bwd)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two vectors: (A,), (B,) -> (A + B,)."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"concat expects vectors, got {a.shape} and {b.shape}")
    na = a.shape[0]

    def bwd(g):
        return [g[:na], g[na:]]

    return _finish(np.concatenate([a.data, b.data]), [a, b], bwd)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two row batches along columns: (n, A), (n, B) -> (n, A + B)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols expects matching row counts, got {a.shape} and {b.shape}")
    na = a.shape[1]

    def bwd(g):
        return [g[:, :na], g[:, na:]]

    return _finish(np.concatenate([a.data, b.data], axis=1), [a, b], bwd)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack n equal-length vectors into an (n, D) matrix."""
    if not vectors:
        raise ShapeError("stack_rows needs at least one vector")
    d = vectors[0].shape
    for v in vectors:
        if v.data.ndim != 1 or v.shape != d:
            raise ShapeError(f"stack_rows needs equal-length vectors, got {v.shape} vs {d}")
    out = np.stack([v.data for v in vectors])

    def bwd(g):
        return [g[i] for i in range(len(vectors))]

    return _finish(out, list(vectors), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape {x.shape} -> {shape} changes element count")
    orig = x.shape

    def bwd(g):
        return [g.reshape(orig)]

    return _finish(x.data.reshape(shape), [x], bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        return [g, g]

    return _finish(a.data + b.data, [a, b], bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return [g * bd, g * ad]

    return _finish(ad * bd, [a, b], bwd)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def bwd(g):
        return [np.broadcast_to(g, shape).copy() if shape else np.asarray(g)]

    return _finish(np.asarray(x.data.sum()), [x], bwd)


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_gradient(
    f: Callable[[Tensor], float],
    x: Tensor,
    h: float = 1e-5,
) -> Tensor:
    """Central-difference gradient of a scalar function at ``x``.

    ``f`` must be re-runnable: it is called twice per coordinate with a fresh
    perturbed tensor.  This is the independent check the analytic backward
    pass is validated against.
    """
    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += h
        hi = f(Tensor(bumped.reshape(base.shape)))
        bumped[i] -= 2.0 * h
        lo = f(Tensor(bumped.reshape(base.shape)))
        flat[i] = (hi - lo) / (2.0 * h)
    return Tensor(grad)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Disagreement between two gradient arrays, relative to their scale.

    The denominator floors at 1.0 so that gradients which are genuinely zero
    (where finite differences see only roundoff noise) compare by absolute
    error instead of blowing up a ratio of two tiny numbers.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1.0)
    return float(np.linalg.norm(a - b) / denom)
