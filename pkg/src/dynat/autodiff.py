"""Reverse-mode automatic differentiation over dense float64 arrays.

A single module-level tape records every primitive applied to tensors
that require gradients.  backward() replays the tape in reverse and
accumulates adjoints with += semantics, so calling it twice doubles the
gradients.  The tape is append-only during a step and must be cleared
with reset_tape() between steps; tensors built under an earlier
generation cannot be differentiated after a reset.

Everything is float64.  Broadcasting is deliberately restricted: the
only mixed-shape operations are scalar_mul and adding a [features] bias
to a [batch, features] matrix.
"""

import numpy as np

from .errors import ContractError, ShapeError, ValidationError


class Tape:
    """Append-only record of primitive applications for one step."""

    __slots__ = ("nodes", "generation")

    def __init__(self):
        self.nodes = []
        self.generation = 0

    def reset(self):
        self.nodes.clear()
        self.generation += 1


class _Node:
    __slots__ = ("name", "inputs", "out", "backward_fn")

    def __init__(self, name, inputs, out, backward_fn):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


_TAPE = Tape()


def active_tape() -> Tape:
    return _TAPE


def reset_tape():
    """Drop all recorded nodes and start a new tape generation."""
    _TAPE.reset()


class Tensor:
    """A float64 array plus gradient bookkeeping.

    grad stays None until backward() reaches the tensor; it then holds an
    array of the same shape and accumulates across repeated backward
    passes until the caller clears it.
    """

    __slots__ = ("data", "requires_grad", "grad", "gen")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.gen = _TAPE.generation

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        """Same data, no gradient tracking.  Shares the underlying array."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.gen = _TAPE.generation
        return out

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(())[()])

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def tensor_new(shape, values, requires_grad: bool = False) -> Tensor:
    """Build a tensor of the given shape from a flat row-major value list."""
    shape = tuple(int(d) for d in shape)
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    want = int(np.prod(shape)) if shape else 1
    if flat.size != want:
        raise ShapeError(f"shape {shape} wants {want} values, got {flat.size}")
    return Tensor(flat.reshape(shape), requires_grad)


def _apply(name, inputs, out_data, backward_fn) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        _TAPE.nodes.append(_Node(name, inputs, out, backward_fn))
    return out


def _need(t: Tensor) -> bool:
    return t.requires_grad


# ---------------------------------------------------------------------------
# elementwise and linear primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b; also accepts [batch, f] + [f] for bias terms."""
    bias_row = a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]
    if not bias_row and a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not match")

    def backward_fn(g):
        out = []
        if _need(a):
            out.append((a, g))
        if _need(b):
            out.append((b, g.sum(axis=0) if bias_row else g))
        return out

    return _apply("add", (a, b), a.data + b.data, backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} do not match")

    def backward_fn(g):
        out = []
        if _need(a):
            out.append((a, g))
        if _need(b):
            out.append((b, -g))
        return out

    return _apply("sub", (a, b), a.data - b.data, backward_fn)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul_elementwise: shapes {a.data.shape} and {b.data.shape} do not match")

    def backward_fn(g):
        out = []
        if _need(a):
            out.append((a, g * b.data))
        if _need(b):
            out.append((b, g * a.data))
        return out

    return _apply("mul_elementwise", (a, b), a.data * b.data, backward_fn)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        return [(a, c * g)] if _need(a) else []

    return _apply("scalar_mul", (a,), c * a.data, backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: needs rank-2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.data.shape} x {b.data.shape} do not match")

    def backward_fn(g):
        out = []
        if _need(a):
            out.append((a, g @ b.data.T))
        if _need(b):
            out.append((b, a.data.T @ g))
        return out

    return _apply("matmul", (a, b), a.data @ b.data, backward_fn)


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    mask = a.data > 0.0

    def backward_fn(g):
        return [(a, g * mask)] if _need(a) else []

    return _apply("relu", (a,), np.where(mask, a.data, 0.0), backward_fn)


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading batch axis."""
    if a.data.ndim < 2:
        raise ShapeError(f"flatten: needs a batch axis, got shape {a.data.shape}")
    shape = a.data.shape

    def backward_fn(g):
        return [(a, g.reshape(shape))] if _need(a) else []

    return _apply("flatten", (a,), a.data.reshape(shape[0], -1), backward_fn)


def mean(a: Tensor) -> Tensor:
    """Mean over all elements, returning a scalar tensor."""
    if a.data.size == 0:
        raise ShapeError("mean: empty tensor")
    n = a.data.size
    shape = a.data.shape

    def backward_fn(g):
        return [(a, np.full(shape, float(g) / n))] if _need(a) else []

    return _apply("mean", (a,), np.asarray(a.data.mean()), backward_fn)


# ---------------------------------------------------------------------------
# losses

def _check_one_hot(labels: Tensor, logits_shape):
    ld = labels.data
    if ld.shape != logits_shape:
        raise ShapeError(f"labels shape {ld.shape} does not match logits shape {logits_shape}")
    if labels.requires_grad:
        raise ValidationError("labels must not require gradients")
    if not (np.all((ld == 0.0) | (ld == 1.0)) and np.all(ld.sum(axis=1) == 1.0)):
        raise ValidationError("labels must be exact one-hot rows")


def softmax_cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean over the batch of -log softmax(logits) . label.

    Stabilised by subtracting the per-row max before exponentiation.
    Labels are a constant one-hot matrix; gradients never flow into them.
    """
    if logits.data.ndim != 2 or logits.data.shape[1] < 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [batch, classes>=2], got {logits.data.shape}")
    _check_one_hot(labels, logits.data.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    batch = logits.data.shape[0]
    losses = np.log(ez.sum(axis=1)) - (z * labels.data).sum(axis=1)

    def backward_fn(g):
        return [(logits, (float(g) / batch) * (probs - labels.data))] if _need(logits) else []

    return _apply("softmax_cross_entropy", (logits, labels), np.asarray(losses.mean()), backward_fn)


def mse_loss(pred: Tensor, ref: Tensor) -> Tensor:
    """Mean over all elements of (pred - ref) squared."""
    if pred.data.shape != ref.data.shape:
        raise ShapeError(f"mse_loss: shapes {pred.data.shape} and {ref.data.shape} do not match")
    if pred.data.size == 0:
        raise ShapeError("mse_loss: empty tensors")
    diff = pred.data - ref.data
    n = pred.data.size

    def backward_fn(g):
        scale = 2.0 * float(g) / n
        out = []
        if _need(pred):
            out.append((pred, scale * diff))
        if _need(ref):
            out.append((ref, -scale * diff))
        return out

    return _apply("mse_loss", (pred, ref), np.asarray((diff * diff).mean()), backward_fn)


# ---------------------------------------------------------------------------
# spatial primitives
#
# Convolution runs as an im2col GEMM in channels-last layout, which keeps
# the gathered patch copies contiguous; outputs are transposed back to
# the public [batch, channels, h, w] layout.  The input gradient is the
# transposed convolution: upsample the output gradient by the stride,
# pad, and correlate with the spatially flipped kernels.

def _same_pads(size: int, k: int, stride: int):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return lo, total - lo


def _im2col(xl, kh: int, kw: int, stride: int):
    # xl: padded channels-last [batch, h, w, c]
    win = np.lib.stride_tricks.sliding_window_view(xl, (kh, kw), axis=(1, 2))
    if stride > 1:
        win = win[:, ::stride, ::stride]
    b, oh, ow = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(b * oh * ow, kh * kw * xl.shape[3]), oh, ow


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "valid") -> Tensor:
    """2-D cross-correlation.

    Args:
        x: input batch [batch, in_ch, h, w].
        kernels: filter bank [out_ch, in_ch, kh, kw].
        bias: optional [out_ch] added to every output position.
        stride: positive step between windows.
        padding: "valid" (no padding) or "same" (zero-pad so that the
            output spatial size is ceil(size / stride)).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be [batch, ch, h, w], got {x.data.shape}")
    if kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be [out, in, kh, kw], got {kernels.data.shape}")
    if x.data.shape[1] != kernels.data.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.data.shape[1]} channels but kernels expect {kernels.data.shape[1]}")
    if not isinstance(stride, int) or stride < 1:
        raise ValidationError(f"conv2d: stride must be a positive int, got {stride!r}")
    if padding not in ("valid", "same"):
        raise ValidationError(f"conv2d: padding must be 'valid' or 'same', got {padding!r}")

    batch, in_ch, h, w = x.data.shape
    out_ch, _, kh, kw = kernels.data.shape
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    else:
        pt = pb = pl = pr = 0
    if h + pt + pb < kh or w + pl + pr < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + pt + pb}x{w + pl + pr}")
    if bias is not None and bias.data.shape != (out_ch,):
        raise ShapeError(f"conv2d: bias must have shape ({out_ch},), got {bias.data.shape}")

    xl = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    if pt or pb or pl or pr:
        xl = np.pad(xl, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols, oh, ow = _im2col(xl, kh, kw, stride)
    km = np.ascontiguousarray(kernels.data.transpose(2, 3, 1, 0)).reshape(kh * kw * in_ch, out_ch)
    flat = cols @ km
    if bias is not None:
        flat = flat + bias.data
    out_data = np.ascontiguousarray(flat.reshape(batch, oh, ow, out_ch).transpose(0, 3, 1, 2))

    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def backward_fn(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gf = gl.reshape(batch * oh * ow, out_ch)
        out = []
        if _need(kernels):
            gkm = cols.T @ gf
            out.append((kernels, np.ascontiguousarray(
                gkm.reshape(kh, kw, in_ch, out_ch).transpose(3, 2, 0, 1))))
        if bias is not None and _need(bias):
            out.append((bias, gf.sum(axis=0)))
        if _need(x):
            if stride > 1:
                gd = np.zeros((batch, (oh - 1) * stride + 1, (ow - 1) * stride + 1, out_ch))
                gd[:, ::stride, ::stride] = gl
            else:
                gd = gl
            gp = np.pad(gd, ((0, 0), (kh - 1 - pt, kh - 1 - pb), (kw - 1 - pl, kw - 1 - pr), (0, 0)))
            gcols, gh, gw = _im2col(gp, kh, kw, 1)
            kf = np.ascontiguousarray(
                kernels.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)).reshape(kh * kw * out_ch, in_ch)
            gxl = (gcols @ kf).reshape(batch, gh, gw, in_ch)
            gx = np.zeros((batch, in_ch, h, w))
            # strides that do not divide evenly leave trailing rows/cols
            # with zero gradient
            gx[:, :, :gh, :gw] = gxl.transpose(0, 3, 1, 2)
            out.append((x, gx))
        return out

    return _apply("conv2d", inputs, out_data, backward_fn)


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping spatial max pooling; ties route the gradient to the
    first maximal position in row-major window order."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: input must be [batch, ch, h, w], got {x.data.shape}")
    if not isinstance(window, int) or window < 1:
        raise ValidationError(f"max_pool2d: window must be a positive int, got {window!r}")
    batch, ch, h, w = x.data.shape
    if h % window or w % window:
        raise ShapeError(f"max_pool2d: spatial dims {h}x{w} not divisible by window {window}")
    oh, ow = h // window, w // window
    tiles = x.data.reshape(batch, ch, oh, window, ow, window)
    tiles = np.ascontiguousarray(tiles.transpose(0, 1, 2, 4, 3, 5)).reshape(batch, ch, oh, ow, window * window)
    idx = tiles.argmax(axis=-1)
    out_data = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if not _need(x):
            return []
        buf = np.zeros((batch, ch, oh, ow, window * window))
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        gx = buf.reshape(batch, ch, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
        return [(x, np.ascontiguousarray(gx).reshape(batch, ch, h, w))]

    return _apply("max_pool2d", (x,), out_data, backward_fn)


# ---------------------------------------------------------------------------
# differentiation

def backward(loss: Tensor):
    """Accumulate d loss / d tensor into .grad for every tensor on the tape
    that requires gradients and is reachable from loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor that does not require gradients")
    if loss.gen != _TAPE.generation:
        raise ContractError("stale tape: loss was built before the last reset_tape()")

    adjoints = {id(loss): (loss, np.ones_like(loss.data))}
    for node in reversed(_TAPE.nodes):
        entry = adjoints.pop(id(node.out), None)
        if entry is None:
            continue
        tensor, g = entry
        tensor._accumulate(g)
        for inp, contrib in node.backward_fn(g):
            key = id(inp)
            if key in adjoints:
                adjoints[key] = (inp, adjoints[key][1] + contrib)
            else:
                adjoints[key] = (inp, contrib)
    for tensor, g in adjoints.values():
        tensor._accumulate(g)


def grad_check(f, x: Tensor, h: float = 1.0e-6) -> float:
    """Compare tape gradients of a scalar-valued f against central finite
    differences at x.

    Returns the worst relative error max |analytic - numeric| /
    max(1, |analytic|, |numeric|) over all coordinates of x.  Resets the
    active tape, so call it between steps rather than inside one.
    """
    reset_tape()
    probe = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.data.shape}")
    backward(out)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)
    reset_tape()

    base = np.array(x.data, copy=True)
    numeric = np.zeros_like(base)
    for i in range(base.size):
        stash = base.flat[i]
        base.flat[i] = stash + h
        fp = float(f(Tensor(base)).data)
        base.flat[i] = stash - h
        fm = float(f(Tensor(base)).data)
        base.flat[i] = stash
        numeric.flat[i] = (fp - fm) / (2.0 * h)
        reset_tape()

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return float("inf")
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(rel.max()) if rel.size else 0.0
