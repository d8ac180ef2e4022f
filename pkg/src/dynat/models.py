"""Model descriptions, parameter initialisation, and checkpoints.

A ModelSpec is a declarative layer list that can be validated without
allocating anything.  build_model turns it into a Model whose parameters
are keyed by stable names ("dense1.w", "conv0.k", ...) and initialised
from a counter-based generator keyed by (seed, parameter name), so the
same seed always produces byte-identical parameters regardless of
construction order.

Freezing a model makes forward() route every parameter through a
detached view: outputs stay differentiable with respect to the input
batch, but no gradient reaches the parameters.
"""

import struct
from contextlib import contextmanager
from dataclasses import dataclass
from math import sqrt

import numpy as np

from . import autodiff as ad
from .errors import (CheckpointFormatError, CheckpointMismatchError,
                     CheckpointTruncatedError, ModelSpecError, ShapeError,
                     ValidationError)
from .seeding import make_rng


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    kh: int
    kw: int
    padding: str = "same"


@dataclass(frozen=True)
class MaxPool:
    window: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple
    layers: tuple
    num_classes: int

    def validate(self) -> tuple:
        """Walk the layer list checking that adjacent shapes compose.

        Returns the per-example output shape.  Pure: never allocates
        parameters.
        """
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            shape = _out_shape(layer, shape, i)
        if shape != (self.num_classes,):
            raise ModelSpecError(
                f"spec '{self.name}': final shape {shape} is not ({self.num_classes},) logits")
        return shape


def _describe(layer) -> str:
    return type(layer).__name__.lower()


def _out_shape(layer, shape, i):
    def fail(reason):
        raise ModelSpecError(f"layer {i} ({_describe(layer)}) cannot follow shape {shape}: {reason}")

    if isinstance(layer, Dense):
        if len(shape) != 1:
            fail("dense needs flat features")
        if shape[0] != layer.in_dim:
            fail(f"expects {layer.in_dim} features")
        return (layer.out_dim,)
    if isinstance(layer, Relu):
        return shape
    if isinstance(layer, Conv):
        if len(shape) != 3:
            fail("conv needs [ch, h, w]")
        ch, h, w = shape
        if ch != layer.in_ch:
            fail(f"expects {layer.in_ch} channels")
        if layer.padding == "same":
            return (layer.out_ch, h, w)
        if layer.padding == "valid":
            oh, ow = h - layer.kh + 1, w - layer.kw + 1
            if oh < 1 or ow < 1:
                fail(f"kernel {layer.kh}x{layer.kw} larger than input")
            return (layer.out_ch, oh, ow)
        fail(f"unknown padding {layer.padding!r}")
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            fail("pool needs [ch, h, w]")
        ch, h, w = shape
        if h % layer.window or w % layer.window:
            fail(f"{h}x{w} not divisible by window {layer.window}")
        return (ch, h // layer.window, w // layer.window)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    raise ModelSpecError(f"layer {i}: unknown layer type {type(layer).__name__}")


def param_template(spec: ModelSpec):
    """(name, shape, fan_in) for every parameter, in layer order."""
    out = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            out.append((f"dense{i}.w", (layer.in_dim, layer.out_dim), layer.in_dim))
            out.append((f"dense{i}.b", (layer.out_dim,), layer.in_dim))
        elif isinstance(layer, Conv):
            fan_in = layer.in_ch * layer.kh * layer.kw
            out.append((f"conv{i}.k", (layer.out_ch, layer.in_ch, layer.kh, layer.kw), fan_in))
            out.append((f"conv{i}.b", (layer.out_ch,), fan_in))
    return out


class Model:
    """A ModelSpec bound to concrete parameters."""

    def __init__(self, spec: ModelSpec, params: dict):
        self.spec = spec
        self.params = params
        self.frozen = False

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        """Logits for a batch shaped [batch, *spec.input_shape]."""
        want = tuple(self.spec.input_shape)
        if x.data.ndim != 1 + len(want) or tuple(x.data.shape[1:]) != want:
            raise ShapeError(
                f"model '{self.spec.name}' wants [batch, {', '.join(map(str, want))}], got {x.data.shape}")
        p = self.params if not self.frozen else {k: t.detach() for k, t in self.params.items()}
        h = x
        for i, layer in enumerate(self.spec.layers):
            if isinstance(layer, Dense):
                h = ad.add(ad.matmul(h, p[f"dense{i}.w"]), p[f"dense{i}.b"])
            elif isinstance(layer, Relu):
                h = ad.relu(h)
            elif isinstance(layer, Conv):
                h = ad.conv2d(h, p[f"conv{i}.k"], bias=p[f"conv{i}.b"], padding=layer.padding)
            elif isinstance(layer, MaxPool):
                h = ad.max_pool2d(h, layer.window)
            elif isinstance(layer, Flatten):
                h = ad.flatten(h)
        return h

    def freeze(self):
        self.frozen = True

    def unfreeze(self):
        self.frozen = False

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def param_bytes(self) -> bytes:
        """Concatenated raw parameter data, for change detection."""
        return b"".join(t.data.tobytes() for t in self.params.values())


@contextmanager
def frozen(*models):
    """Freeze the given models for the duration of the block."""
    before = [m.frozen for m in models]
    for m in models:
        m.frozen = True
    try:
        yield
    finally:
        for m, state in zip(models, before):
            m.frozen = state


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Validate the spec and initialise parameters.

    Weights are uniform in +-sqrt(6 / fan_in), biases uniform in
    +-1/sqrt(fan_in), each drawn from a stream keyed by (seed, name).
    """
    spec.validate()
    params = {}
    for name, shape, fan_in in param_template(spec):
        rng = make_rng(seed, name)
        if name.endswith(".b"):
            bound = 1.0 / sqrt(fan_in)
        else:
            bound = sqrt(6.0 / fan_in)
        params[name] = ad.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return Model(spec, params)


# ---------------------------------------------------------------------------
# registry

def small_mlp_spec(input_shape=(1, 28, 28), num_classes: int = 10, hidden: int = 128) -> ModelSpec:
    features = int(np.prod(input_shape))
    layers = (Flatten(), Dense(features, hidden), Relu(), Dense(hidden, num_classes))
    return ModelSpec("small-mlp", tuple(input_shape), layers, num_classes)


def small_cnn_spec(input_shape=(1, 28, 28), num_classes: int = 10) -> ModelSpec:
    ch, h, w = input_shape
    if h % 4 or w % 4:
        raise ModelSpecError(f"small-cnn pools twice; spatial dims {h}x{w} must be divisible by 4")
    layers = (Conv(ch, 8, 3, 3, "same"), Relu(), MaxPool(2),
              Conv(8, 16, 3, 3, "same"), Relu(), MaxPool(2),
              Flatten(), Dense(16 * (h // 4) * (w // 4), num_classes))
    return ModelSpec("small-cnn", tuple(input_shape), layers, num_classes)


SPEC_BUILDERS = {
    "small-mlp": small_mlp_spec,
    "small-cnn": small_cnn_spec,
}


def named_spec(name: str, input_shape=(1, 28, 28), num_classes: int = 10) -> ModelSpec:
    try:
        builder = SPEC_BUILDERS[name]
    except KeyError:
        known = ", ".join(sorted(SPEC_BUILDERS))
        raise ValidationError(f"unknown model spec '{name}' (known: {known})") from None
    return builder(input_shape=tuple(input_shape), num_classes=num_classes)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian): magic "DYNT", u32 version, u32 spec-name length
# and UTF-8 bytes, u32 parameter count, then per parameter: u32 name
# length + bytes, u32 rank, u32 per dim, raw float64 data.

CKPT_MAGIC = b"DYNT"
CKPT_VERSION = 1


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointTruncatedError(f"checkpoint ends inside {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def save_checkpoint(model: Model, path):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        name_b = model.spec.name.encode("utf-8")
        f.write(struct.pack("<I", len(name_b)))
        f.write(name_b)
        f.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, spec: ModelSpec) -> Model:
    """Rebuild a model from disk, verifying it against spec.

    Raises CheckpointFormatError for bad magic/version,
    CheckpointMismatchError when the stored names or shapes disagree with
    spec, and CheckpointTruncatedError for short files.
    """
    spec.validate()
    template = param_template(spec)
    params = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CKPT_MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (name_len,) = struct.unpack("<I", _read_exact(f, 4, "spec name length"))
        stored_name = _read_exact(f, name_len, "spec name").decode("utf-8")
        if stored_name != spec.name:
            raise CheckpointMismatchError(f"checkpoint holds spec '{stored_name}', expected '{spec.name}'")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
        if count != len(template):
            raise CheckpointMismatchError(
                f"checkpoint holds {count} parameters, spec '{spec.name}' has {len(template)}")
        for expect_name, expect_shape, _ in template:
            (nl,) = struct.unpack("<I", _read_exact(f, 4, "parameter name length"))
            pname = _read_exact(f, nl, "parameter name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of {pname}"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"dims of {pname}"))
            if pname != expect_name or tuple(dims) != tuple(expect_shape):
                raise CheckpointMismatchError(
                    f"parameter '{pname}' with shape {tuple(dims)} does not match "
                    f"expected '{expect_name}' with shape {tuple(expect_shape)}")
            n = int(np.prod(dims)) if dims else 1
            raw = _read_exact(f, 8 * n, f"data of {pname}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
            params[pname] = ad.Tensor(arr, requires_grad=True)
        trailing = f.read(1)
        if trailing:
            raise CheckpointFormatError("trailing bytes after final parameter")
    return Model(spec, params)
