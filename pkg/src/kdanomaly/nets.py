"""Sequential encoder/decoder/head architectures and checkpoint I/O.

A :class:`Model` is an ordered list of layer specs plus a parameter store
keyed ``"<layer index>.<weight|bias>"``.  Two models built from equal specs
and input shapes share an architecture fingerprint regardless of seed, which
is how a student is matched to its teacher.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, conv2d, conv_output_size, global_avg_pool, linear, relu, reshape, upsample_nearest
from .errors import BuildError, CompatibilityError, DimensionError, FormatError, NotFoundError
from .rng import SeedLike, make_rng

Shape = Tuple[int, ...]


# -- layer specs ------------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    out_channels: int
    k: int
    stride: int = 1
    pad: int = 0

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3:
            raise ValueError(f"Conv needs a [C,H,W] input, got {shape}")
        c, h, w = shape
        if min(self.out_channels, self.k, self.stride) < 1 or self.pad < 0:
            raise ValueError(f"invalid Conv extents {self}")
        if self.k > h + 2 * self.pad or self.k > w + 2 * self.pad:
            raise ValueError(f"kernel {self.k} larger than padded input {h}x{w} (pad {self.pad})")
        return (self.out_channels,
                conv_output_size(h, self.k, self.stride, self.pad),
                conv_output_size(w, self.k, self.stride, self.pad))

    def param_shapes(self, shape: Shape) -> Dict[str, Shape]:
        return {"weight": (self.out_channels, shape[0], self.k, self.k), "bias": (self.out_channels,)}

    def apply(self, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        return conv2d(x, params["weight"], params["bias"], stride=self.stride, pad=self.pad)


@dataclass(frozen=True)
class Dense:
    out_dim: int

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 1:
            raise ValueError(f"{type(self).__name__} needs a flat [D] input, got {shape}")
        if self.out_dim < 1:
            raise ValueError(f"invalid output dimension {self.out_dim}")
        return (self.out_dim,)

    def param_shapes(self, shape: Shape) -> Dict[str, Shape]:
        return {"weight": (self.out_dim, shape[0]), "bias": (self.out_dim,)}

    def apply(self, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        return linear(x, params["weight"], params["bias"])


@dataclass(frozen=True)
class Projection(Dense):
    """Dense layer whose output is the representation used for distillation."""


@dataclass(frozen=True)
class ReLU:
    def output_shape(self, shape: Shape) -> Shape:
        return shape

    def param_shapes(self, shape):
        return {}

    def apply(self, x, params):
        return relu(x)


@dataclass(frozen=True)
class GlobalAvgPool:
    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3:
            raise ValueError(f"GlobalAvgPool needs a [C,H,W] input, got {shape}")
        return (shape[0],)

    def param_shapes(self, shape):
        return {}

    def apply(self, x, params):
        return global_avg_pool(x)


@dataclass(frozen=True)
class Flatten:
    def output_shape(self, shape: Shape) -> Shape:
        return (int(np.prod(shape)),)

    def param_shapes(self, shape):
        return {}

    def apply(self, x, params):
        return reshape(x, (x.shape[0], -1))


@dataclass(frozen=True)
class Reshape:
    shape: Tuple[int, ...]

    def output_shape(self, shape: Shape) -> Shape:
        if int(np.prod(shape)) != int(np.prod(self.shape)):
            raise ValueError(f"cannot reshape {shape} into {self.shape}")
        return tuple(self.shape)

    def param_shapes(self, shape):
        return {}

    def apply(self, x, params):
        return reshape(x, (x.shape[0],) + tuple(self.shape))


@dataclass(frozen=True)
class Upsample:
    factor: int = 2

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3:
            raise ValueError(f"Upsample needs a [C,H,W] input, got {shape}")
        c, h, w = shape
        return (c, h * self.factor, w * self.factor)

    def param_shapes(self, shape):
        return {}

    def apply(self, x, params):
        return upsample_nearest(x, self.factor)


LayerSpec = Union[Conv, Dense, Projection, ReLU, GlobalAvgPool, Flatten, Reshape, Upsample]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv, Dense, Projection, ReLU, GlobalAvgPool, Flatten, Reshape, Upsample)}


def spec_to_dict(spec: LayerSpec) -> dict:
    fields = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(spec).items()}
    return {"type": type(spec).__name__, **fields}


def spec_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    cls = _LAYER_TYPES.get(d.pop("type", None))
    if cls is None:
        raise FormatError(f"unknown layer type in {d}")
    if cls is Reshape:
        d["shape"] = tuple(d["shape"])
    return cls(**d)


def architecture_fingerprint(specs: Sequence[LayerSpec], input_shape: Shape) -> bytes:
    payload = json.dumps({"specs": [spec_to_dict(s) for s in specs], "input_shape": list(input_shape)},
                         sort_keys=True)
    return hashlib.blake2b(payload.encode(), digest_size=8).digest()


def infer_shapes(specs: Sequence[LayerSpec], input_shape: Shape) -> List[Shape]:
    """Shapes after each layer; raises :class:`BuildError` naming the layer index."""
    shapes = []
    shape = tuple(int(s) for s in input_shape)
    if not shape or min(shape) < 1:
        raise BuildError(f"invalid input shape {input_shape}")
    for i, spec in enumerate(specs):
        try:
            shape = spec.output_shape(shape)
        except ValueError as exc:
            raise BuildError(f"layer {i} ({type(spec).__name__}): {exc}") from None
        shapes.append(shape)
    return shapes


# -- models ---------------------------------------------------------------------------

class Model:
    """Ordered stack of layers with a deterministic parameter store."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Shape, params: Dict[str, Tensor]):
        if not specs:
            raise BuildError("a model needs at least one layer")
        self.specs: List[LayerSpec] = list(specs)
        self.input_shape: Shape = tuple(int(s) for s in input_shape)
        self.shapes = infer_shapes(self.specs, self.input_shape)
        self.params = params
        self.frozen = False
        expected = self._expected_param_shapes()
        self._layer_param_names = [[n.split(".", 1)[1] for n in expected if n.split(".", 1)[0] == str(i)]
                                   for i in range(len(self.specs))]
        if set(expected) != set(params):
            raise BuildError(f"parameter names {sorted(params)} do not match architecture {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise BuildError(f"parameter {name} has shape {params[name].shape}, expected {shape}")

    def _expected_param_shapes(self) -> Dict[str, Shape]:
        out = {}
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            for pname, pshape in spec.param_shapes(shape).items():
                out[f"{i}.{pname}"] = tuple(pshape)
            shape = self.shapes[i]
        return out

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1]

    @property
    def fingerprint(self) -> bytes:
        return architecture_fingerprint(self.specs, self.input_shape)

    def parameters(self) -> List[Tensor]:
        return [self.params[k] for k in self.param_names()]

    def param_names(self) -> List[str]:
        return list(self._expected_param_shapes())

    def param_hash(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name in self.param_names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def freeze(self) -> "Model":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.frozen = True
            p.grad = None
            p.data.setflags(write=False)
        return self

    def copy(self) -> "Model":
        """Unfrozen deep copy sharing no storage with ``self``."""
        params = {k: Tensor(np.array(v.data), requires_grad=True, name=v.name) for k, v in self.params.items()}
        return Model(self.specs, self.input_shape, params)

    def forward(self, x, upto: Optional[int] = None) -> Tensor:
        """Apply layers ``[0, upto)`` (all by default) to a batch ``x``."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"input batch shape {x.shape} does not match model input {self.input_shape}")
        stop = len(self.specs) if upto is None else upto
        for i, spec in enumerate(self.specs[:stop]):
            layer_params = {p: self.params[f"{i}.{p}"] for p in self._layer_param_names[i]}
            x = spec.apply(x, layer_params)
        return x

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 256, upto: Optional[int] = None) -> np.ndarray:
        """Forward pass in batches, returning a float64 array (no tape recorded)."""
        x = np.asarray(x, dtype=np.float32)
        outs = [self.forward(Tensor(x[i:i + batch_size]), upto=upto).data.astype(np.float64)
                for i in range(0, len(x), batch_size)]
        if not outs:
            shape = self.shapes[(upto if upto is not None else len(self.specs)) - 1]
            return np.zeros((0,) + tuple(shape))
        return np.concatenate(outs, axis=0)

    def truncated(self, n_layers: int) -> "Model":
        """First ``n_layers`` layers with copies of their parameters."""
        params = {k: Tensor(np.array(v.data), requires_grad=True, name=v.name) for k, v in self.params.items()
                  if int(k.split(".", 1)[0]) < n_layers}
        return Model(self.specs[:n_layers], self.input_shape, params)

    def extended(self, extra: Sequence[LayerSpec], seed: SeedLike) -> "Model":
        """Copy of this model with freshly initialised ``extra`` layers appended."""
        specs = self.specs + list(extra)
        fresh = build_model(specs, self.input_shape, seed)
        for k, v in self.params.items():
            fresh.params[k] = Tensor(np.array(v.data), requires_grad=True, name=k)
        return fresh


def _init_param(name: str, shape: Shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith("bias"):
        return np.zeros(shape, dtype=np.float32)
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(specs: Sequence[LayerSpec], input_shape: Shape, seed: SeedLike = 0) -> Model:
    """Build a model with weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)) and zero biases."""
    if not specs:
        raise BuildError("a model needs at least one layer")
    shapes = infer_shapes(specs, input_shape)
    rng = make_rng(seed)
    params = {}
    shape = tuple(input_shape)
    for i, spec in enumerate(specs):
        for pname, pshape in spec.param_shapes(shape).items():
            name = f"{i}.{pname}"
            params[name] = Tensor(_init_param(name, tuple(pshape), rng), requires_grad=True, name=name)
        shape = shapes[i]
    return Model(specs, input_shape, params)


def default_encoder(proj_dim: int = 32, widths: Sequence[int] = (8, 16, 32)) -> List[LayerSpec]:
    """Three conv blocks, global pooling and a projection head."""
    first, second, third = widths
    return [
        Conv(first, 3, 1, 1), ReLU(),
        Conv(second, 3, 2, 1), ReLU(),
        Conv(third, 3, 2, 1), ReLU(),
        GlobalAvgPool(),
        Projection(proj_dim),
    ]


def trunk_of(encoder: Sequence[LayerSpec]) -> List[LayerSpec]:
    """Encoder layers up to (excluding) the trailing projection head."""
    specs = list(encoder)
    if specs and isinstance(specs[-1], Projection):
        specs = specs[:-1]
    return specs


def projection_of(encoder: Sequence[LayerSpec]) -> Projection:
    last = list(encoder)[-1]
    if not isinstance(last, Projection):
        raise BuildError("encoder must end with a Projection layer")
    return last


def mirrored_decoder(encoder: Sequence[LayerSpec], input_shape: Shape) -> List[LayerSpec]:
    """Decoder mirroring the conv stack of ``encoder`` with nearest-neighbour upsampling."""
    trunk = trunk_of(encoder)
    shapes = infer_shapes(trunk, input_shape)
    convs = []
    channels = input_shape[0]
    pre_pool = tuple(input_shape)
    for spec, shape in zip(trunk, shapes):
        if isinstance(spec, Conv):
            convs.append((channels, spec.stride))
            channels = spec.out_channels
        if isinstance(spec, GlobalAvgPool):
            break
        pre_pool = shape
    if not convs:
        raise BuildError("encoder has no convolution layers to mirror")
    decoder: List[LayerSpec] = [Dense(int(np.prod(pre_pool))), ReLU(), Reshape(tuple(pre_pool))]
    for idx, (cin, stride) in enumerate(reversed(convs)):
        if stride > 1:
            decoder.append(Upsample(stride))
        decoder.append(Conv(cin, 3, 1, 1))
        if idx < len(convs) - 1:
            decoder.append(ReLU())
    return decoder


# -- binary framing shared by checkpoints and statistic bundles -----------------------

MAGIC = b"ADKD"
FORMAT_VERSION = 1


def write_bundle(path, tensors: Dict[str, np.ndarray], provenance: dict, fingerprint: bytes = b"\0" * 8) -> None:
    if len(fingerprint) != 8:
        raise ValueError("fingerprint must be 8 bytes")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), fingerprint, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    prov = json.dumps(provenance, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(prov)) + prov)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_bundle(path) -> Tuple[bytes, Dict[str, np.ndarray], dict]:
    """Return ``(fingerprint, tensors, provenance)`` from a bundle file."""
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no such file: {path}")
    r = _Reader(path.read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    fingerprint = r.take(8)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndims,) = r.unpack("<B")
        dims = r.unpack(f"<{ndims}I") if ndims else ()
        n = int(np.prod(dims)) if dims else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    (plen,) = r.unpack("<I")
    try:
        provenance = json.loads(r.take(plen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt provenance record ({exc})") from None
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes after provenance")
    return fingerprint, tensors, provenance


def save_checkpoint(model: Model, path, provenance: Optional[dict] = None) -> None:
    prov = dict(provenance or {})
    prov["architecture"] = {"specs": [spec_to_dict(s) for s in model.specs],
                            "input_shape": list(model.input_shape)}
    prov["frozen"] = model.frozen
    tensors = {name: model.params[name].data for name in model.param_names()}
    write_bundle(path, tensors, prov, model.fingerprint)


def load_checkpoint(path, expect: Optional[Tuple[Sequence[LayerSpec], Shape]] = None) -> Tuple[Model, dict]:
    """Load a model and its provenance record.

    ``expect`` is an optional ``(specs, input_shape)`` pair the stored
    architecture must match; a mismatch raises :class:`CompatibilityError`.
    """
    fingerprint, tensors, prov = read_bundle(path)
    arch = prov.get("architecture")
    if not arch:
        raise FormatError(f"{path}: checkpoint has no architecture record")
    specs = [spec_from_dict(d) for d in arch["specs"]]
    input_shape = tuple(arch["input_shape"])
    if architecture_fingerprint(specs, input_shape) != fingerprint:
        raise FormatError(f"{path}: stored fingerprint does not match stored architecture")
    if expect is not None and architecture_fingerprint(*expect) != fingerprint:
        raise CompatibilityError(f"{path}: checkpoint architecture differs from the requested one")
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}
    model = Model(specs, input_shape, params)
    if prov.get("frozen"):
        model.freeze()
    return model, prov
