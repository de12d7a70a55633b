"""Sequential CNN representation, ModelPack weight I/O, and the forward pass.

Layer indexing
--------------
Layers are stored in execution order: ``layers[0]`` consumes the
(preprocessed) image and ``layers[-1]`` emits the logits. Propagation
formulas in this package are written against the reverse ("depth") index
``n`` where layer ``n = 1`` produces the logits and ``n = N`` touches the
image; ``Model.exec_index`` / ``Model.depth_index`` convert between the two.

ModelPack format (little-endian)
--------------------------------
``"NNPK"`` magic (4 bytes), ``u32`` version = 1, ``u64`` manifest length,
UTF-8 JSON manifest, then one contiguous buffer region of raw float32
values. The manifest declares ``class_count``, ``input_shape``,
``preprocess.mean`` / ``preprocess.std`` (applied to images scaled to
[0, 1]), and an ordered ``layers`` list; each parameter tensor carries its
``shape`` plus byte ``offset`` / ``length`` relative to the start of the
buffer region. Buffers are row-major float32.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .core import as_tensor

MAGIC = b"NNPK"
FORMAT_VERSION = 1

LAYER_KINDS = ("conv2d", "linear", "relu", "maxpool2d", "avgpool2d", "flatten")


class ModelPackError(Exception):
    """Base class for ModelPack load failures."""


class BadMagicError(ModelPackError):
    pass


class VersionError(ModelPackError):
    pass


class ManifestError(ModelPackError):
    pass


class BufferLengthError(ModelPackError):
    """Declared shape/offset/length disagrees with the bytes on disk."""


class NonFiniteWeightError(ModelPackError):
    pass


class UnsupportedLayerError(ModelPackError):
    """Layer kind outside the supported strictly-sequential set."""


class TopologyError(ModelPackError):
    """Adjacent layer shapes do not compose, or the head is not a class vector."""


@dataclass
class Layer:
    kind: str
    weight: np.ndarray = None  # conv2d: O×I×Kh×Kw, linear: O×I
    bias: np.ndarray = None  # O
    stride: int = 1
    padding: int = 0
    kernel: int = 0  # pools only

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise UnsupportedLayerError(f"unsupported layer kind {self.kind!r}")
        if self.stride < 1:
            raise ManifestError(f"{self.kind}: stride must be >= 1")
        if self.padding < 0:
            raise ManifestError(f"{self.kind}: padding must be >= 0")


@dataclass
class Model:
    layers: list
    class_count: int
    input_shape: tuple
    mean: np.ndarray
    std: np.ndarray

    @property
    def depth(self):
        """Number of layers N."""
        return len(self.layers)

    def exec_index(self, n):
        """Execution position of depth index ``n`` (1 = logits layer)."""
        if not 1 <= n <= self.depth:
            raise IndexError(f"depth index {n} outside 1..{self.depth}")
        return self.depth - n

    def depth_index(self, i):
        """Depth index of execution position ``i`` (0 = image layer)."""
        if not 0 <= i < self.depth:
            raise IndexError(f"execution index {i} outside 0..{self.depth - 1}")
        return self.depth - i

    def preprocess(self, image):
        """Subtract mean and divide by std, per channel."""
        x = as_tensor(image)
        if x.ndim == 3:
            return (x - self.mean[:, None, None]) / self.std[:, None, None]
        return (x - self.mean) / self.std


@dataclass
class ForwardTrace:
    """Cached per-layer inputs from one forward pass.

    ``inputs[i]`` is what ``model.layers[i]`` consumed; ``inputs[0]`` is the
    preprocessed image. ``logits`` is the final class-score vector.
    """

    inputs: list
    logits: np.ndarray


# ---------------------------------------------------------------------------
# layer arithmetic


def _pad2d(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _window_view(x, kh, kw, stride):
    """Sliding windows of a C×H×W array: view of shape C×oh×ow×kh×kw."""
    c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"window {kh}x{kw} does not fit input {h}x{w}")
    s0, s1, s2 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(c, oh, ow, kh, kw),
        strides=(s0, s1 * stride, s2 * stride, s1, s2),
        writeable=False,
    )
    return view, oh, ow


def conv2d_forward(x, weight, bias, stride, padding):
    """Cross-correlation of C×H×W input with O×I×Kh×Kw kernels (im2col)."""
    o, i, kh, kw = weight.shape
    xp = _pad2d(x, padding)
    view, oh, ow = _window_view(xp, kh, kw, stride)
    cols = view.transpose(0, 3, 4, 1, 2).reshape(i * kh * kw, oh * ow)
    out = weight.reshape(o, i * kh * kw) @ cols
    if bias is not None:
        out = out + bias[:, None]
    return out.reshape(o, oh, ow)


def conv2d_input_grad(grad_out, weight, in_shape, stride, padding):
    """Scatter grad/relevance messages back through a conv (col2im)."""
    o, i, kh, kw = weight.shape
    c, h, w = in_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh, ow = grad_out.shape[1], grad_out.shape[2]
    cols = weight.reshape(o, i * kh * kw).T @ grad_out.reshape(o, oh * ow)
    cols = cols.reshape(i, kh, kw, oh, ow)
    acc = np.zeros((c, hp, wp), dtype=grad_out.dtype)
    for a in range(kh):
        for b in range(kw):
            acc[:, a : a + oh * stride : stride, b : b + ow * stride : stride] += cols[:, a, b]
    if padding:
        acc = acc[:, padding : hp - padding, padding : wp - padding]
    return acc


def maxpool_argmax(x, kernel, stride):
    """Per-window winner index (flat within window, first tie in row-major)."""
    view, oh, ow = _window_view(x, kernel, kernel, stride)
    flat = view.reshape(x.shape[0], oh, ow, kernel * kernel)
    return flat.argmax(axis=3), oh, ow


def maxpool_forward(x, kernel, stride):
    view, _, _ = _window_view(x, kernel, kernel, stride)
    return view.max(axis=(3, 4))


def maxpool_scatter(values, x, kernel, stride):
    """Route each window's value to the argmax position of the raw input."""
    idx, oh, ow = maxpool_argmax(x, kernel, stride)
    c = x.shape[0]
    out = np.zeros(x.shape, dtype=values.dtype)
    cc, oy, ox = np.meshgrid(np.arange(c), np.arange(oh), np.arange(ow), indexing="ij")
    iy = oy * stride + idx // kernel
    ix = ox * stride + idx % kernel
    np.add.at(out, (cc.ravel(), iy.ravel(), ix.ravel()), values.ravel())
    return out


def avgpool_forward(x, kernel, stride):
    view, _, _ = _window_view(x, kernel, kernel, stride)
    return view.mean(axis=(3, 4))


def avgpool_scatter(values, in_shape, kernel, stride):
    """Distribute each window's value uniformly over its members."""
    c, h, w = in_shape
    oh, ow = values.shape[1], values.shape[2]
    out = np.zeros(in_shape, dtype=values.dtype)
    share = values / (kernel * kernel)
    for a in range(kernel):
        for b in range(kernel):
            out[:, a : a + oh * stride : stride, b : b + ow * stride : stride] += share
    return out


def layer_forward(layer, x):
    if layer.kind == "conv2d":
        return conv2d_forward(x, layer.weight, layer.bias, layer.stride, layer.padding)
    if layer.kind == "linear":
        return layer.weight @ x + layer.bias
    if layer.kind == "relu":
        return np.maximum(x, 0)
    if layer.kind == "maxpool2d":
        return maxpool_forward(x, layer.kernel, layer.stride)
    if layer.kind == "avgpool2d":
        return avgpool_forward(x, layer.kernel, layer.stride)
    if layer.kind == "flatten":
        return x.reshape(-1)
    raise UnsupportedLayerError(layer.kind)


def layer_output_shape(layer, in_shape):
    """Static shape of ``layer`` applied to ``in_shape`` (raises if invalid)."""
    if layer.kind == "conv2d":
        o, i, kh, kw = layer.weight.shape
        c, h, w = in_shape
        if c != i:
            raise TopologyError(f"conv2d expects {i} channels, got {c}")
        oh = (h + 2 * layer.padding - kh) // layer.stride + 1
        ow = (w + 2 * layer.padding - kw) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise TopologyError("conv2d kernel larger than padded input")
        return (o, oh, ow)
    if layer.kind == "linear":
        o, i = layer.weight.shape
        if in_shape != (i,):
            raise TopologyError(f"linear expects shape ({i},), got {in_shape}")
        return (o,)
    if layer.kind in ("maxpool2d", "avgpool2d"):
        c, h, w = in_shape
        oh = (h - layer.kernel) // layer.stride + 1
        ow = (w - layer.kernel) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise TopologyError("pool kernel larger than input")
        return (c, oh, ow)
    if layer.kind == "flatten":
        return (int(np.prod(in_shape)),)
    return tuple(in_shape)  # relu


def validate_model(model):
    """Check shape composition and the class-vector head; raise on failure."""
    shape = tuple(model.input_shape)
    for layer in model.layers:
        shape = layer_output_shape(layer, shape)
    if shape != (model.class_count,):
        raise TopologyError(
            f"model head produces shape {shape}, expected ({model.class_count},)"
        )
    return model


def forward(model, image):
    """Run the layer chain on ``image``, caching every layer's input.

    Preprocessing (per-channel mean/std) is applied before the first layer,
    so ``trace.inputs[0]`` holds the normalized image.
    """
    image = as_tensor(image)
    if tuple(image.shape) != tuple(model.input_shape):
        raise ValueError(
            f"image shape {image.shape} does not match model input {model.input_shape}"
        )
    x = model.preprocess(image)
    inputs = []
    for layer in model.layers:
        inputs.append(x)
        x = layer_forward(layer, x)
    if x.shape != (model.class_count,):
        raise TopologyError(f"logits shape {x.shape} != ({model.class_count},)")
    return ForwardTrace(inputs=inputs, logits=x)


# ---------------------------------------------------------------------------
# ModelPack I/O


def _manifest_layer(layer, params):
    entry = {"kind": layer.kind}
    if layer.kind == "conv2d":
        entry["stride"] = layer.stride
        entry["padding"] = layer.padding
    if layer.kind in ("maxpool2d", "avgpool2d"):
        entry["kernel"] = layer.kernel
        entry["stride"] = layer.stride
    entry.update(params)
    return entry


def save_modelpack(model, path):
    """Write ``model`` to ``path`` in ModelPack format."""
    chunks = []
    offset = 0

    def put(arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        rec = {"shape": list(arr.shape), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
        return rec

    layers = []
    for layer in model.layers:
        params = {}
        if layer.kind in ("conv2d", "linear"):
            params["weight"] = put(layer.weight)
            params["bias"] = put(layer.bias)
        layers.append(_manifest_layer(layer, params))

    manifest = {
        "class_count": model.class_count,
        "input_shape": list(model.input_shape),
        "preprocess": {
            "mean": [float(v) for v in np.atleast_1d(model.mean)],
            "std": [float(v) for v in np.atleast_1d(model.std)],
        },
        "layers": layers,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def _read_param(buffers, rec, what):
    try:
        shape = tuple(int(v) for v in rec["shape"])
        off = int(rec["offset"])
        length = int(rec["length"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{what}: malformed parameter record") from exc
    expect = 4 * int(np.prod(shape)) if shape else 4
    if length != expect:
        raise BufferLengthError(
            f"{what}: declared length {length} != 4*prod{shape} = {expect}"
        )
    if off < 0 or off + length > len(buffers):
        raise BufferLengthError(f"{what}: byte range [{off}, {off + length}) outside buffer")
    arr = np.frombuffer(buffers, dtype="<f4", count=length // 4, offset=off)
    arr = arr.reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteWeightError(f"{what}: non-finite weight values")
    return arr


def load_modelpack(path):
    """Load a ModelPack file, verifying manifest declarations byte-for-byte."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise BufferLengthError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    (mlen,) = struct.unpack_from("<Q", data, 8)
    if 16 + mlen > len(data):
        raise BufferLengthError(f"{path}: manifest extends past end of file")
    try:
        manifest = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: manifest is not valid JSON") from exc
    buffers = data[16 + mlen :]

    try:
        class_count = int(manifest["class_count"])
        input_shape = tuple(int(v) for v in manifest["input_shape"])
        mean = np.asarray(manifest["preprocess"]["mean"], dtype=np.float32)
        std = np.asarray(manifest["preprocess"]["std"], dtype=np.float32)
        entries = manifest["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: manifest missing required fields") from exc
    if np.any(std == 0):
        raise ManifestError(f"{path}: zero std in preprocessing")

    layers = []
    for pos, entry in enumerate(entries):
        kind = entry.get("kind")
        what = f"layer {pos} ({kind})"
        if kind not in LAYER_KINDS:
            raise UnsupportedLayerError(f"{what}: unsupported kind")
        kw = {}
        if kind == "conv2d":
            kw["weight"] = _read_param(buffers, entry["weight"], what)
            kw["bias"] = _read_param(buffers, entry["bias"], what)
            kw["stride"] = int(entry.get("stride", 1))
            kw["padding"] = int(entry.get("padding", 0))
            if kw["weight"].ndim != 4 or kw["bias"].shape != (kw["weight"].shape[0],):
                raise ManifestError(f"{what}: weight/bias shapes inconsistent")
        elif kind == "linear":
            kw["weight"] = _read_param(buffers, entry["weight"], what)
            kw["bias"] = _read_param(buffers, entry["bias"], what)
            if kw["weight"].ndim != 2 or kw["bias"].shape != (kw["weight"].shape[0],):
                raise ManifestError(f"{what}: weight/bias shapes inconsistent")
        elif kind in ("maxpool2d", "avgpool2d"):
            kw["kernel"] = int(entry["kernel"])
            kw["stride"] = int(entry.get("stride", kw["kernel"]))
            if kw["kernel"] < 1:
                raise ManifestError(f"{what}: kernel must be >= 1")
        layers.append(Layer(kind=kind, **kw))

    model = Model(
        layers=layers,
        class_count=class_count,
        input_shape=input_shape,
        mean=mean,
        std=std,
    )
    return validate_model(model)
