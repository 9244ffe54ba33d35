"""Feed-forward classifiers with exact reverse-mode input gradients.

Every layer works on a batch: axis 0 indexes examples.  ``forward`` and
``input_gradient`` accept either a single example shaped like
``model.input_shape`` or a batch shaped ``(B, *model.input_shape)``.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FORMAT_VERSION = 1


class ModelFileError(Exception):
    """Base class for model file problems."""


class ModelFormatError(ModelFileError):
    """The document is not valid JSON or misses required fields."""


class ModelVersionError(ModelFileError):
    """The document declares an unsupported ``format_version``."""


class ModelShapeError(ModelFileError, ValueError):
    """Layer dimensions are inconsistent with each other or the input."""


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class Layer:
    kind = "layer"
    param_names = ()

    @property
    def params(self):
        return tuple(getattr(self, n) for n in self.param_names)

    def output_shape(self, in_shape):
        return in_shape

    def dims(self):
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, cache):
        """Return ``(dx, param_grads)`` for upstream gradient ``dout``."""
        raise NotImplementedError

    def frozen(self):
        return self

    def __repr__(self):
        return f"{type(self).__name__}({self.dims()})"


class Dense(Layer):
    kind = "dense"
    param_names = ("weights", "bias")

    def __init__(self, weights, bias):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    def dims(self):
        return list(self.weights.shape)

    def output_shape(self, in_shape):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ModelShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} disagree")
        if tuple(in_shape) != (self.weights.shape[1],):
            raise ModelShapeError(
                f"expects input ({self.weights.shape[1]},), got {tuple(in_shape)}")
        return (self.weights.shape[0],)

    def forward(self, x):
        return x @ self.weights.T + self.bias, x

    def backward(self, dout, x):
        return dout @ self.weights, (dout.T @ x, dout.sum(axis=0))

    def frozen(self):
        return Dense(_frozen(self.weights), _frozen(self.bias))


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dout, mask):
        return np.where(mask, dout, 0.0), ()


class Conv2D(Layer):
    """Stride-1, valid-padding convolution over ``(C, H, W)`` inputs."""

    kind = "conv2d"
    param_names = ("kernels", "bias")

    def __init__(self, kernels, bias):
        self.kernels = np.asarray(kernels, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    def dims(self):
        return list(self.kernels.shape)

    def output_shape(self, in_shape):
        k = self.kernels
        if k.ndim != 4 or self.bias.shape != (k.shape[0],):
            raise ModelShapeError(
                f"kernels {k.shape} and bias {self.bias.shape} disagree")
        if len(in_shape) != 3 or in_shape[0] != k.shape[1]:
            raise ModelShapeError(
                f"expects ({k.shape[1]}, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        if h < k.shape[2] or w < k.shape[3]:
            raise ModelShapeError(f"input {tuple(in_shape)} smaller than kernel")
        return (k.shape[0], h - k.shape[2] + 1, w - k.shape[3] + 1)

    def forward(self, x):
        kh, kw = self.kernels.shape[2:]
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
        out = np.tensordot(win, self.kernels, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + self.bias[None, :, None, None]
        return out, x

    def backward(self, dout, x):
        kh, kw = self.kernels.shape[2:]
        ho, wo = dout.shape[2:]
        dx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + ho, j:j + wo] += np.tensordot(
                    dout, self.kernels[:, :, i, j], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))
        dk = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
        return dx, (dk, dout.sum(axis=(0, 2, 3)))

    def frozen(self):
        return Conv2D(_frozen(self.kernels), _frozen(self.bias))


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2; a trailing odd row/column is dropped."""

    kind = "maxpool2x2"

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] < 2 or in_shape[2] < 2:
            raise ModelShapeError(f"cannot pool input {tuple(in_shape)}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def forward(self, x):
        b, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        blocks = (x[:, :, :2 * ho, :2 * wo]
                  .reshape(b, c, ho, 2, wo, 2)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(b, c, ho, wo, 4))
        idx = np.argmax(blocks, axis=-1)  # first maximum wins ties
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dout, cache):
        shape, idx = cache
        b, c, h, w = shape
        ho, wo = h // 2, w // 2
        blocks = np.zeros((b, c, ho, wo, 4))
        np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros(shape)
        dx[:, :, :2 * ho, :2 * wo] = (blocks.reshape(b, c, ho, wo, 2, 2)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(b, c, 2 * ho, 2 * wo))
        return dx, ()


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, shape):
        return dout.reshape(shape), ()


LAYER_TYPES = {cls.kind: cls for cls in (Dense, ReLU, Conv2D, MaxPool2x2, Flatten)}


def infer_shapes(input_shape, layers):
    """Propagate ``input_shape`` through ``layers``; returns every output shape.

    Raises ``ModelShapeError`` naming the first inconsistent layer.
    """
    shapes = []
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        try:
            shape = tuple(int(s) for s in layer.output_shape(shape))
        except ModelShapeError as e:
            raise ModelShapeError(f"layer {i} ({layer.kind}): {e}") from None
        for p in layer.params:
            if not np.all(np.isfinite(p)):
                raise ModelShapeError(f"layer {i} ({layer.kind}): non-finite parameters")
        shapes.append(shape)
    return shapes


@dataclass(frozen=True, eq=False)
class Model:
    """An immutable classifier: ``layers`` map ``input_shape`` to logits."""

    input_shape: tuple
    num_classes: int
    layers: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(l.frozen() for l in self.layers))
        object.__setattr__(self, "metadata", dict(self.metadata))
        shapes = infer_shapes(self.input_shape, self.layers)
        out = shapes[-1] if shapes else self.input_shape
        if out != (self.num_classes,):
            raise ModelShapeError(
                f"network output {out} does not match num_classes={self.num_classes}")

    @property
    def arch(self):
        return self.metadata.get("arch", "custom")

    @property
    def input_dim(self):
        return int(np.prod(self.input_shape))

    @property
    def name(self):
        return self.metadata.get("name") or f"{self.arch}-s{self.metadata.get('seed', 0)}"


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None], True
    if x.shape[1:] == model.input_shape:
        return x, False
    raise ValueError(f"input shape {x.shape} does not match model input {model.input_shape}")


def _forward_cached(layers, x):
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def _backward(layers, caches, dout, want_params=False):
    grads = []
    for layer, cache in zip(reversed(layers), reversed(caches)):
        dout, g = layer.backward(dout, cache)
        if want_params:
            grads.append(g)
    return dout, grads[::-1]


def forward(model, x):
    xb, single = _as_batch(model, x)
    logits, _ = _forward_cached(model.layers, xb)
    return logits[0] if single else logits


def log_softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def _check_labels(y, num_classes):
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError(f"class indices must be integers, got {y}")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValueError(f"class index out of range [0, {num_classes}): {y}")
    return y


def softmax_cross_entropy(logits, y):
    """Cross-entropy of ``softmax(logits)`` against class ``y``.

    Works on one logit vector (returns a float) or a batch (returns one loss
    per row).
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    lb = logits[None] if single else logits
    yb = _check_labels(np.atleast_1d(y), lb.shape[-1])
    if yb.shape[0] != lb.shape[0]:
        raise ValueError(f"{yb.shape[0]} labels for {lb.shape[0]} logit rows")
    loss = -np.take_along_axis(log_softmax(lb), yb[:, None], axis=1)[:, 0]
    return float(loss[0]) if single else loss


def logits_and_backprop(model, x):
    """Forward pass returning logits and a closure mapping dJ/dlogits to dJ/dx.

    Shared by the single-model and ensemble gradient routines.
    """
    logits, caches = _forward_cached(model.layers, x)

    def backprop(dlogits):
        dx, _ = _backward(model.layers, caches, dlogits)
        return dx

    return logits, backprop


def cross_entropy_grad(logits, y):
    """Loss per row and its gradient with respect to the logits."""
    lsm = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    loss = -lsm[rows, y]
    dlogits = np.exp(lsm)
    dlogits[rows, y] -= 1.0
    return loss, dlogits


def input_gradient(model, x, y):
    """Return ``(J, dJ/dx)`` for the cross-entropy loss at label ``y``.

    For a batch, ``J`` is a vector and row ``i`` of the gradient is the
    gradient of ``J[i]`` alone.
    """
    xb, single = _as_batch(model, x)
    yb = _check_labels(np.atleast_1d(y), model.num_classes)
    if yb.shape[0] != xb.shape[0]:
        raise ValueError(f"{yb.shape[0]} labels for {xb.shape[0]} inputs")
    logits, backprop = logits_and_backprop(model, xb)
    loss, dlogits = cross_entropy_grad(logits, yb)
    grad = backprop(dlogits)
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def predict(model, x):
    """Arg-max class; ties go to the lowest index."""
    logits = forward(model, x)
    return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=1)


def predict_batched(model, x, chunk=1024):
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([predict(model, x[i:i + chunk]) for i in range(0, len(x), chunk)])


# ---------------------------------------------------------------------------
# architecture presets

ARCHITECTURES = ("mlp-small", "mlp-wide", "cnn-small")


def _glorot(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def dense(rng, n_in, n_out):
    return Dense(_glorot(rng, (n_out, n_in), n_in, n_out), np.zeros(n_out))


def conv(rng, c_in, c_out, k=3):
    shape = (c_out, c_in, k, k)
    return Conv2D(_glorot(rng, shape, c_in * k * k, c_out * k * k), np.zeros(c_out))


def build_layers(arch, input_shape, num_classes, rng):
    """Freshly initialized (mutable) layers for a named preset."""
    n_in = int(np.prod(input_shape))
    if arch == "mlp-small":
        return [Flatten(), dense(rng, n_in, 128), ReLU(), dense(rng, 128, num_classes)]
    if arch == "mlp-wide":
        return [Flatten(), dense(rng, n_in, 512), ReLU(), dense(rng, 512, num_classes)]
    if arch == "cnn-small":
        if len(input_shape) != 3:
            raise ValueError("cnn-small needs (C, H, W) inputs")
        c, h, w = input_shape
        h2, w2 = ((h - 2) // 2 - 2) // 2, ((w - 2) // 2 - 2) // 2
        return [conv(rng, c, 8), ReLU(), MaxPool2x2(),
                conv(rng, 8, 16), ReLU(), MaxPool2x2(),
                Flatten(), dense(rng, 16 * h2 * w2, num_classes)]
    if arch == "linear":
        return [Flatten(), dense(rng, n_in, num_classes)]
    raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")


def init_model(arch, input_shape, num_classes, seed):
    rng = np.random.default_rng(seed)
    layers = build_layers(arch, tuple(input_shape), num_classes, rng)
    return Model(input_shape, num_classes, layers, {"arch": arch, "seed": int(seed)})


# ---------------------------------------------------------------------------
# serialization


def _fmt(v):
    s = format(v, ".17g")
    # keep the token a JSON float so -0.0 survives the round trip
    return s if any(ch in s for ch in ".en") else s + ".0"


def _num_array(a):
    return "[" + ",".join(_fmt(v) for v in np.asarray(a).ravel().tolist()) + "]"


def dumps_model(model):
    meta = dict(model.metadata)
    head = {
        "format_version": FORMAT_VERSION,
        "arch": meta.pop("arch", "custom"),
        "seed": meta.pop("seed", None),
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "metadata": meta,
    }
    layer_docs = []
    for layer in model.layers:
        params = ", ".join(f'"{n}": {_num_array(getattr(layer, n))}' for n in layer.param_names)
        layer_docs.append(
            f'{{"type": "{layer.kind}", "dims": {json.dumps(layer.dims())}, "params": {{{params}}}}}')
    body = json.dumps(head, sort_keys=True)[:-1]
    return body + ', "layers": [\n' + ",\n".join(layer_docs) + "\n]}\n"


def save_model(model, path):
    with open(path, "w") as f:
        f.write(dumps_model(model))


def _layer_from_doc(i, doc):
    kind = doc.get("type")
    cls = LAYER_TYPES.get(kind)
    if cls is None:
        raise ModelFormatError(f"layer {i}: unknown type {kind!r}")
    params = doc.get("params", {})
    if not cls.param_names:
        return cls()
    dims = doc.get("dims")
    if not isinstance(dims, list):
        raise ModelFormatError(f"layer {i}: missing dims")
    arrays = []
    for n in cls.param_names:
        if n not in params:
            raise ModelFormatError(f"layer {i} ({kind}): missing parameter {n!r}")
        arrays.append(np.array(params[n], dtype=np.float64))
    main, bias = arrays
    if main.size != int(np.prod(dims)) or bias.size != dims[0]:
        raise ModelShapeError(
            f"layer {i} ({kind}): dims {dims} do not match {main.size} weights "
            f"and {bias.size} biases")
    return cls(main.reshape(dims), bias)


def loads_model(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"not a model document: {e}") from None
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelVersionError(
            f"unsupported format_version {doc.get('format_version')!r}, expected {FORMAT_VERSION}")
    try:
        input_shape = tuple(int(s) for s in doc["input_shape"])
        num_classes = int(doc["num_classes"])
        layer_docs = doc["layers"]
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"missing or malformed field: {e}") from None
    layers = [_layer_from_doc(i, ld) for i, ld in enumerate(layer_docs)]
    meta = dict(doc.get("metadata") or {})
    meta["arch"] = doc.get("arch", "custom")
    if doc.get("seed") is not None:
        meta["seed"] = int(doc["seed"])
    return Model(input_shape, num_classes, layers, meta)


def load_model(path):
    with open(path, "rb") as f:
        raw = f.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ModelFormatError(f"not a model document: {e}") from None
    return loads_model(text)
