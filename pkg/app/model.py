import logging
import struct
import zlib

import numpy as np

from app import tensor
from app.exceptions import ModelError, ModelFileError, TensorShapeError
from app.layers import LAYER_TAGS, Conv2D, Dense, Dropout, Flatten, MaxPool2D
from app.models import CLASS_NAMES, LayerSpec, TrainingConfig
from app.tools import seeded_rng
from modules.architectures import ARCHITECTURES

MAGIC = b"RGC1"
FORMAT_VERSION = 1
MAX_IMAGE_SIDE = 1024

LAYER_NAMES = {
    "conv": "conv2d",
    "maxpool": "max_pooling2d",
    "flatten": "flatten",
    "dense": "dense",
    "dropout": "dropout",
}


class ForwardCaches:
    def __init__(self, layers, logits, version):
        self.layers = layers
        self.logits = logits
        self.version = version


class Model:
    """Ordered layer stack and its parameter tensors."""

    def __init__(self, layers, input_shape, precision="single"):
        self.layers = layers
        self.input_shape = tuple(int(v) for v in input_shape)
        self.precision = precision
        # bumped whenever parameters change so stale caches can be detected
        self.version = 0

    def __repr__(self):
        return f"Model({len(self.layers)} layers, {self.parameter_count()} params)"

    def tensors(self):
        for layer in self.layers:
            for key, value in layer.params.items():
                yield f"{layer.name}.{key}", layer, key, value

    def parameters(self):
        return [value for _, _, _, value in self.tensors()]

    def parameter_count(self):
        return int(sum(layer.param_count() for layer in self.layers))

    def fingerprint(self):
        return (self.input_shape, tuple((layer.tag, tuple(int(e) for e in layer.extents()))
                                        for layer in self.layers))

    def summary(self):
        rows = []
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            rows.append((layer.name, shape, layer.param_count()))
        return rows

    def astype(self, precision):
        clone = self.copy()
        dtype = tensor.PRECISIONS[precision]
        for layer in clone.layers:
            for key in layer.params:
                layer.params[key] = layer.params[key].astype(dtype)
        clone.precision = precision
        return clone

    def copy(self):
        layers = []
        for layer in self.layers:
            clone = object.__new__(type(layer))
            clone.__dict__.update(layer.__dict__)
            clone.params = {k: v.copy() for k, v in layer.params.items()}
            layers.append(clone)
        return Model(layers, self.input_shape, self.precision)

    def snapshot(self):
        return [p.copy() for p in self.parameters()]

    def restore(self, arrays):
        for (_, layer, key, current), value in zip(list(self.tensors()), arrays):
            if current.shape != value.shape:
                raise TensorShapeError(f"cannot restore {layer.name}.{key}: {value.shape} vs {current.shape}")
            layer.params[key] = value.copy()
        self.version += 1

    def touch(self):
        self.version += 1

    def _check_input(self, batch):
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.input_shape:
            raise ModelError(f"expected batch of shape (B, {', '.join(map(str, self.input_shape))}), got {batch.shape}")
        if batch.size and float(batch.max()) > 1.5:
            raise ModelError("input is not normalized to [0, 1] (found values above 1.5)")

    def logits(self, batch, training=False, rng=None):
        batch = tensor.as_tensor(batch, self.precision)
        self._check_input(batch)
        x = batch
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, training=training, rng=rng)
            caches.append(cache)
        if training:
            return x, ForwardCaches(caches, x, self.version)
        return x, None

    def forward(self, batch, training=False, rng=None):
        logits, caches = self.logits(batch, training=training, rng=rng)
        if self.layers and getattr(self.layers[-1], "activation", None) == "softmax":
            return tensor.softmax(logits), caches
        return logits, caches

    def predict(self, batch, batch_size=64):
        batch = np.asarray(batch)
        out = []
        for start in range(0, len(batch), batch_size):
            probs, _ = self.forward(batch[start:start + batch_size])
            out.append(probs.astype(np.float64))
        if not out:
            return np.zeros((0, self.layers[-1].units))
        return np.concatenate(out)

    def l2_penalty(self, l2):
        if l2 == 0:
            return 0.0
        total = 0.0
        for layer in self.layers:
            for key in layer.weight_keys:
                total += float(np.sum(layer.params[key].astype(np.float64) ** 2))
        return 0.5 * l2 * total

    def loss(self, batch, onehot, l2=0.0, rng=None):
        logits, _ = self.logits(batch, training=rng is not None, rng=rng)
        data_loss, _, _ = tensor.softmax_cross_entropy(logits, onehot)
        return data_loss + self.l2_penalty(l2)

    def backward(self, caches, grad_logits, l2=0.0):
        """Gradients aligned with parameters(); weights get the l2·w term."""
        if caches is None:
            raise ModelError("backward needs caches from a training-mode forward")
        if caches.version != self.version:
            raise ModelError("stale caches: parameters changed since the forward pass")
        grads_by_layer = []
        grad = grad_logits
        for layer, cache in zip(reversed(self.layers), reversed(caches.layers)):
            grad, layer_grads = layer.backward(grad, cache)
            grads_by_layer.append(layer_grads)
        grads_by_layer.reverse()

        grads = []
        for layer, layer_grads in zip(self.layers, grads_by_layer):
            for key, value in layer.params.items():
                g = layer_grads[key].astype(value.dtype)
                if l2 and key in layer.weight_keys:
                    g = g + l2 * value
                grads.append(g)
        return grads


def build_specs(config: TrainingConfig):
    blocks, _ = ARCHITECTURES[config.depth]
    specs = []
    for i in range(blocks):
        specs.append(LayerSpec(kind="conv", filters=config.filters * 2 ** i, kernel_size=3, activation="relu"))
        specs.append(LayerSpec(kind="maxpool", pool_size=2, optional=i >= 2))
    specs.append(LayerSpec(kind="flatten"))
    for i in range(config.dense_layers - 1):
        specs.append(LayerSpec(kind="dense", units=config.dense_units, activation="relu"))
        if i == 0 and config.dropout > 0:
            specs.append(LayerSpec(kind="dropout", rate=config.dropout))
    specs.append(LayerSpec(kind="dense", units=len(CLASS_NAMES), activation="softmax"))
    return specs


def layers_from_specs(specs, input_shape):
    counters = {}
    layers = []
    shape = tuple(input_shape)

    def next_name(kind):
        counters[kind] = counters.get(kind, 0) + 1
        if kind == "flatten" and counters[kind] == 1:
            return "flatten"
        return f"{LAYER_NAMES[kind]}_{counters[kind]}"

    for spec in specs:
        if spec.kind in ("conv", "maxpool") and len(shape) != 3:
            raise ModelError(f"{spec.kind} layer needs a spatial input, got {shape}")
        if spec.kind == "conv":
            layer = Conv2D(next_name("conv"), spec.filters, spec.kernel_size, shape[2], spec.activation)
        elif spec.kind == "maxpool":
            if spec.optional and (shape[0] < 2 or shape[1] < 2):
                continue
            layer = MaxPool2D(next_name("maxpool"), spec.pool_size)
        elif spec.kind == "flatten":
            layer = Flatten(next_name("flatten"))
        elif spec.kind == "dense":
            layer = Dense(next_name("dense"), spec.units, shape[0], spec.activation)
        else:
            layer = Dropout(next_name("dropout"), spec.rate)

        shape = layer.output_shape(shape)
        if min(shape) < 1:
            raise ModelError(f"layer {layer.name} produces non-positive output extent {shape}")
        layers.append(layer)
    return layers


def build_model(config: TrainingConfig, init_seed=None):
    input_shape = (config.image_size, config.image_size, config.channels)
    layers = layers_from_specs(build_specs(config), input_shape)
    rng = seeded_rng(config.seed if init_seed is None else init_seed)
    for layer in layers:
        if hasattr(layer, "initialize"):
            layer.initialize(rng)
    return Model(layers, input_shape)


def forward(params: Model, batch, training=False):
    return params.forward(batch, training=training)


def backward(params: Model, caches, grad_logits, l2=0.0):
    return params.backward(caches, grad_logits, l2=l2)


def parameter_count(params: Model):
    return params.parameter_count()


def encode_fingerprint(model: Model):
    out = bytearray(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        extents = tuple(int(e) for e in layer.extents())
        if len(extents) != layer.arity:
            raise ModelError(f"layer {layer.name} has {len(extents)} extents, expected {layer.arity}")
        out += struct.pack("<B", layer.tag)
        out += struct.pack(f"<{layer.arity}I", *extents)
    return bytes(out)


def save_model(params: Model, path):
    body = bytearray(MAGIC)
    body += struct.pack("<I", FORMAT_VERSION)
    body += encode_fingerprint(params)
    for value in params.parameters():
        body += np.ascontiguousarray(value, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(body)
    logging.info("Saved model with %d parameters to %s", params.parameter_count(), path)


def _layers_from_records(records, input_shape):
    layers = []
    counters = {}
    shape = input_shape
    dense_total = sum(1 for tag, _ in records if tag == Dense.tag)
    dense_seen = 0
    for tag, extents in records:
        cls = LAYER_TAGS[tag]
        counters[cls.kind] = counters.get(cls.kind, 0) + 1
        name = f"{LAYER_NAMES[cls.kind]}_{counters[cls.kind]}"
        try:
            if cls is Conv2D:
                k, k2, cin, cout = extents
                if k != k2 or len(shape) != 3 or cin != shape[2]:
                    raise ValueError
                layer = Conv2D(name, cout, k, cin)
            elif cls is MaxPool2D:
                (pool,) = extents
                if len(shape) != 3:
                    raise ValueError
                layer = MaxPool2D(name, pool)
            elif cls is Flatten:
                layer = Flatten("flatten" if counters["flatten"] == 1 else name)
            elif cls is Dense:
                n, m = extents
                if shape != (n,):
                    raise ValueError
                dense_seen += 1
                layer = Dense(name, m, n, "softmax" if dense_seen == dense_total else "relu")
            else:
                (permille,) = extents
                layer = Dropout(name, permille / 1000.0)
            shape = layer.output_shape(shape)
            if min(shape) < 1:
                raise ValueError
        except ValueError:
            raise ModelFileError(
                "fingerprint", f"layer {name} extents {tuple(extents)} do not fit input {shape}")
        layers.append(layer)
    if not layers or not isinstance(layers[-1], Dense):
        raise ModelFileError("fingerprint", "final layer must be dense")
    return layers


def _infer_layers(records, image_size):
    """Square input side that fits the records; image_size is tried first, then the smallest fit."""
    if not records or records[0][0] != Conv2D.tag:
        raise ModelFileError("fingerprint", "first layer must be a convolution")
    channels = records[0][1][2]
    error = None
    for side in [image_size, *range(1, MAX_IMAGE_SIDE + 1)]:
        input_shape = (side, side, channels)
        try:
            return _layers_from_records(records, input_shape), input_shape
        except ModelFileError as e:
            if error is None:
                error = e
    raise error


def load_model(path, expected=None, image_size=50):
    """Reads a model file; expected (a Model) pins the architecture."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ModelFileError("io", f"cannot read {path}: {e.strerror or e}")

    if len(data) < 16:
        raise ModelFileError("truncated", f"{len(data)} bytes is shorter than the header")
    if data[:4] != MAGIC:
        raise ModelFileError("magic", f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ModelFileError("version", f"format version {version}, expected {FORMAT_VERSION}")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ModelFileError("crc", "checksum mismatch, file is corrupt or truncated")

    body = data[:-4]
    try:
        (count,) = struct.unpack_from("<I", body, 8)
        offset = 12
        records = []
        for _ in range(count):
            (tag,) = struct.unpack_from("<B", body, offset)
            offset += 1
            cls = LAYER_TAGS.get(tag)
            if cls is None:
                raise ModelFileError("fingerprint", f"unknown layer kind tag {tag}")
            extents = struct.unpack_from(f"<{cls.arity}I", body, offset)
            offset += 4 * cls.arity
            records.append((tag, extents))
    except struct.error:
        raise ModelFileError("fingerprint", "architecture records run past the end of the file")

    if expected is not None:
        exp_shape, exp_records = expected.fingerprint()
        if len(exp_records) != count:
            raise ModelFileError("fingerprint", f"expected {len(exp_records)} layers, found {count}")
        for i, (exp, found) in enumerate(zip(exp_records, records)):
            if exp[0] != found[0] or tuple(exp[1]) != tuple(found[1]):
                raise ModelFileError("fingerprint", f"layer {i}: expected {exp}, found {found}")
        image_size = exp_shape[0]

    layers, input_shape = _infer_layers(records, image_size)
    if expected is not None and tuple(expected.input_shape) != input_shape:
        raise ModelFileError("fingerprint", f"expected input {expected.input_shape}, found {input_shape}")
    model = Model(layers, input_shape)

    expected_values = model.parameter_count()
    remaining = len(body) - offset
    if remaining != 4 * expected_values:
        raise ModelFileError(
            "fingerprint",
            f"layer records describe {expected_values} weights, file holds {remaining // 4}")

    values = np.frombuffer(body, dtype="<f4", offset=offset).astype(np.float32)
    cursor = 0
    for _, layer, key, current in list(model.tensors()):
        n = current.size
        layer.params[key] = values[cursor:cursor + n].reshape(current.shape).copy()
        cursor += n
    return model
