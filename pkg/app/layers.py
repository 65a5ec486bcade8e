import numpy as np

from app import tensor
from app.tensor import LayerCache


class Layer:
    kind = None
    tag = 0
    # u32 extents stored after the tag in a model file
    arity = 0

    def __init__(self, name):
        self.name = name
        self.params = {}

    # parameter keys that receive the L2 penalty
    weight_keys = ()

    def output_shape(self, input_shape):
        return input_shape

    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    def extents(self):
        return ()

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad, cache):
        raise NotImplementedError


class Conv2D(Layer):
    kind = "conv"
    tag = 1
    arity = 4
    weight_keys = ("kernels",)

    def __init__(self, name, filters, kernel_size, in_channels, activation="relu"):
        super().__init__(name)
        self.filters = filters
        self.kernel_size = kernel_size
        self.in_channels = in_channels
        self.activation = activation
        self.params = {
            "kernels": np.zeros((kernel_size, kernel_size, in_channels, filters), dtype=np.float32),
            "bias": np.zeros(filters, dtype=np.float32),
        }

    def output_shape(self, input_shape):
        h, w, _ = input_shape
        return (h - self.kernel_size + 1, w - self.kernel_size + 1, self.filters)

    def extents(self):
        return self.params["kernels"].shape

    def initialize(self, rng):
        k = self.kernel_size
        fan_in = k * k * self.in_channels
        limit = np.sqrt(6.0 / fan_in)
        self.params["kernels"] = rng.uniform(
            -limit, limit, size=self.params["kernels"].shape).astype(np.float32)

    def forward(self, x, training=False, rng=None):
        z = tensor.conv2d(x, self.params["kernels"], self.params["bias"])
        out = tensor.relu(z) if self.activation == "relu" else z
        if training:
            return out, LayerCache(x, pre_activation=z)
        return out, None

    def backward(self, grad, cache):
        if self.activation == "relu":
            grad = tensor.relu_backward(grad, cache.pre_activation)
        dx, dk, db = tensor.conv2d_backward(grad, cache.inputs, self.params["kernels"])
        return dx, {"kernels": dk, "bias": db}


class MaxPool2D(Layer):
    kind = "maxpool"
    tag = 2
    arity = 1

    def __init__(self, name, pool_size=2):
        super().__init__(name)
        self.pool_size = pool_size

    def output_shape(self, input_shape):
        h, w, c = input_shape
        return (h // 2, w // 2, c)

    def extents(self):
        return (self.pool_size,)

    def forward(self, x, training=False, rng=None):
        out, argmax = tensor.maxpool2d(x)
        if training:
            return out, LayerCache(x, argmax=argmax)
        return out, None

    def backward(self, grad, cache):
        return tensor.maxpool2d_backward(grad, cache.argmax, cache.inputs.shape), {}


class Flatten(Layer):
    kind = "flatten"
    tag = 3

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False, rng=None):
        out = x.reshape(x.shape[0], -1)
        if training:
            return out, LayerCache(x)
        return out, None

    def backward(self, grad, cache):
        return grad.reshape(cache.inputs.shape), {}


class Dense(Layer):
    kind = "dense"
    tag = 4
    arity = 2
    weight_keys = ("weights",)

    def __init__(self, name, units, in_features, activation="relu"):
        super().__init__(name)
        self.units = units
        self.in_features = in_features
        self.activation = activation
        self.params = {
            "weights": np.zeros((in_features, units), dtype=np.float32),
            "bias": np.zeros(units, dtype=np.float32),
        }

    def output_shape(self, input_shape):
        return (self.units,)

    def extents(self):
        return self.params["weights"].shape

    def initialize(self, rng):
        if self.activation == "relu":
            limit = np.sqrt(6.0 / self.in_features)
        else:
            limit = np.sqrt(6.0 / (self.in_features + self.units))
        self.params["weights"] = rng.uniform(
            -limit, limit, size=self.params["weights"].shape).astype(np.float32)

    def forward(self, x, training=False, rng=None):
        # softmax is applied by the model on the logits
        z = tensor.dense(x, self.params["weights"], self.params["bias"])
        out = tensor.relu(z) if self.activation == "relu" else z
        if training:
            return out, LayerCache(x, pre_activation=z)
        return out, None

    def backward(self, grad, cache):
        if self.activation == "relu":
            grad = tensor.relu_backward(grad, cache.pre_activation)
        dx, dw, db = tensor.dense_backward(grad, cache.inputs, self.params["weights"])
        return dx, {"weights": dw, "bias": db}


class Dropout(Layer):
    kind = "dropout"
    tag = 5
    arity = 1

    def __init__(self, name, rate):
        super().__init__(name)
        self.rate = rate

    def extents(self):
        return (int(round(self.rate * 1000)),)

    def forward(self, x, training=False, rng=None):
        if not training or self.rate <= 0:
            return x, (LayerCache(x, mask=None) if training else None)
        if rng is None:
            rng = np.random.default_rng()
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * mask, LayerCache(x, mask=mask)

    def backward(self, grad, cache):
        if cache.mask is None:
            return grad, {}
        return grad * cache.mask, {}


LAYER_TAGS = {cls.tag: cls for cls in (Conv2D, MaxPool2D, Flatten, Dense, Dropout)}
