from __future__ import annotations

import numpy as np

from . import autograd as ag


class ShapeError(ValueError):
    pass


class Layer:
    """Base layer. Parametric kinds carry ``weight``, ``bias`` and ``mask`` arrays."""

    kind = "layer"
    has_params = False

    def out_shape(self, in_shape):
        return in_shape

    def spec(self):
        return {"kind": self.kind}

    def apply(self, x, weight=None, bias=None):
        raise NotImplementedError

    def apply_bounds(self, lower, upper, weight=None, bias=None):
        return self.apply(lower), self.apply(upper)


class _Affine(Layer):
    has_params = True

    def __init__(self):
        self.weight = None
        self.bias = None
        self.mask = None

    def _alloc(self, w_shape, n_out):
        self.weight = np.zeros(w_shape)
        self.bias = np.zeros(n_out)
        self.mask = np.ones(w_shape)

    def init_params(self, rng):
        fan_in = int(np.prod(self.weight.shape[1:]))
        # He-uniform
        bound = np.sqrt(6.0 / fan_in)
        self.weight = rng.uniform(-bound, bound, size=self.weight.shape)
        self.bias = np.zeros_like(self.bias)
        self.mask = np.ones_like(self.weight)

    @property
    def n_units(self):
        return self.weight.shape[0]

    def effective_weight(self):
        return self.weight * self.mask

    def apply_bounds(self, lower, upper, weight=None, bias=None):
        center = ag.mul(ag.add(upper, lower), 0.5)
        radius = ag.mul(ag.sub(upper, lower), 0.5)
        center = self.apply(center, weight, bias)
        radius = self._linear(radius, ag.absolute(weight))
        return ag.sub(center, radius), ag.add(center, radius)


class Dense(_Affine):
    kind = "dense"

    def __init__(self, out_features, in_features=None):
        super().__init__()
        self.out_features = int(out_features)
        self.in_features = in_features

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects a flat input, got {tuple(in_shape)}")
        if self.in_features is None:
            self.in_features = int(in_shape[0])
            self._alloc((self.out_features, self.in_features), self.out_features)
        elif self.in_features != in_shape[0]:
            raise ShapeError(f"dense expects {self.in_features} inputs, got {in_shape[0]}")
        return (self.out_features,)

    def spec(self):
        return {"kind": self.kind, "out": self.out_features}

    @classmethod
    def from_spec(cls, spec, in_shape=None):
        return cls(spec["out"])

    def _linear(self, x, weight):
        return ag.matmul(x, ag.transpose(weight, (1, 0)))

    def apply(self, x, weight=None, bias=None):
        return ag.add(self._linear(x, weight), bias)


class Conv2d(_Affine):
    kind = "conv2d"

    def __init__(self, out_channels, kernel, stride=1, padding=0):
        super().__init__()
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        self.in_channels = None

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d expects [C, H, W] input, got {tuple(in_shape)}")
        c, h, w = in_shape
        if self.in_channels is None:
            self.in_channels = int(c)
            self._alloc((self.out_channels, c, self.kernel, self.kernel), self.out_channels)
        elif self.in_channels != c:
            raise ShapeError(f"conv2d expects {self.in_channels} channels, got {c}")
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {self.kernel} does not fit a {h}x{w} input")
        return (self.out_channels, ho, wo)

    def spec(self):
        return {"kind": self.kind, "out": self.out_channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}

    @classmethod
    def from_spec(cls, spec, in_shape=None):
        return cls(spec["out"], spec["kernel"], spec.get("stride", 1), spec.get("padding", 0))

    def _linear(self, x, weight):
        return ag.conv2d(x, weight, self.stride, self.padding)

    def apply(self, x, weight=None, bias=None):
        out = self._linear(x, weight)
        return ag.add(out, ag.reshape(bias, (1, -1, 1, 1)))


class ReLU(Layer):
    kind = "relu"

    @classmethod
    def from_spec(cls, spec, in_shape=None):
        return cls()

    def apply(self, x, weight=None, bias=None):
        return ag.relu(x)


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    @classmethod
    def from_spec(cls, spec, in_shape=None):
        return cls()

    def apply(self, x, weight=None, bias=None):
        return ag.reshape(x, (x.shape[0], -1))


class AvgPool(Layer):
    kind = "avgpool"

    def __init__(self, kernel, stride=None):
        self.kernel = int(kernel)
        self.stride = int(stride or kernel)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"avgpool expects [C, H, W] input, got {tuple(in_shape)}")
        c, h, w = in_shape
        ho = (h - self.kernel) // self.stride + 1
        wo = (w - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"pool kernel {self.kernel} does not fit a {h}x{w} input")
        return (c, ho, wo)

    def spec(self):
        return {"kind": self.kind, "kernel": self.kernel, "stride": self.stride}

    @classmethod
    def from_spec(cls, spec, in_shape=None):
        return cls(spec["kernel"], spec.get("stride"))

    def apply(self, x, weight=None, bias=None):
        return ag.avg_pool2d(x, self.kernel, self.stride)


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, Flatten, AvgPool)}


def layer_from_spec(spec):
    try:
        cls = LAYER_KINDS[spec["kind"]]
    except KeyError:
        raise ValueError(f"unknown layer kind {spec.get('kind')!r}") from None
    return cls.from_spec(spec)
