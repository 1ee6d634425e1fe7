from __future__ import annotations

import copy
import hashlib

import numpy as np

from . import autograd as ag
from .layers import Dense, ShapeError, layer_from_spec


class Network:
    """Ordered layer stack with per-weight binary masks.

    Parameters are addressed by ``"<layer index>.weight"`` / ``"<layer index>.bias"``.
    The effective weight in every computation is ``weight * mask``.
    """

    def __init__(self, layers, input_shape, num_classes=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        shape = self.input_shape
        self.layer_input_shapes = []
        for i, layer in enumerate(self.layers):
            self.layer_input_shapes.append(shape)
            try:
                shape = layer.out_shape(shape)
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
        if len(shape) != 1:
            raise ShapeError(f"network output must be flat logits, got shape {shape}")
        if num_classes is not None and shape[0] != num_classes:
            raise ShapeError(f"network emits {shape[0]} logits, expected {num_classes}")
        self.num_classes = shape[0]

    @classmethod
    def from_spec(cls, arch, input_shape, seed=0):
        net = cls([layer_from_spec(s) for s in arch], input_shape)
        net.init_params(seed)
        return net

    def init_params(self, seed):
        rng = np.random.default_rng(seed)
        for _, layer in self.param_layers():
            layer.init_params(rng)

    def spec(self):
        return [layer.spec() for layer in self.layers]

    def copy(self):
        return copy.deepcopy(self)

    def param_layers(self):
        return [(i, layer) for i, layer in enumerate(self.layers) if layer.has_params]

    @property
    def output_index(self):
        return self.param_layers()[-1][0]

    def parameters(self):
        out = {}
        for i, layer in self.param_layers():
            out[f"{i}.weight"] = layer.weight
            out[f"{i}.bias"] = layer.bias
        return out

    def masks(self):
        return {f"{i}.weight": layer.mask for i, layer in self.param_layers()}

    def set_parameters(self, params):
        for i, layer in self.param_layers():
            for name in ("weight", "bias"):
                new = np.asarray(params[f"{i}.{name}"], dtype=np.float64)
                if new.shape != getattr(layer, name).shape:
                    raise ShapeError(f"layer {i}: {name} shape {new.shape} != {getattr(layer, name).shape}")
                setattr(layer, name, new.copy())

    def set_masks(self, masks):
        for i, layer in self.param_layers():
            m = np.asarray(masks[f"{i}.weight"], dtype=np.float64)
            if m.shape != layer.weight.shape:
                raise ShapeError(f"layer {i}: mask shape {m.shape} != {layer.weight.shape}")
            layer.mask = m.copy()

    def apply_masks(self):
        """Zero stored weights under the mask so ``weight`` alone reflects the pruned net."""
        for _, layer in self.param_layers():
            layer.weight = layer.weight * layer.mask

    def total_params(self):
        return sum(l.weight.size + l.bias.size for _, l in self.param_layers())

    def nonzero_params(self):
        return sum(int(l.mask.sum()) + l.bias.size for _, l in self.param_layers())

    def prunable_count(self):
        return sum(l.weight.size for _, l in self.param_layers())

    def digest(self):
        h = hashlib.sha256()
        for name, arr in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        for name, arr in sorted(self.masks().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # graph builders -------------------------------------------------------

    def leaf_tensors(self, requires_grad=True):
        return {k: ag.Tensor(v, requires_grad) for k, v in self.parameters().items()}

    def _effective(self, i, layer, leaves):
        w = ag.mul(leaves[f"{i}.weight"], layer.mask)
        return w, leaves[f"{i}.bias"]

    def check_batch(self, x):
        shape = tuple(np.shape(x))
        if len(shape) != len(self.input_shape) + 1 or shape[1:] != self.input_shape or shape[0] < 1:
            raise ShapeError(
                f"layer 0 ({self.layers[0].kind}): batch shape {shape} does not match "
                f"[B] + {list(self.input_shape)}"
            )

    def run(self, x, leaves=None):
        if leaves is None:
            leaves = self.leaf_tensors(False)
        h = ag.as_tensor(x)
        for i, layer in enumerate(self.layers):
            if layer.has_params:
                h = layer.apply(h, *self._effective(i, layer, leaves))
            else:
                h = layer.apply(h)
        return h

    def run_bounds(self, lower, upper, leaves=None):
        if leaves is None:
            leaves = self.leaf_tensors(False)
        lo, hi = ag.as_tensor(lower), ag.as_tensor(upper)
        for i, layer in enumerate(self.layers):
            if layer.has_params:
                lo, hi = layer.apply_bounds(lo, hi, *self._effective(i, layer, leaves))
            else:
                lo, hi = layer.apply_bounds(lo, hi)
        return lo, hi


class GradientSet(dict):
    """Parameter-name -> gradient array, aligned with ``Network.parameters()``."""

    @classmethod
    def zeros_like(cls, net):
        return cls({k: np.zeros_like(v) for k, v in net.parameters().items()})

    def scaled(self, factor):
        return GradientSet({k: v * factor for k, v in self.items()})

    def flat(self, names=None):
        names = sorted(self) if names is None else names
        return np.concatenate([self[n].ravel() for n in names])


def _check_labels(net, labels, batch_size):
    labels = np.asarray(labels)
    if labels.shape != (batch_size,):
        raise ShapeError(f"labels shape {labels.shape} != ({batch_size},)")
    if labels.size and (labels.min() < 0 or labels.max() >= net.num_classes):
        raise ValueError(f"labels must lie in [0, {net.num_classes})")
    return labels.astype(np.int64)


def _check_nonempty(batch):
    if np.shape(batch)[0] == 0:
        raise ValueError("empty batch")


def forward(net, batch):
    net.check_batch(batch)
    return net.run(np.asarray(batch, dtype=np.float64)).data


def collect_grads(net, leaves):
    grads = GradientSet()
    masks = net.masks()
    for name, t in leaves.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if name in masks:
            # exact zeros, even where upstream produced -0.0
            g = np.where(masks[name] == 0, 0.0, g)
        grads[name] = g
    return grads


def loss_and_grad(net, batch, labels):
    _check_nonempty(batch)
    net.check_batch(batch)
    labels = _check_labels(net, labels, len(batch))
    leaves = net.leaf_tensors(True)
    loss = ag.cross_entropy(net.run(np.asarray(batch, dtype=np.float64), leaves), labels)
    loss.backward()
    return float(loss.data), collect_grads(net, leaves)


def input_grad(net, batch, labels):
    _check_nonempty(batch)
    net.check_batch(batch)
    labels = _check_labels(net, labels, len(batch))
    x = ag.Tensor(np.asarray(batch, dtype=np.float64), True)
    loss = ag.cross_entropy(net.run(x), labels)
    loss.backward()
    return x.grad if x.grad is not None else np.zeros_like(x.data)


def build_network(widths, input_shape, num_classes, seed=0):
    """Convenience MLP builder: flatten then dense/relu per hidden width."""
    from .layers import Flatten, ReLU

    layers = [Flatten()]
    for w in widths:
        layers += [Dense(w), ReLU()]
    layers.append(Dense(num_classes))
    net = Network(layers, input_shape, num_classes)
    net.init_params(seed)
    return net
