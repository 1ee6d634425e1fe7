"""Shared fixtures-as-functions: random small nets, a finite-difference oracle, desk recipes."""
from __future__ import annotations

import functools

import numpy as np

from prunelab.attack import AttackConfig
from prunelab.data import synth_blobs
from prunelab.engine import Dense, Network, ReLU, autograd as ag, layer_from_spec
from prunelab.train import Adversarial, MixTrainConfig, Natural, TrainConfig, VerifiedRobust, train

# one "PASS/FAIL criterion N: ..." line per acceptance criterion, printed in the summary
ACCEPTANCE = []

# relative error floor: below this magnitude both gradients are treated as zero
FD_FLOOR = 1e-6
FD_H = 1e-5

SMALL_ARCHS = [
    ((1, 2, 2), [{"kind": "flatten"}, {"kind": "dense", "out": 5}, {"kind": "relu"}, {"kind": "dense", "out": 3}]),
    ((1, 4, 4), [{"kind": "conv2d", "out": 2, "kernel": 2}, {"kind": "relu"}, {"kind": "avgpool", "kernel": 2, "stride": 1},
                 {"kind": "flatten"}, {"kind": "dense", "out": 3}]),
    ((2, 3, 3), [{"kind": "conv2d", "out": 2, "kernel": 2, "stride": 2, "padding": 1}, {"kind": "relu"},
                 {"kind": "flatten"}, {"kind": "dense", "out": 3}]),
    ((1, 3, 3), [{"kind": "flatten"}, {"kind": "dense", "out": 4}, {"kind": "relu"}, {"kind": "dense", "out": 3},
                 {"kind": "relu"}, {"kind": "dense", "out": 2}]),
]


def random_small_net(seed, masked=False):
    rng = np.random.default_rng(seed)
    shape, arch = SMALL_ARCHS[seed % len(SMALL_ARCHS)]
    net = Network([layer_from_spec(s) for s in arch], shape)
    net.init_params(seed)
    for _, layer in net.param_layers():
        layer.bias = rng.normal(0, 0.3, size=layer.bias.shape)
        if masked:
            layer.mask = (rng.random(layer.weight.shape) > 0.3).astype(float)
    return net


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), FD_FLOOR)


def mean_ce(net, x, y):
    return float(ag.cross_entropy(net.run(x), y).data)


def fd_param_grads(net, x, y, loss=mean_ce, h=FD_H):
    out = {}
    for name, p in net.parameters().items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss(net, x, y)
            p[idx] = old - h
            down = loss(net, x, y)
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def fd_input_grad(net, x, y, h=FD_H):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = mean_ce(net, x, y)
        x[idx] = old - h
        down = mean_ce(net, x, y)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


# ---------------------------------------------------------------- desk recipes

C = lambda out, k, s=1: {"kind": "conv2d", "out": out, "kernel": k, "stride": s}
R = {"kind": "relu"}
F = {"kind": "flatten"}
D = lambda out: {"kind": "dense", "out": out}

DESK_CNN = [C(16, 4, 2), R, F, D(10)]
DESK_MLP = [F, D(64), R, D(10)]
INPUT = (1, 12, 12)

ADV_EPS = 0.1
ADV_TRAIN_ATTACK = AttackConfig(ADV_EPS, 0.025, 10, True)
ADV_EVAL_ATTACK = AttackConfig(ADV_EPS, 0.025, 10, False)
ADV_CFG = dict(epochs=10, batch_size=64, lr=0.05)

IBP_EPS = 0.05
IBP_EVAL_ATTACK = AttackConfig(IBP_EPS, IBP_EPS / 4, 10, False)
IBP_CFG = dict(epochs=30, batch_size=64, lr=0.02, eps_ramp=0.4, eps_warmup=0.1)
IBP_MIX = MixTrainConfig(10, 0.7, IBP_EPS)

FINETUNE_LR = 0.025


@functools.lru_cache(maxsize=None)
def blobs(seed=0):
    return synth_blobs(10, 100, 12, seed), synth_blobs(10, 30, 12, seed, split="test")


def adversarial(attack=ADV_TRAIN_ATTACK):
    return Adversarial(attack)


def verified(k=10):
    return VerifiedRobust(MixTrainConfig(k, IBP_MIX.alpha, IBP_MIX.epsilon))


def adv_cfg(seed):
    return TrainConfig(seed=seed, **ADV_CFG)


def ibp_cfg(seed):
    return TrainConfig(seed=seed, **IBP_CFG)


@functools.lru_cache(maxsize=None)
def _trained(kind, seed):
    tr, _ = blobs(0)
    if kind == "adversarial":
        net = Network.from_spec(DESK_CNN, INPUT, seed=seed)
        train(net, tr, adversarial(), adv_cfg(seed))
    elif kind == "natural":
        net = Network.from_spec(DESK_CNN, INPUT, seed=seed)
        train(net, tr, Natural(), adv_cfg(seed))
    elif kind == "verified":
        net = Network.from_spec(DESK_MLP, INPUT, seed=seed)
        train(net, tr, verified(), ibp_cfg(seed))
    elif kind == "natural_mlp":
        net = Network.from_spec(DESK_MLP, INPUT, seed=seed)
        train(net, tr, Natural(), ibp_cfg(seed))
    else:
        raise KeyError(kind)
    return net


def trained(kind, seed=0):
    """Cached pre-trained desk net; callers receive a private copy."""
    return _trained(kind, seed).copy()


# ---------------------------------------------------------------- selector oracles


def dense_chain(weights):
    """Chain of Dense layers (ReLU between) carrying the given weight matrices."""
    layers = []
    for k, w in enumerate(weights):
        layers.append(Dense(w.shape[0]))
        if k < len(weights) - 1:
            layers.append(ReLU())
    net = Network(layers, (weights[0].shape[1],))
    for (_, layer), w in zip(net.param_layers(), weights):
        layer.weight = np.array(w, dtype=float)
    return net


def brute_magnitude_masks(weights, ratio):
    """Independent global ranking: prune floor(ratio * N) smallest |w|, lower flat index first."""
    flat = [abs(float(v)) for w in weights for v in w.ravel()]
    n_prune = int(np.floor(ratio * len(flat) + 1e-9))
    order = sorted(range(len(flat)), key=lambda i: (flat[i], i))
    keep = np.ones(len(flat))
    keep[order[:n_prune]] = 0.0
    out, offset = [], 0
    for w in weights:
        out.append(keep[offset:offset + w.size].reshape(w.shape))
        offset += w.size
    return out


def brute_l1_masks(weights, ratio):
    """Per-layer l1 unit ranking on a dense chain; the last layer keeps its units."""
    masks = [np.ones_like(w) for w in weights]
    for li, w in enumerate(weights[:-1]):
        eff = w * masks[li]
        norms = [float(np.abs(eff[u]).sum()) for u in range(w.shape[0])]
        n_remove = int(np.floor(ratio * w.shape[0] + 1e-9))
        for u in sorted(range(w.shape[0]), key=lambda u: (norms[u], u))[:n_remove]:
            masks[li][u] = 0.0
            masks[li + 1][:, u] = 0.0
    return masks
