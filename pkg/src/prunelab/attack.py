"""Signed PGD under an l-inf budget, and empirical robust accuracy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import forward, input_grad
from .parallel import map_chunks

EVAL_CHUNK = 256


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    step_size: float = 0.025
    iterations: int = 10
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not 0 <= self.step_size <= self.epsilon:
            raise ValueError("step_size must satisfy 0 <= step_size <= epsilon")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def with_epsilon(self, epsilon):
        """Same attack shape at a new budget; the step keeps its ratio to epsilon."""
        ratio = self.step_size / self.epsilon if self.epsilon > 0 else 0.25
        return AttackConfig(epsilon, ratio * epsilon, self.iterations, self.random_start)


# 8/255, 2/255, 10 steps on the 0-255 scale, stored normalized
REFERENCE_ATTACK = AttackConfig(8 / 255, 2 / 255, 10, True)
DESK_ATTACK = AttackConfig(0.1, 0.025, 10, False)


def pgd_attack(net, batch, labels, cfg, rng=None):
    """Untargeted signed PGD maximizing cross-entropy of the true label."""
    x0 = np.asarray(batch, dtype=np.float64)
    if cfg.epsilon == 0 or (cfg.iterations == 0 and not cfg.random_start):
        return x0.copy()
    lo = np.clip(x0 - cfg.epsilon, 0.0, 1.0)
    hi = np.clip(x0 + cfg.epsilon, 0.0, 1.0)
    if cfg.random_start:
        rng = np.random.default_rng() if rng is None else rng
        x = rng.uniform(lo, hi)
    else:
        x = x0.copy()
    for _ in range(cfg.iterations):
        g = input_grad(net, x, labels)
        x = np.clip(x + cfg.step_size * np.sign(g), lo, hi)
    return x


def predict(net, images, chunk=EVAL_CHUNK):
    return map_chunks(lambda s: forward(net, images[s]).argmax(axis=1), len(images), chunk)


def robust_mask(net, images, labels, cfg, seed=0):
    """Per-sample flag: correct on the clean input and on its PGD counterpart."""

    def run(s):
        x, y = images[s], labels[s]
        clean_ok = forward(net, x).argmax(axis=1) == y
        rng = np.random.default_rng([seed, s.start])
        adv = pgd_attack(net, x, y, cfg, rng)
        return clean_ok & (forward(net, adv).argmax(axis=1) == y)

    return map_chunks(run, len(images), EVAL_CHUNK).astype(bool)


def era(net, dataset, cfg, seed=0):
    return float(robust_mask(net, dataset.images, dataset.labels, cfg, seed).mean())
