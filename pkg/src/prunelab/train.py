"""SGD and the three training objectives (natural, adversarial, IBP-mixed verified)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, pgd_attack
from .data import BatchIterator
from .engine import autograd as ag
from .engine.network import collect_grads
from .verify import input_box


@dataclass(frozen=True)
class MixTrainConfig:
    k: int = 10
    alpha: float = 0.7
    epsilon: float = 2 / 255

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass(frozen=True)
class Natural:
    tag = "natural"


@dataclass(frozen=True)
class Adversarial:
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(0.1, 0.025, 10, True))
    tag = "adversarial"


@dataclass(frozen=True)
class VerifiedRobust:
    mix: MixTrainConfig = field(default_factory=MixTrainConfig)
    tag = "verified"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    milestones: tuple = (0.5, 0.75, 0.9)
    decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    # robust-objective epsilon is 0 for the first ``eps_warmup`` of the epochs,
    # then ramps linearly to its full value over the next ``eps_ramp``
    eps_ramp: float = 0.25
    eps_warmup: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        ms = tuple(self.milestones)
        if any(not 0 < m <= 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing within (0, 1]")
        if not 0 <= self.eps_ramp <= 1 or not 0 <= self.eps_warmup <= 1:
            raise ValueError("eps_ramp and eps_warmup must lie in [0, 1]")

    def eps_scale(self, progress):
        """Multiplier on the robust epsilon after ``progress`` epochs (fractional)."""
        if self.epochs == 0:
            return 1.0
        t = progress / self.epochs - self.eps_warmup
        if self.eps_ramp == 0:
            return 1.0 if t >= 0 else 0.0
        return float(np.clip(t / self.eps_ramp, 0.0, 1.0))

    def lr_at(self, fraction):
        """Learning rate once ``fraction`` of the epochs have elapsed."""
        return self.lr * self.decay ** sum(fraction >= m for m in self.milestones)

    def epoch_lr(self, epoch):
        return self.lr_at(epoch / self.epochs) if self.epochs else self.lr


# lr 0.001 held constant; the rest follows the pre-training config
def finetune_config(base, epochs, lr=0.001):
    return TrainConfig(epochs=epochs, batch_size=base.batch_size, lr=lr, milestones=(),
                       momentum=base.momentum, weight_decay=base.weight_decay,
                       seed=base.seed, eps_ramp=0.0, eps_warmup=0.0)


@dataclass
class SGDState:
    velocity: dict = field(default_factory=dict)


def sgd_step(net, grads, state, lr, momentum=0.0, weight_decay=0.0):
    """velocity <- momentum*velocity + grad + wd*theta; theta <- theta - lr*velocity."""
    params = net.parameters()
    masks = net.masks()
    new = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        v = state.velocity.get(name)
        step = g + weight_decay * theta if weight_decay else g
        v = step if v is None or momentum == 0 else momentum * v + step
        updated = theta - lr * v
        if name in masks:
            v = v * masks[name]
            updated = updated * masks[name]
        state.velocity[name] = v
        new[name] = updated
    net.set_parameters(new)
    return net, state


def worst_case_logits(net, leaves, x, labels, epsilon):
    lo, hi = input_box(x, epsilon)
    lower, upper = net.run_bounds(lo, hi, leaves)
    onehot = np.zeros(lower.shape, dtype=bool)
    onehot[np.arange(len(labels)), labels] = True
    return ag.where(onehot, lower, upper)


def robust_loss_ibp(net, batch, labels, epsilon, leaves=None):
    """Cross-entropy of the IBP worst-case logits. Returns the loss Tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    if leaves is None:
        leaves = net.leaf_tensors(False)
    return ag.cross_entropy(worst_case_logits(net, leaves, batch, labels, epsilon), labels)


def objective_loss(net, leaves, x, y, objective, rng, eps_scale=1.0):
    """Build the loss Tensor for one batch. Returns (loss, logits used for accuracy, inputs fed)."""
    if isinstance(objective, Natural):
        logits = net.run(x, leaves)
        return ag.cross_entropy(logits, y), logits, x
    if isinstance(objective, Adversarial):
        attack = objective.attack
        if eps_scale < 1.0:
            attack = attack.with_epsilon(attack.epsilon * eps_scale)
        adv = pgd_attack(net, x, y, attack, rng)
        logits = net.run(adv, leaves)
        return ag.cross_entropy(logits, y), logits, adv
    if isinstance(objective, VerifiedRobust):
        mix = objective.mix
        logits = net.run(x, leaves)
        loss = ag.cross_entropy(logits, y)
        if mix.alpha > 0:
            k = min(mix.k, len(y))
            sel = np.sort(rng.choice(len(y), size=k, replace=False))
            verified = robust_loss_ibp(net, x[sel], y[sel], mix.epsilon * eps_scale, leaves)
            loss = ag.add(ag.mul(verified, mix.alpha), ag.mul(loss, 1.0 - mix.alpha))
        return loss, logits, x
    raise TypeError(f"unknown objective {objective!r}")


def objective_grad(net, images, labels, objective, rng=None):
    """Mean loss and masked GradientSet of ``objective`` on one batch."""
    rng = np.random.default_rng(0) if rng is None else rng
    leaves = net.leaf_tensors(True)
    loss, _, _ = objective_loss(net, leaves, np.asarray(images, dtype=np.float64),
                                np.asarray(labels, dtype=np.int64), objective, rng)
    loss.backward()
    return float(loss.data), collect_grads(net, leaves)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    train_acc: float


@dataclass
class TrainResult:
    net: object
    history: list
    state: SGDState


def _check_objective(objective, cfg):
    if isinstance(objective, VerifiedRobust) and objective.mix.k > cfg.batch_size:
        raise ValueError(f"MixTrain k={objective.mix.k} exceeds batch size {cfg.batch_size}")


def train(net, dataset, objective, cfg, state=None, on_batch=None):
    """Minimize ``objective`` over ``dataset`` in place.

    ``on_batch(clean, fed, labels)`` is called with the exact inputs each loss
    was computed on, for instrumentation.
    """
    _check_objective(objective, cfg)
    state = SGDState() if state is None else state
    history = []
    batches = BatchIterator(dataset, cfg.batch_size, cfg.seed)
    nb = len(batches)
    for epoch in range(cfg.epochs):
        lr = cfg.epoch_lr(epoch)
        total_loss, correct, seen = 0.0, 0, 0
        batches.epoch = epoch
        for b, (x, y) in enumerate(batches):
            rng = np.random.default_rng([cfg.seed, epoch, b])
            ramp = cfg.eps_scale(epoch + b / nb)
            leaves = net.leaf_tensors(True)
            loss, logits, fed = objective_loss(net, leaves, x, y, objective, rng, ramp)
            if on_batch is not None:
                on_batch(x, fed, y)
            loss.backward()
            sgd_step(net, collect_grads(net, leaves), state, lr, cfg.momentum, cfg.weight_decay)
            total_loss += float(loss.data) * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
        history.append(EpochRecord(epoch, lr, total_loss / seen, correct / seen))
    return TrainResult(net, history, state)
