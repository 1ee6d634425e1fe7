"""Pruning masks, the iterative prune/fine-tune pipeline and its baselines."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import evaluate, pruning_ratio
from .attack import AttackConfig
from .engine import Dense, Network, layer_from_spec
from .train import Natural, TrainConfig, finetune_config, train

UNSTRUCTURED = "unstructured"
STRUCTURED = "structured"


class LayerEmptiedError(ValueError):
    pass


@dataclass(frozen=True)
class PruneSchedule:
    target: float
    mode: str = UNSTRUCTURED
    steps: int = 40
    finetune_epochs: int = 5
    finetune_objective: object = field(default_factory=Natural)
    finetune_lr: float = 0.001
    # how cumulative targets advance: "linear" in ratio, or "geometric" in kept fraction
    increments: str = "linear"
    # unstructured ranking across the whole net ("global") or within each layer
    scope: str = "global"

    def __post_init__(self):
        if not 0 <= self.target < 1:
            raise ValueError("target ratio must lie in [0, 1)")
        if self.mode not in (UNSTRUCTURED, STRUCTURED):
            raise ValueError(f"mode must be {UNSTRUCTURED!r} or {STRUCTURED!r}")
        if self.steps < 1 or self.finetune_epochs < 0:
            raise ValueError("steps must be >= 1 and finetune_epochs >= 0")
        if self.increments not in ("linear", "geometric"):
            raise ValueError("increments must be 'linear' or 'geometric'")
        if self.scope not in ("global", "layerwise"):
            raise ValueError("scope must be 'global' or 'layerwise'")

    def cumulative_targets(self):
        j = np.arange(1, self.steps + 1) / self.steps
        if self.increments == "linear":
            out = self.target * j
        else:
            out = 1.0 - (1.0 - self.target) ** j
        out[-1] = self.target
        return [float(r) for r in out]


def _sorted_candidates(magnitudes, alive):
    """Indices of alive entries, smallest magnitude first, lower index first on ties."""
    idx = np.flatnonzero(alive)
    order = np.lexsort((idx, magnitudes[idx]))
    return idx[order]


def magnitude_prune(net, cumulative_ratio, scope="global"):
    """Zero the smallest-|w| surviving weights until ``cumulative_ratio`` of all weights are pruned."""
    current = pruning_ratio(net)
    if cumulative_ratio < current - 1e-12:
        raise ValueError(f"ratio {cumulative_ratio} is below the current pruning ratio {current:.6f}")
    layers = net.param_layers()
    if scope == "global":
        groups = [layers]
    elif scope == "layerwise":
        groups = [[item] for item in layers]
    else:
        raise ValueError("scope must be 'global' or 'layerwise'")
    new_masks = {f"{i}.weight": layer.mask.copy() for i, layer in layers}
    for group in groups:
        sizes = [layer.weight.size for _, layer in group]
        mags = np.concatenate([np.abs(layer.weight * layer.mask).ravel() for _, layer in group])
        alive = np.concatenate([layer.mask.ravel() != 0 for _, layer in group])
        extra = math.floor(cumulative_ratio * alive.size + 1e-9) - int((~alive).sum())
        if extra <= 0:
            continue
        alive[_sorted_candidates(mags, alive)[:extra]] = False
        offset = 0
        for (i, layer), n in zip(group, sizes):
            new_masks[f"{i}.weight"] = alive[offset:offset + n].reshape(layer.weight.shape).astype(np.float64)
            offset += n
    for name, m in new_masks.items():
        if not m.any():
            raise LayerEmptiedError(f"layer emptied: every weight of layer {name.split('.')[0]} would be pruned")
    net.set_masks(new_masks)
    net.apply_masks()
    return net.masks()


def _next_param_layer(net, i):
    for j in range(i + 1, len(net.layers)):
        if net.layers[j].has_params:
            return j
    return None


def _channel_map_shape(net, i, j):
    """Spatial shape seen by layer ``j`` for the units produced by layer ``i``."""
    for k in range(i + 1, j + 1):
        s = net.layer_input_shapes[k]
        if len(s) == 1:
            return net.layer_input_shapes[k - 1] if k - 1 > i else None
    return None


def removed_units(layer):
    flat = layer.mask.reshape(layer.mask.shape[0], -1)
    return ~flat.any(axis=1)


def l1_filter_prune(net, cumulative_ratio):
    """Per layer, remove the lowest-l1 filters/neurons until ``cumulative_ratio`` of units are gone.

    The output layer keeps all of its units.  Inputs of the following layer
    that read a removed unit are masked too, so parameter counts reflect the
    physically smaller network.
    """
    if not 0 <= cumulative_ratio < 1:
        raise ValueError("cumulative_ratio must lie in [0, 1)")
    out_idx = net.output_index
    for i, layer in net.param_layers():
        if i == out_idx:
            continue
        n = layer.mask.shape[0]
        target = math.floor(cumulative_ratio * n + 1e-9)
        if target >= n:
            raise LayerEmptiedError(f"layer emptied: all {n} units of layer {i} would be removed")
        gone = removed_units(layer)
        extra = target - int(gone.sum())
        if extra > 0:
            norms = np.abs(layer.weight * layer.mask).reshape(n, -1).sum(axis=1)
            for u in _sorted_candidates(norms, ~gone)[:extra]:
                layer.mask[u] = 0.0
            gone = removed_units(layer)
        j = _next_param_layer(net, i)
        if j is not None:
            nxt = net.layers[j]
            spatial = _channel_map_shape(net, i, j)
            for u in np.flatnonzero(gone):
                if isinstance(nxt, Dense) and spatial is not None:
                    block = spatial[1] * spatial[2]
                    nxt.mask[:, u * block:(u + 1) * block] = 0.0
                else:
                    nxt.mask[:, u] = 0.0
    net.apply_masks()
    return net.masks()


def apply_selector(net, mode, ratio, scope="global"):
    if mode == UNSTRUCTURED:
        return magnitude_prune(net, ratio, scope)
    if mode == STRUCTURED:
        return l1_filter_prune(net, ratio)
    raise ValueError(f"unknown pruning mode {mode!r}")


def objective_tags(*objectives):
    return "+".join(o.tag for o in objectives)


@dataclass
class EvalSpec:
    """Where and how each checkpoint is scored."""

    dataset: object
    attack: AttackConfig = field(default_factory=AttackConfig)
    verify_epsilon: float = 2 / 255

    def __call__(self, net, step=0, objectives=""):
        return evaluate(net, self.dataset, self.attack, self.verify_epsilon, step, objectives)


def prune_finetune(net, dataset, sched, base_cfg=None, eval_spec=None, on_step=None, state=None):
    """Alternate pruning and fine-tuning until the schedule's target ratio is reached.

    Mutates and returns ``net`` together with one EvalReport per step (empty
    when ``eval_spec`` is None).  ``on_step(j, net)`` runs after each step.
    Momentum carries across steps in ``state`` (fresh when None), which is
    updated in place.
    """
    base_cfg = TrainConfig() if base_cfg is None else base_cfg
    ft_cfg = finetune_config(base_cfg, sched.finetune_epochs, sched.finetune_lr)
    tags = objective_tags(sched.finetune_objective)
    reports = []
    for j, ratio in enumerate(sched.cumulative_targets(), start=1):
        apply_selector(net, sched.mode, ratio, sched.scope)
        if sched.finetune_epochs > 0:
            step_cfg = dataclasses.replace(ft_cfg, seed=base_cfg.seed * 1000 + j)
            state = train(net, dataset, sched.finetune_objective, step_cfg, state).state
        if eval_spec is not None:
            reports.append(eval_spec(net, j, tags))
        if on_step is not None:
            on_step(j, net)
    return net, reports


def prune_no_finetune(net, ratios, eval_spec, mode=UNSTRUCTURED, scope="global"):
    """One-shot prune independent copies of ``net`` to each ratio and evaluate without training."""
    ratios = list(ratios)
    if any(b < a for a, b in zip(ratios, ratios[1:])):
        raise ValueError("ratios must be ascending")
    reports = []
    for k, r in enumerate(ratios):
        pruned = net.copy()
        apply_selector(pruned, mode, r, scope)
        reports.append(eval_spec(pruned, k, "none"))
    return reports


def scratch_compact(arch, input_shape, keep_fraction, seed=0):
    """Freshly initialized net keeping a random ``floor(units * keep_fraction)`` units per hidden layer."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    param_positions = [k for k, s in enumerate(arch) if s["kind"] in ("dense", "conv2d")]
    last = param_positions[-1]
    compact, kept = [], {}
    for k, s in enumerate(arch):
        s = dict(s)
        if k in param_positions and k != last:
            units = s["out"]
            n = math.floor(units * keep_fraction + 1e-9)
            if n < 1:
                raise LayerEmptiedError(f"layer emptied: keep_fraction {keep_fraction} leaves no units in layer {k}")
            kept[k] = np.sort(rng.choice(units, size=n, replace=False))
            s["out"] = n
        compact.append(s)
    net = Network([layer_from_spec(s) for s in compact], input_shape)
    net.init_params(seed)
    net.kept_units = kept
    return net
