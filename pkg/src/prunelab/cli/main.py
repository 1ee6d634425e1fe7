"""Command-line experiment driver.

Every subcommand writes its outputs plus a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 config error, 3 architecture/shape error,
4 missing or unreadable artifact.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

from .. import __version__
from ..analysis import Curve, gradient_conflict, write_curves_csv, write_reports_csv
from ..attack import robust_mask
from ..data import IdxError, load_idx, synth_blobs
from ..engine import Network, ShapeError, layer_from_spec
from ..prune import EvalSpec, LayerEmptiedError, prune_finetune, prune_no_finetune, scratch_compact
from ..train import SGDState, train
from ..verify import verified_mask
from . import checkpoint
from .config import LITERAL_MOMENTUM, ConfigError, ExperimentConfig, parse_text

EXIT_OK, EXIT_CONFIG, EXIT_SHAPE, EXIT_MISSING = 0, 2, 3, 4
MANIFEST_VERSION = 1
PRESETS = ("reference", "desk-adversarial", "desk-verified")


class MissingArtifact(Exception):
    pass


class ArchitectureMismatch(Exception):
    pass


class RunLocked(Exception):
    pass


# ---------------------------------------------------------------- plumbing


def preset_text(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("prunelab.presets").joinpath(f"{name}.cfg").read_text()


def resolve_config(args):
    raw = {}
    if args.preset:
        raw.update(parse_text(preset_text(args.preset), f"preset:{args.preset}"))
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        raw.update(parse_text(path.read_text(), str(path)))
    for item in args.set or []:
        raw.update(parse_text(item, "--set"))
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    if args.paper_momentum:
        raw["pretrain.momentum"] = repr(LITERAL_MOMENTUM)
    return ExperimentConfig.from_raw(raw)


def load_data(cfg):
    v = cfg.values
    if v["data.source"] == "synth":
        common = dict(jitter=v["data.jitter"], texture=v["data.texture"], noise=v["data.noise"])
        n, side, seed = v["data.num_classes"], v["data.image_side"], v["data.seed"]
        tr = synth_blobs(n, v["data.samples_per_class"], side, seed, split="train", **common)
        te = synth_blobs(n, v["data.test_per_class"], side, seed, split="test", **common)
        return tr, te
    limit = v["data.limit"] or None
    for key in ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels"):
        if v[key] and not Path(v[key]).is_file():
            raise MissingArtifact(f"{key}: {v[key]} not found")
    tr = load_idx(v["data.train_images"], v["data.train_labels"], v["data.num_classes"], "train", limit)
    if v["data.test_images"]:
        te = load_idx(v["data.test_images"], v["data.test_labels"], v["data.num_classes"], "test", limit)
    else:
        te = tr
    return tr, te


def fresh_network(cfg, dataset):
    net = Network.from_spec(cfg.arch(), dataset.input_shape, seed=cfg["seed"])
    if net.num_classes != dataset.num_classes:
        raise ShapeError(f"architecture emits {net.num_classes} logits but the data has "
                         f"{dataset.num_classes} classes")
    return net


def load_checkpoint(args, cfg, dataset):
    if not args.checkpoint:
        raise MissingArtifact("this command needs --checkpoint PATH")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise MissingArtifact(f"checkpoint {path} not found")
    try:
        ck = checkpoint.load(path)
    except checkpoint.CheckpointError as e:
        raise MissingArtifact(f"checkpoint {path} is unreadable: {e}") from None
    expected = [layer_from_spec(s).spec() for s in cfg.arch()]
    if ck.net.spec() != expected:
        raise ArchitectureMismatch(f"checkpoint {path} architecture {ck.net.spec()} does not match config {expected}")
    if tuple(ck.net.input_shape) != tuple(dataset.input_shape):
        raise ArchitectureMismatch(f"checkpoint input shape {ck.net.input_shape} != data shape {dataset.input_shape}")
    return ck


class RunDir:
    """Output directory guarded by an exclusive lock file; writes the manifest on success."""

    def __init__(self, out, command, cfg, argv):
        self.path = Path(out)
        self.command = command
        self.cfg = cfg
        self.argv = argv
        self.outputs = []
        self.extra = {}

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        self.lock = self.path / ".lock"
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(f"{self.path} is in use by another run (remove {self.lock} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self.started = time.perf_counter()
        return self

    def file(self, name):
        self.outputs.append(name)
        return self.path / name

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self._write_manifest(time.perf_counter() - self.started)
        finally:
            self.lock.unlink(missing_ok=True)
        return False

    def _write_manifest(self, wall):
        manifest = {
            "format_version": MANIFEST_VERSION,
            "checkpoint_format_version": checkpoint.FORMAT_VERSION,
            "prunelab_version": __version__,
            "command": self.command,
            "argv": self.argv,
            "seed": self.cfg["seed"],
            "config": self.cfg.raw(),
            "config_hash": self.cfg.digest(),
            "wall_time_s": round(wall, 3),
            "outputs": self.outputs,
            **self.extra,
        }
        with open(self.path / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")


def write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def write_history(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss", "train_acc"])
        for r in history:
            w.writerow([r.epoch, f"{r.lr:.6g}", f"{r.loss:.6f}", f"{r.train_acc:.6f}"])


def metric_curves(reports):
    # a schedule may revisit a ratio (e.g. target 0); the latest report wins
    latest = {r.pruning_ratio: r for r in reports}
    ordered = [latest[k] for k in sorted(latest)]
    return [Curve.from_reports(ordered, m) for m in ("benign_acc", "era", "vra")]


def eval_spec(cfg, test):
    return EvalSpec(test, cfg.eval_attack(), cfg["eval.epsilon"])


# ---------------------------------------------------------------- commands


def cmd_pretrain(cfg, args, run):
    tr, te = load_data(cfg)
    net = fresh_network(cfg, tr)
    objective = cfg.objective(cfg["pretrain.objective"])
    result = train(net, tr, objective, cfg.pretrain_config())
    ck = checkpoint.Checkpoint(net, result.state, result.history, cfg.digest())
    checkpoint.save(run.file("model.ckpt"), ck)
    write_history(run.file("history.csv"), result.history)
    last = result.history[-1] if result.history else None
    print(f"pretrained {objective.tag} for {len(result.history)} epochs"
          + (f"; final loss {last.loss:.4f}, train acc {last.train_acc:.4f}" if last else ""))


def cmd_prune(cfg, args, run):
    tr, te = load_data(cfg)
    ck = load_checkpoint(args, cfg, tr)
    sched = cfg.schedule()
    run.extra["schedule"] = {"steps": sched.steps, "finetune_epochs": sched.finetune_epochs,
                             "target": sched.target, "mode": sched.mode,
                             "finetune_objective": sched.finetune_objective.tag,
                             "finetune_lr": sched.finetune_lr}
    state = SGDState()
    net, reports = prune_finetune(ck.net, tr, sched, cfg.pretrain_config(), eval_spec(cfg, te), state=state)
    checkpoint.save(run.file("pruned.ckpt"), checkpoint.Checkpoint(net, state, ck.history, cfg.digest()))
    write_reports_csv(run.file("steps.csv"), reports)
    write_curves_csv(run.file("curves.csv"), metric_curves(reports))
    r = reports[-1]
    print(f"pruned to {r.pruning_ratio:.4f} in {sched.steps} steps: "
          f"acc {r.benign_acc:.4f}, era {r.era:.4f}, vra {r.vra:.4f}")


def cmd_eval(cfg, args, run):
    tr, te = load_data(cfg)
    ck = load_checkpoint(args, cfg, tr)
    report = eval_spec(cfg, te)(ck.net)
    write_reports_csv(run.file("eval.csv"), [report])
    print(json.dumps(report.as_row(), sort_keys=True))


def cmd_attack(cfg, args, run):
    tr, te = load_data(cfg)
    ck = load_checkpoint(args, cfg, tr)
    attack = cfg.eval_attack()
    val = float(robust_mask(ck.net, te.images, te.labels, attack, cfg["eval.seed"]).mean())
    payload = {"era": val, "epsilon": attack.epsilon, "step_size": attack.step_size,
               "iterations": attack.iterations, "samples": len(te)}
    write_json(run.file("attack.json"), payload)
    print(f"era {val:.6f} at epsilon {attack.epsilon}")


def cmd_verify(cfg, args, run):
    tr, te = load_data(cfg)
    ck = load_checkpoint(args, cfg, tr)
    eps = cfg["eval.epsilon"]
    val = float(verified_mask(ck.net, te.images, te.labels, eps).mean())
    write_json(run.file("verify.json"), {"vra": val, "epsilon": eps, "samples": len(te)})
    print(f"vra {val:.6f} at epsilon {eps}")


def cmd_conflict(cfg, args, run):
    tr, te = load_data(cfg)
    ck = load_checkpoint(args, cfg, tr)
    a, b = cfg.objective(cfg["conflict.a"]), cfg.objective(cfg["conflict.b"])
    frac = gradient_conflict(ck.net, tr, a, b, cfg["conflict.batch_size"], cfg["seed"])
    write_json(run.file("conflict.json"), {"a": a.tag, "b": b.tag, "conflict_fraction": frac})
    print(frac)


def cmd_stability(cfg, args, run):
    tr, te = load_data(cfg)
    ck = load_checkpoint(args, cfg, tr)
    reports = prune_no_finetune(ck.net, cfg["stability.grid"], eval_spec(cfg, te),
                                cfg["prune.mode"], cfg["prune.scope"])
    write_reports_csv(run.file("stability.csv"), reports)
    write_curves_csv(run.file("curves.csv"), metric_curves(reports))
    for r in reports:
        print(f"ratio {r.pruning_ratio:.4f}: acc {r.benign_acc:.4f}, era {r.era:.4f}, vra {r.vra:.4f}")


SCRATCH_COLUMNS = ["reduction", "acc_scratch", "acc_fine_tuned", "era_scratch", "era_fine_tuned"]


def cmd_scratch(cfg, args, run):
    tr, te = load_data(cfg)
    ck = load_checkpoint(args, cfg, tr)
    es = eval_spec(cfg, te)
    tuned = es(ck.net, objectives="fine-tuned")
    compact = scratch_compact(cfg.arch(), tr.input_shape, cfg.keep_fraction(), cfg["seed"])
    base = cfg.pretrain_config()
    scfg = dataclasses.replace(base, epochs=cfg.scratch_epochs())
    result = train(compact, tr, cfg.objective(cfg["pretrain.objective"]), scfg)
    checkpoint.save(run.file("scratch.ckpt"), checkpoint.Checkpoint(compact, result.state, result.history, cfg.digest()))
    scratch = es(compact, objectives="scratch")
    row = {
        "reduction": f"{1 - cfg.keep_fraction():.6f}",
        "acc_scratch": f"{scratch.benign_acc:.6f}", "acc_fine_tuned": f"{tuned.benign_acc:.6f}",
        "era_scratch": f"{scratch.era:.6f}", "era_fine_tuned": f"{tuned.era:.6f}",
    }
    with open(run.file("scratch.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SCRATCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerow(row)
    write_reports_csv(run.file("scratch_reports.csv"), [scratch, tuned])
    print("            accuracy              era")
    print("        scratch  fine-tuned   scratch  fine-tuned")
    print(f"        {scratch.benign_acc:7.4f}  {tuned.benign_acc:10.4f}   {scratch.era:7.4f}  {tuned.era:10.4f}")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "verify": cmd_verify,
    "conflict": cmd_conflict,
    "stability": cmd_stability,
    "scratch": cmd_scratch,
}


def build_parser():
    p = argparse.ArgumentParser(prog="prunelab", description="Prune, fine-tune and evaluate robust networks.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--preset", help=f"built-in preset ({', '.join(PRESETS)}), applied before --config")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        s.add_argument("--checkpoint", help="input checkpoint")
        s.add_argument("--out", default=None, help="run directory (default runs/<command>)")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--paper-momentum", action="store_true",
                       help=f"use the literal reference momentum {LITERAL_MOMENTUM}")
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = args.out or os.path.join("runs", args.command)
        with RunDir(out, args.command, cfg, argv) as run:
            COMMANDS[args.command](cfg, args, run)
    except (ConfigError, RunLocked, IdxError, LayerEmptiedError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShapeError, ArchitectureMismatch) as e:
        print(f"architecture error: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except MissingArtifact as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
