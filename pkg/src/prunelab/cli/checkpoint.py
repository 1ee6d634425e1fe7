"""Self-describing checkpoint container.

Layout::

    PRUNELAB-CHECKPOINT\\n
    <one line of JSON: version, arch, input_shape, toc, history, config_hash>\\n
    <little-endian float64 arrays, back to back, in toc order>

The JSON line is written with sorted keys and no optional whitespace, so the
same network, optimizer state and history always serialize to the same bytes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..engine import Network, ShapeError, layer_from_spec
from ..train import EpochRecord, SGDState

MAGIC = b"PRUNELAB-CHECKPOINT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    net: Network
    state: SGDState = field(default_factory=SGDState)
    history: list = field(default_factory=list)
    config_hash: str = ""


def _arrays(ck):
    out = []
    for name, arr in ck.net.parameters().items():
        out.append(("param", name, arr))
    for name, arr in ck.net.masks().items():
        out.append(("mask", name, arr))
    for name in sorted(ck.state.velocity):
        out.append(("velocity", name, ck.state.velocity[name]))
    return out


def dumps(ck):
    toc, blobs, offset = [], [], 0
    for group, name, arr in _arrays(ck):
        a = np.ascontiguousarray(arr, dtype="<f8")
        toc.append({"group": group, "name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        blobs.append(a.tobytes())
        offset += a.size
    header = {
        "version": FORMAT_VERSION,
        "arch": ck.net.spec(),
        "input_shape": list(ck.net.input_shape),
        "toc": toc,
        "history": [dict(epoch=r.epoch, lr=r.lr, loss=r.loss, train_acc=r.train_acc) for r in ck.history],
        "config_hash": ck.config_hash,
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return MAGIC + line.encode() + b"\n" + b"".join(blobs)


def loads(buf):
    if not buf.startswith(MAGIC):
        raise CheckpointError("not a checkpoint: bad magic line")
    end = buf.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError("checkpoint header is truncated")
    header = json.loads(buf[len(MAGIC):end])
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    body = buf[end + 1:]
    total = sum(e["count"] for e in header["toc"])
    if len(body) != 8 * total:
        raise CheckpointError(f"checkpoint body holds {len(body)} bytes, expected {8 * total}")
    data = np.frombuffer(body, dtype="<f8")
    net = Network([layer_from_spec(s) for s in header["arch"]], header["input_shape"])
    groups = {"param": {}, "mask": {}, "velocity": {}}
    for e in header["toc"]:
        arr = data[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
        groups[e["group"]][e["name"]] = arr
    try:
        net.set_parameters(groups["param"])
        net.set_masks(groups["mask"])
    except (KeyError, ShapeError) as e:
        raise CheckpointError(f"checkpoint arrays do not match its architecture: {e}") from None
    history = [EpochRecord(**r) for r in header["history"]]
    return Checkpoint(net, SGDState(groups["velocity"]), history, header["config_hash"])


def save(path, ck):
    with open(path, "wb") as f:
        f.write(dumps(ck))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
