"""JSON checkpoints.

Parameters are stored as base64 of little-endian float64 bytes, so a
save/load round trip is bit-exact.
"""
import base64
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .arch import NestedNetwork, StagePlan
from .errors import CheckpointError

FORMAT = "anytimenet-checkpoint"
VERSION = 1


def encode_array(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"dtype": "<f8", "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d):
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d["dtype"]).reshape(d["shape"]).astype(np.float64)


def atomic_write_text(path, text):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


@dataclass
class Checkpoint:
    net: NestedNetwork
    rng_state: dict = None
    optimizer_state: dict = None
    extra: dict = None


def save_checkpoint(path, net, rng_state=None, optimizer_state=None, extra=None):
    blob = {
        "format": FORMAT,
        "version": VERSION,
        "plan": net.plan.to_dict(),
        "params": encode_array(net.params),
        "rng_state": rng_state,
        "optimizer_state": optimizer_state,
        "extra": extra or {},
    }
    atomic_write_text(path, dump_json(blob))


def load_checkpoint(path):
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from None
    if blob.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {blob.get('format')!r}")
    if blob.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {blob.get('version')}")
    plan = StagePlan.from_dict(blob["plan"])
    net = NestedNetwork(plan, params=decode_array(blob["params"]))
    return Checkpoint(net, blob.get("rng_state"), blob.get("optimizer_state"), blob.get("extra") or {})
