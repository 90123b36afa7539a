"""Single-file checkpoints.

Layout::

    b"FLOWERCK"                      8-byte magic
    uint64 LE                        header length in bytes
    header                           UTF-8 JSON: version, shape manifest,
                                     configs, epoch, RNG states, payload sha256
    payload                          little-endian float64 tensors, manifest order

The payload digest is verified before any tensor is materialised, so a
damaged file never yields a partially restored state.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .trainer import ModelConfig, ModelState, init_state

MAGIC = b"FLOWERCK"
VERSION = 1


def _tensors(state: ModelState) -> list[tuple[str, torch.Tensor]]:
    out = [(name, p) for name, p in state.named_theta()]
    out += [(name, p) for name, p in state.named_phi()]
    for tag, slots, named in (("theta", state.theta_slots, state.named_theta()), ("phi", state.phi_slots, state.named_phi())):
        for (name, _), m, v in zip(named, slots.m, slots.v):
            out.append((f"adam.{tag}.m.{name}", m))
            out.append((f"adam.{tag}.v.{name}", v))
    return out


def save_checkpoint(state: ModelState, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    manifest = []
    chunks = []
    offset = 0
    for name, t in _tensors(state):
        arr = t.detach().numpy().astype("<f8", copy=False)
        blob = np.ascontiguousarray(arr).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = {
        "version": VERSION,
        "epoch": state.epoch,
        "frames": state.frames,
        "feat_dim": state.feat_dim,
        "num_classes": state.num_classes,
        "loss_kind": state.loss_kind,
        "model_config": asdict(state.model_config),
        "adam_steps": {"theta": state.theta_slots.step, "phi": state.phi_slots.step},
        "rng": {name: g.bit_generator.state for name, g in state.rngs.items()},
        "manifest": manifest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)


def read_header(path: str | Path) -> tuple[dict, bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    payload = raw[16 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("checkpoint payload digest mismatch (file is corrupt)")
    return header, payload


def load_checkpoint(path: str | Path) -> ModelState:
    header, payload = read_header(path)
    try:
        model_config = ModelConfig(**header["model_config"])
        # build the skeleton, then overwrite every tensor from the payload
        state = init_state(model_config, 0, header["frames"], header["feat_dim"], header["num_classes"], header["loss_kind"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint header is inconsistent: {exc}") from exc
    targets = dict(_tensors(state))
    entries = header["manifest"]
    if [e["name"] for e in entries] != list(targets):
        raise CheckpointError("checkpoint tensor manifest does not match the model layout")
    staged = []
    for e in entries:
        t = targets[e["name"]]
        if tuple(e["shape"]) != tuple(t.shape):
            raise CheckpointError(f"shape mismatch for {e['name']}: {e['shape']} vs {list(t.shape)}")
        blob = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(blob) != t.numel() * 8:
            raise CheckpointError(f"payload size mismatch for {e['name']}")
        staged.append((t, np.frombuffer(blob, dtype="<f8").reshape(t.shape)))
    with torch.no_grad():
        for t, arr in staged:
            t.copy_(torch.from_numpy(arr.copy()))
    state.epoch = header["epoch"]
    state.theta_slots.step = header["adam_steps"]["theta"]
    state.phi_slots.step = header["adam_steps"]["phi"]
    for name, st in header["rng"].items():
        g = np.random.Generator(np.random.PCG64())
        g.bit_generator.state = st
        state.rngs[name] = g
    return state
