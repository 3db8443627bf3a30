"""Parameter store serialisation.

File layout::

    8 bytes   magic b"LGVCKPT1"
    8 bytes   little-endian uint64, length of the JSON header in bytes
    header    UTF-8 JSON: tensor table (name, shape, offset) and metadata
    payload   little-endian float32 values in header order

Optimiser moments and RNG states are stored as well, so training resumed
from a checkpoint follows the same trajectory as an uninterrupted run.
"""
from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"LGVCKPT1"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[len("model.") :]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith("model.")}


def _collect(model: torch.nn.Module, optimizer: torch.optim.Optimizer | None) -> tuple[dict, dict]:
    tensors = {f"model.{k}": v.detach().cpu() for k, v in model.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        steps = {}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                tensors[f"optim.exp_avg.{n}"] = st["exp_avg"].detach().cpu()
                tensors[f"optim.exp_avg_sq.{n}"] = st["exp_avg_sq"].detach().cpu()
                steps[n] = float(st["step"])
        g = optimizer.param_groups[0]
        opt_meta = {
            "steps": steps,
            "lr": g["lr"],
            "betas": list(g["betas"]),
            "eps": g["eps"],
            "weight_decay": g["weight_decay"],
        }
    return tensors, opt_meta


def rng_state(np_rng: np.random.Generator | None, torch_gen: torch.Generator | None) -> dict:
    out = {}
    if np_rng is not None:
        out["numpy"] = np_rng.bit_generator.state
    if torch_gen is not None:
        out["torch"] = base64.b64encode(torch_gen.get_state().numpy().tobytes()).decode("ascii")
    return out


def restore_rng(state: dict, np_rng: np.random.Generator | None, torch_gen: torch.Generator | None) -> None:
    if np_rng is not None and "numpy" in state:
        np_rng.bit_generator.state = state["numpy"]
    if torch_gen is not None and "torch" in state:
        raw = np.frombuffer(base64.b64decode(state["torch"]), dtype=np.uint8).copy()
        torch_gen.set_state(torch.from_numpy(raw))


def save_checkpoint(path, model, optimizer=None, meta: dict | None = None) -> Path:
    path = Path(path)
    tensors, opt_meta = _collect(model, optimizer)
    table, offset, chunks = [], 0, []
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.numpy(), dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    header = {
        "version": VERSION,
        "tensors": table,
        "n_values": offset,
        "optimizer": opt_meta,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {header.get('version')}")
    payload = data[16 + hlen :]
    expected = 4 * header["n_values"]
    if len(payload) != expected:
        raise CheckpointFormatError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f4")
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        tensors[entry["name"]] = flat[entry["offset"] : entry["offset"] + n].reshape(entry["shape"])
    meta = dict(header["meta"])
    meta["optimizer"] = header["optimizer"]
    return Checkpoint(tensors, meta)


def load_into(ckpt: Checkpoint, model, optimizer=None) -> None:
    """Copy stored parameters (and optimiser moments) into live objects."""
    state = ckpt.model_state()
    model.load_state_dict({k: v.to(model.state_dict()[k].dtype) for k, v in state.items()})
    opt_meta = ckpt.meta.get("optimizer")
    if optimizer is None or not opt_meta:
        return
    params = dict(model.named_parameters())
    for name, step in opt_meta["steps"].items():
        p = params[name]
        optimizer.state[p] = {
            "step": torch.tensor(step, dtype=torch.float32),
            "exp_avg": torch.from_numpy(ckpt.tensors[f"optim.exp_avg.{name}"].copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"optim.exp_avg_sq.{name}"].copy()).to(p.dtype),
        }
