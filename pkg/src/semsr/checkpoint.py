"""Versioned checkpoint format: a directory of .npy tensors plus metadata.json.

Serialisation is byte-stable: metadata is dumped with sorted keys and fixed
separators, tensor files are plain ``np.save`` output, so save -> load ->
save reproduces identical bytes.  Loading an unknown format version or a
checkpoint whose scale/kind disagrees with the caller fails without any
partial state.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1
_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


@dataclass
class TrainState:
    """Everything a training stage needs to persist.

    meta holds json-serialisable facts (kind, step, scale, config echo, rng
    state, hashes); tensors holds named numpy arrays with namespaced keys
    such as ``g/conv_first.weight`` or ``opt_g/0.exp_avg``.
    """

    meta: dict
    tensors: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.meta.get("kind", "")

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def _tensor_filename(index: int, name: str) -> str:
    return f"{index:04d}__{_SAFE.sub('_', name)}.npy"


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    tdir = path / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    names = sorted(state.tensors)
    index = {}
    for i, name in enumerate(names):
        fname = _tensor_filename(i, name)
        arr = np.asarray(state.tensors[name], order="C")  # asarray keeps 0-d shapes
        np.save(tdir / fname, arr)
        index[name] = {"file": fname, "dtype": str(arr.dtype), "shape": list(arr.shape)}
    # drop stale tensor files from a previous save with different contents
    keep = {v["file"] for v in index.values()}
    for old in tdir.glob("*.npy"):
        if old.name not in keep:
            old.unlink()
    meta = dict(state.meta)
    meta["format_version"] = FORMAT_VERSION
    doc = {"meta": meta, "tensors": index}
    (path / "metadata.json").write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
    )
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    meta_path = path / "metadata.json"
    if not meta_path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        doc = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint metadata at {meta_path}: {exc}") from exc
    meta = doc.get("meta", {})
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {meta.get('format_version')!r} unsupported "
            f"(want {FORMAT_VERSION})"
        )
    tensors = {}
    for name, info in doc.get("tensors", {}).items():
        fpath = path / "tensors" / info["file"]
        if not fpath.is_file():
            raise CheckpointError(f"checkpoint tensor missing: {fpath}")
        arr = np.load(fpath)
        if list(arr.shape) != info["shape"] or str(arr.dtype) != info["dtype"]:
            raise CheckpointError(f"checkpoint tensor {name} does not match its index entry")
        tensors[name] = arr
    return TrainState(meta=meta, tensors=tensors)


def require_kind(state: TrainState, kind: str, path) -> TrainState:
    if state.kind != kind:
        raise CheckpointError(f"checkpoint at {path} has kind {state.kind!r}, expected {kind!r}")
    return state


# -- torch module / optimizer bridges ---------------------------------------


def pack_module(module: torch.nn.Module, prefix: str, out: dict) -> None:
    for name, tensor in module.state_dict().items():
        out[f"{prefix}/{name}"] = tensor.detach().cpu().numpy().copy()


def unpack_module(module: torch.nn.Module, prefix: str, tensors: dict) -> None:
    state = module.state_dict()
    wanted = {f"{prefix}/{n}": n for n in state}
    missing = [k for k in wanted if k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {missing[:5]}")
    loaded = {}
    for key, name in wanted.items():
        arr = tensors[key]
        if list(arr.shape) != list(state[name].shape):
            raise CheckpointError(
                f"tensor {name} has shape {list(arr.shape)}, model expects "
                f"{list(state[name].shape)}"
            )
        loaded[name] = torch.from_numpy(np.asarray(arr, order="C"))
    module.load_state_dict(loaded)


def pack_optimizer(opt: torch.optim.Optimizer, prefix: str, out: dict) -> None:
    sd = opt.state_dict()
    for pid, st in sd["state"].items():
        for key, val in st.items():
            if isinstance(val, torch.Tensor):
                out[f"{prefix}/{pid}.{key}"] = val.detach().cpu().numpy().copy()
            else:
                out[f"{prefix}/{pid}.{key}"] = np.asarray(val)


def unpack_optimizer(opt: torch.optim.Optimizer, prefix: str, tensors: dict) -> None:
    sd = opt.state_dict()
    state: dict = {}
    pref = f"{prefix}/"
    for key, arr in tensors.items():
        if not key.startswith(pref):
            continue
        pid_key = key[len(pref) :]
        pid, field_name = pid_key.split(".", 1)
        entry = state.setdefault(int(pid), {})
        entry[field_name] = torch.from_numpy(np.asarray(arr, order="C"))
    sd["state"] = state
    opt.load_state_dict(sd)
