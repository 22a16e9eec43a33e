"""Named parameter groups, Adam, and the STBL1 checkpoint format."""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor

STBL_FORMAT = "STBL1"
STBL_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"


class ParamGroup:
    """Ordered ``name -> Tensor`` map. Freezing is one-way and switches off
    gradient recording for the entries, so backward passes skip them."""

    def __init__(self, entries: dict[str, Tensor] | None = None, frozen: bool = False):
        self.entries: OrderedDict[str, Tensor] = OrderedDict()
        self.frozen = False
        for name, t in (entries or {}).items():
            self.add(name, t)
        if frozen:
            self.freeze()

    def add(self, name: str, value) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = not self.frozen
        self.entries[name] = t
        return t

    def freeze(self) -> None:
        self.frozen = True
        for t in self.entries.values():
            t.requires_grad = False
            t.grad = None

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries.items())

    def __len__(self) -> int:
        return len(self.entries)

    def num_params(self) -> int:
        return sum(t.size for t in self.entries.values())

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.entries.items():
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamGroup, state: AdamState) -> None:
    """One bias-corrected Adam update, no weight decay. Entries without a
    gradient are left untouched."""
    if params.frozen:
        raise ContractError("refusing to update a frozen parameter group")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def save_checkpoint(path: str | Path, groups: dict[str, ParamGroup], meta: dict | None = None) -> Path:
    """Write ``manifest.json`` and ``weights.bin`` (little-endian f64) into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for gname, group in groups.items():
        for name, t in group:
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            entries.append({"group": gname, "name": name, "shape": list(t.shape),
                            "offset": offset, "frozen": group.frozen})
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "format": STBL_FORMAT,
        "version": STBL_VERSION,
        "meta": meta or {},
        "checksums": {g: grp.checksum() for g, grp in groups.items()},
        "tensors": entries,
    }
    (path / BLOB_NAME).write_bytes(b"".join(chunks))
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, ParamGroup], dict]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    if manifest.get("format") != STBL_FORMAT or manifest.get("version") != STBL_VERSION:
        raise ValueError(f"{path}: not an {STBL_FORMAT} v{STBL_VERSION} checkpoint")
    blob = (path / BLOB_NAME).read_bytes()
    groups: dict[str, ParamGroup] = {}
    frozen: dict[str, bool] = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * n
        if end > len(blob):
            raise ShapeError(f"{path}: tensor {e['name']!r} runs past the end of the blob")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).astype(np.float64)
        groups.setdefault(e["group"], ParamGroup()).add(e["name"], arr.reshape(e["shape"]))
        frozen[e["group"]] = e["frozen"]
    for g, grp in groups.items():
        if frozen[g]:
            grp.freeze()
    return groups, manifest
