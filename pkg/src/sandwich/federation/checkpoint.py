"""Owner-partitioned checkpoints: one directory per owner.

Each owner directory holds ``manifest.json`` and one ``<tensor>.f32le``
blob (little-endian float32, C-order) per parameter or float buffer.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from pathlib import Path

import numpy as np
import torch

from ..backbones import RoutingError, SandwichModel


class CheckpointError(IOError):
    pass


def owner_dirname(owner: str) -> str:
    return owner.replace(":", "-")


def save_checkpoints(model: SandwichModel, root) -> dict[str, Path]:
    root = Path(root)
    owners = model.owner_map()
    groups: dict[str, dict[str, torch.Tensor]] = defaultdict(dict)
    for name, t in model.state_dict().items():
        if not t.is_floating_point():
            continue
        groups[owners[name]][name] = t
    written = {}
    for owner, tensors in sorted(groups.items()):
        d = root / owner_dirname(owner)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, t in sorted(tensors.items()):
            raw = np.ascontiguousarray(t.detach().numpy(), dtype="<f4").tobytes()
            fname = f"{name}.f32le"
            (d / fname).write_bytes(raw)
            entries.append({"name": name, "file": fname, "dtype": "float32",
                            "shape": list(t.shape), "sha256": hashlib.sha256(raw).hexdigest()})
        (d / "manifest.json").write_text(
            json.dumps({"owner": owner, "byte_order": "little", "tensors": entries}, indent=2) + "\n")
        written[owner] = d
    return written


def read_owner(path) -> tuple[str, dict[str, np.ndarray]]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    out = {}
    for e in manifest["tensors"]:
        raw = (path / e["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CheckpointError(f"{path / e['file']}: checksum mismatch")
        out[e["name"]] = np.frombuffer(raw, "<f4").reshape(e["shape"])
    return manifest["owner"], out


def load_checkpoints(model: SandwichModel, root) -> None:
    root = Path(root)
    owners = model.owner_map()
    needed = {name for name, t in model.state_dict().items() if t.is_floating_point()}
    state = {}
    for owner in sorted(set(owners[n] for n in needed)):
        d = root / owner_dirname(owner)
        if not (d / "manifest.json").exists():
            if owner.startswith("node:") and any(n.startswith("heads.") and owners[n] == owner
                                                 for n in needed):
                raise RoutingError(f"missing checkpoint for {owner} (local head and branch)")
            raise CheckpointError(f"missing checkpoint directory for owner {owner}")
        got_owner, tensors = read_owner(d)
        if got_owner != owner:
            raise CheckpointError(f"{d} holds {got_owner}, expected {owner}")
        state.update({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    missing = needed - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    model.load_state_dict(state, strict=False)
