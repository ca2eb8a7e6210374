"""Self-describing checkpoint container.

Layout: the line ``T4P-CKPT v1``, one line of JSON describing every tensor
(section, name, layer group, shape, dtype, byte offset) plus free metadata,
then the raw little-endian tensor bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig
from .memory import MemoryEntry, TokenMemory

MAGIC = "T4P-CKPT v1"


class CheckpointError(ValueError):
    pass


def write_container(path: str | Path, sections: dict[str, dict[str, tuple[np.ndarray, dict]]],
                    meta: dict[str, Any]) -> None:
    """``sections[section][name] = (array, attrs)``; attrs land in the index."""
    index = []
    blobs = []
    offset = 0
    for section, tensors in sections.items():
        for name, (arr, attrs) in tensors.items():
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<")
            raw = arr.astype(dt, copy=False).tobytes()
            index.append({"section": section, "name": name, "shape": list(arr.shape),
                          "dtype": dt.str, "offset": offset, "nbytes": len(raw), **attrs})
            blobs.append(raw)
            offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC}\n".encode())
        fh.write(header.encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def read_container(path: str | Path) -> tuple[dict[str, Any], dict[str, dict[str, tuple[np.ndarray, dict]]]]:
    data = Path(path).read_bytes()
    first = data.find(b"\n")
    if first < 0 or data[:first].decode(errors="replace") != MAGIC:
        raise CheckpointError(f"{path}: not a {MAGIC} file")
    second = data.find(b"\n", first + 1)
    header = json.loads(data[first + 1:second])
    body = data[second + 1:]
    sections: dict[str, dict[str, tuple[np.ndarray, dict]]] = {}
    for rec in header["tensors"]:
        rec = dict(rec)
        raw = body[rec.pop("offset"):][:rec.pop("nbytes")]
        arr = np.frombuffer(raw, dtype=np.dtype(rec.pop("dtype"))).reshape(rec.pop("shape")).copy()
        sections.setdefault(rec.pop("section"), {})[rec.pop("name")] = (arr, rec)
    return header["meta"], sections


def _model_section(model: Backbone) -> dict[str, tuple[np.ndarray, dict]]:
    out = {}
    for name, t in model.state_dict().items():
        out[name] = (t.detach().cpu().numpy(), {"group": Backbone.group_of(name)})
    return out


def _memory_section(memory: TokenMemory) -> dict[str, tuple[np.ndarray, dict]]:
    out = {"scene_class_tokens": (memory.scene_class_tokens, {"scene_id": memory.scene_id})}
    for aid, e in memory.bank.items():
        out[f"bank/{aid}"] = (e.token, {"actor_id": int(aid), "cls": e.cls,
                                        "last_seen": e.last_seen, "retired": e.retired})
    return out


def save_checkpoint(path: str | Path, model: Backbone, meta: dict[str, Any] | None = None,
                    memory: TokenMemory | None = None,
                    extra: dict[str, dict[str, np.ndarray]] | None = None) -> None:
    meta = dict(meta or {})
    meta["backbone"] = asdict(model.cfg)
    meta["d_model"] = model.cfg.d_model
    meta["dtype"] = str(next(model.parameters()).dtype).replace("torch.", "")
    sections = {"backbone": _model_section(model)}
    if memory is not None:
        sections["token-memory"] = _memory_section(memory)
    for sec, tensors in (extra or {}).items():
        sections[sec] = {k: (v, {}) for k, v in tensors.items()}
    write_container(path, sections, meta)


def load_checkpoint(path: str | Path):
    """Returns ``(model, meta, memory_or_None, extra_sections)``."""
    meta, sections = read_container(path)
    if "backbone" not in sections:
        raise CheckpointError(f"{path}: no backbone section")
    cfg_dict = dict(meta["backbone"])
    cfg = BackboneConfig(**cfg_dict)
    model = Backbone(cfg)
    dtype = getattr(torch, meta.get("dtype", "float32"))
    model.to(dtype)
    state = {k: torch.as_tensor(v) for k, (v, _) in sections["backbone"].items()}
    model.load_state_dict(state)
    memory = None
    if "token-memory" in sections:
        sec = sections["token-memory"]
        tokens, attrs = sec["scene_class_tokens"]
        memory = TokenMemory(tokens.copy(), scene_id=int(attrs["scene_id"]))
        for name, (tok, a) in sec.items():
            if name.startswith("bank/"):
                memory.bank[int(a["actor_id"])] = MemoryEntry(tok.copy(), int(a["cls"]),
                                                             int(a["last_seen"]), bool(a["retired"]))
    extra = {k: {n: v for n, (v, _) in s.items()} for k, s in sections.items()
             if k not in ("backbone", "token-memory")}
    return model, meta, memory, extra
