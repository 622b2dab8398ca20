"""Serializable parameter sets for the four networks.

An archive is a zip of ``.npy`` members (one per named tensor) plus a
``meta.json`` holding the kind, architecture config, extras and format
version. Members are written with a fixed timestamp so identical parameters
give identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
KINDS = ("generator", "domain_discriminator", "reid")
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class ModelParams:
    kind: str
    config: dict
    tensors: dict
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown parameter kind {self.kind!r}")

    @classmethod
    def from_module(cls, kind, config, module, extra=None):
        tensors = {
            name: t.detach().cpu().numpy().copy() for name, t in module.state_dict().items()
        }
        return cls(kind, dict(config), tensors, dict(extra or {}))

    def state_dict(self):
        import torch

        return {name: torch.from_numpy(np.array(arr)) for name, arr in self.tensors.items()}

    def to_bytes(self):
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
            meta = {
                "format_version": FORMAT_VERSION,
                "kind": self.kind,
                "config": self.config,
                "extra": self.extra,
                "tensors": sorted(self.tensors),
            }
            zf.writestr(zipfile.ZipInfo("meta.json", _EPOCH), json.dumps(meta, sort_keys=True))
            for name in sorted(self.tensors):
                arr = io.BytesIO()
                np.lib.format.write_array(arr, np.ascontiguousarray(self.tensors[name]), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"tensors/{name}.npy", _EPOCH), arr.getvalue())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise ValueError(
                    f"unsupported parameter archive version {meta.get('format_version')!r}"
                )
            tensors = {
                name: np.lib.format.read_array(io.BytesIO(zf.read(f"tensors/{name}.npy")), allow_pickle=False)
                for name in meta["tensors"]
            }
        return cls(meta["kind"], meta["config"], tensors, meta.get("extra", {}))

    def digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()
