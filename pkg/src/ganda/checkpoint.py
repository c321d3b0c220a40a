"""Checkpoint container.

A checkpoint is a zip archive with four members:

``spec.json``       generator and discriminator specs
``directory.json``  ordered tensor directory: name, shape, byte offset, byte count
``weights.bin``     raw little-endian float32 tensor data
``meta.json``       training metadata plus the SHA-256 of ``weights.bin``

Member timestamps are pinned so identical contents give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpoint, InvalidSpec, IoFailure, MissingFile
from .networks import (
    Discriminator,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    build_discriminator,
    build_generator,
)

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def spec_document(gspec: GeneratorSpec, dspec: DiscriminatorSpec) -> dict:
    return {"generator": gspec.to_dict(), "discriminator": dspec.to_dict()}


def config_hash(gspec: GeneratorSpec, dspec: DiscriminatorSpec) -> str:
    doc = json.dumps(spec_document(gspec, dspec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()


def _state_arrays(prefix, module):
    out = {}
    for name, t in module.state_dict().items():
        out[f"{prefix}.{name}"] = t.detach().cpu().numpy()
    return out


def _optimizer_arrays(prefix, opt):
    out = {}
    state = opt.state_dict()["state"]
    for idx in sorted(state):
        for key in sorted(state[idx]):
            val = state[idx][key]
            out[f"{prefix}.{idx}.{key}"] = np.asarray(
                val.detach().cpu().numpy() if torch.is_tensor(val) else val
            )
    return out


@dataclass
class Checkpoint:
    generator_spec: GeneratorSpec
    discriminator_spec: DiscriminatorSpec
    weights: dict
    training_meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.generator_spec, self.discriminator_spec)

    @classmethod
    def from_models(cls, g: Generator, d: Discriminator, meta=None,
                    opt_g=None, opt_d=None) -> "Checkpoint":
        weights = {}
        weights.update(_state_arrays("generator", g))
        weights.update(_state_arrays("discriminator", d))
        if opt_g is not None:
            weights.update(_optimizer_arrays("opt_g", opt_g))
        if opt_d is not None:
            weights.update(_optimizer_arrays("opt_d", opt_d))
        weights = {k: np.asarray(v, dtype=np.float32) for k, v in weights.items()}
        meta = dict(meta or {})
        meta["config_hash"] = config_hash(g.spec, d.spec)
        return cls(g.spec, d.spec, weights, meta)

    def _module_state(self, prefix, module):
        state = {}
        expected = module.state_dict()
        for name, ref in expected.items():
            key = f"{prefix}.{name}"
            if key not in self.weights:
                raise InvalidSpec(f"checkpoint lacks tensor {key}")
            arr = self.weights[key]
            if tuple(arr.shape) != tuple(ref.shape):
                raise InvalidSpec(f"{key}: shape {arr.shape} vs model {tuple(ref.shape)}")
            state[name] = torch.as_tensor(np.array(arr)).to(ref.dtype)
        return state

    def load_into(self, g: Generator | None = None, d: Discriminator | None = None) -> None:
        """Copy weights into existing models; their specs must match exactly."""
        if g is not None:
            if g.spec != self.generator_spec:
                raise InvalidSpec("generator spec differs from the checkpoint's")
            g.load_state_dict(self._module_state("generator", g))
        if d is not None:
            if d.spec != self.discriminator_spec:
                raise InvalidSpec("discriminator spec differs from the checkpoint's")
            d.load_state_dict(self._module_state("discriminator", d))

    def load_optimizer(self, prefix: str, opt: torch.optim.Optimizer) -> bool:
        """Restore Adam moments saved under ``prefix``; False if none were saved."""
        keys = [k for k in self.weights if k.startswith(prefix + ".")]
        if not keys:
            return False
        sd = opt.state_dict()
        state = {}
        for k in keys:
            _, idx, name = k.split(".", 2)
            state.setdefault(int(idx), {})[name] = torch.as_tensor(np.array(self.weights[k]))
        sd["state"] = state
        opt.load_state_dict(sd)
        return True

    def generator(self) -> Generator:
        g = build_generator(self.generator_spec, 0)
        self.load_into(g=g)
        g.eval()
        return g

    def discriminator(self) -> Discriminator:
        d = build_discriminator(self.discriminator_spec, 0)
        self.load_into(d=d)
        d.eval()
        return d


def _blob(weights: dict):
    directory = []
    chunks = []
    offset = 0
    for name, arr in weights.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                          "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    return b"".join(chunks), directory


def _write_member(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """The weight blob alone; identical training runs give identical bytes."""
    return _blob(ckpt.weights)[0]


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write the archive; returns the SHA-256 of the weight blob."""
    blob, directory = _blob(ckpt.weights)
    digest = hashlib.sha256(blob).hexdigest()
    meta = dict(ckpt.training_meta)
    meta["config_hash"] = ckpt.config_hash
    meta["weights_sha256"] = digest
    spec = spec_document(ckpt.generator_spec, ckpt.discriminator_spec)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with zipfile.ZipFile(tmp, "w") as zf:
            _write_member(zf, "spec.json", json.dumps(spec, indent=2, sort_keys=True).encode())
            _write_member(zf, "directory.json", json.dumps(directory, indent=1).encode())
            _write_member(zf, "weights.bin", blob)
            _write_member(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc
    return digest


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        with zipfile.ZipFile(path) as zf:
            spec = json.loads(zf.read("spec.json"))
            directory = json.loads(zf.read("directory.json"))
            blob = zf.read("weights.bin")
            meta = json.loads(zf.read("meta.json"))
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable archive ({exc})") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    if hashlib.sha256(blob).hexdigest() != meta.get("weights_sha256"):
        raise CorruptCheckpoint(f"{path}: weight blob hash mismatch")
    try:
        gspec = GeneratorSpec.from_dict(spec["generator"])
        dspec = DiscriminatorSpec.from_dict(spec["discriminator"])
    except (KeyError, TypeError, InvalidSpec) as exc:
        raise CorruptCheckpoint(f"{path}: bad spec document ({exc})") from exc
    if config_hash(gspec, dspec) != meta.get("config_hash"):
        raise CorruptCheckpoint(f"{path}: config hash does not match the stored specs")

    weights = {}
    for entry in directory:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CorruptCheckpoint(f"{path}: tensor {entry['name']} truncated")
        weights[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    meta.pop("weights_sha256", None)
    return Checkpoint(gspec, dspec, weights, meta)
