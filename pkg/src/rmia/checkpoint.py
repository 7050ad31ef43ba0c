"""Binary checkpoint format.

Layout: ``MAGIC | uint32 header length | JSON header | raw little-endian
arrays``.  The header records every array's name, shape and dtype in
registry order plus the configs needed to rebuild the model, so a load
reproduces predictions bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .baselines import LogisticConfig, LogisticModel, MlpConfig, PlainMlpModel
from .data import FeatureSchema
from .features import EncoderConfig
from .model import Model, RmiaConfig, RmiaModel
from .nn.params import ParameterStore

MAGIC = b"RMIACKP\x01"
FORMAT_VERSION = 1

MODEL_KINDS = {
    "rmia": (RmiaModel, RmiaConfig),
    "lr": (LogisticModel, LogisticConfig),
    "mlp": (PlainMlpModel, MlpConfig),
}


class CorruptCheckpoint(ValueError):
    pass


class ConfigHashMismatch(ValueError):
    pass


def build_model(kind: str, config: dict, schema: FeatureSchema, enc_cfg: EncoderConfig) -> Model:
    try:
        model_cls, cfg_cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}") from None
    return model_cls(cfg_cls.from_dict(config), schema, enc_cfg)


def _arrays(store: ParameterStore):
    for name, arr in store.params.items():
        yield "param", name, arr
    for name in sorted(store.buffers):
        yield "buffer", name, store.buffers[name]


def checkpoint_bytes(model: Model, store: ParameterStore, extra: dict | None = None) -> bytes:
    entries, chunks = [], []
    for group, name, arr in _arrays(store):
        a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        entries.append({"group": group, "name": name, "shape": list(a.shape), "dtype": a.dtype.str})
        chunks.append(a.tobytes())
    payload = b"".join(chunks)
    header = {
        "format": FORMAT_VERSION,
        "kind": model.kind,
        "model_config": model.config_dict(),
        "schema": model.schema.to_dict(),
        "encoder": model.enc_cfg.to_dict(),
        "config_hash": model.config_hash(),
        "precision": store.dtype.name,
        "seed": store.seed,
        "decay": [n for n in store.params if store.decayable(n)],
        "arrays": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(blob)) + blob + payload


def save_checkpoint(model: Model, store: ParameterStore, path, extra: dict | None = None) -> str:
    """Write atomically; returns the config hash."""
    path = Path(path)
    data = checkpoint_bytes(model, store, extra)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return model.config_hash()


def read_header(data: bytes) -> tuple[dict, int]:
    if len(data) < len(MAGIC) + 4 or not data.startswith(MAGIC):
        raise CorruptCheckpoint("bad magic or truncated preamble")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if len(data) < start + n:
        raise CorruptCheckpoint("truncated header")
    try:
        header = json.loads(data[start:start + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    return header, start + n


def load_checkpoint(path, expected_hash: str | None = None) -> tuple[Model, ParameterStore, dict]:
    """Rebuild ``(model, store, header)``.

    Raises ConfigHashMismatch when ``expected_hash`` is given and differs, or
    when the stored configs no longer hash to the recorded value.
    """
    data = Path(path).read_bytes()
    header, pos = read_header(data)
    try:
        model = build_model(header["kind"], header["model_config"], FeatureSchema.from_dict(header["schema"]),
                            EncoderConfig.from_dict(header["encoder"]))
        entries = header["arrays"]
        stored_hash = header["config_hash"]
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"incomplete header: {exc}") from None
    if model.config_hash() != stored_hash:
        raise ConfigHashMismatch("stored configs do not match the recorded config hash")
    if expected_hash is not None and expected_hash != stored_hash:
        raise ConfigHashMismatch(f"checkpoint hash {stored_hash[:12]} != expected {expected_hash[:12]}")
    payload = data[pos:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptCheckpoint("payload checksum mismatch (truncated or modified)")

    specs = model.param_specs()
    names = [s.name for s in specs]
    params, buffers, off = {}, {}, 0
    for e in entries:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if off + nbytes > len(payload):
            raise CorruptCheckpoint(f"array {e['name']} runs past the end of the file")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=off).reshape(e["shape"])
        arr = arr.astype(dt.newbyteorder("="))
        (params if e["group"] == "param" else buffers)[e["name"]] = arr
        off += nbytes
    if off != len(payload):
        raise CorruptCheckpoint("trailing bytes after the last array")
    if list(params) != names:
        raise CorruptCheckpoint("parameter registry does not match the model layout")
    for s in specs:
        if tuple(params[s.name].shape) != tuple(s.shape):
            raise CorruptCheckpoint(f"{s.name}: shape {params[s.name].shape} != {s.shape}")

    store = ParameterStore.__new__(ParameterStore)
    store.specs = {s.name: s for s in specs}
    store.seed = header.get("seed", 0)
    store.dtype = np.dtype(header.get("precision", "float32"))
    store.params = params
    store.buffers = buffers
    store.m, store.v, store.step = {}, {}, 0
    return model, store, header


def load_into(model: Model, path) -> ParameterStore:
    """Load parameters for an already-built model, enforcing the config hash."""
    _, store, _ = load_checkpoint(path, expected_hash=model.config_hash())
    return store


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


__all__ = ["CorruptCheckpoint", "ConfigHashMismatch", "save_checkpoint", "load_checkpoint", "load_into",
           "build_model", "checkpoint_bytes", "read_header", "file_sha256", "MODEL_KINDS"]
