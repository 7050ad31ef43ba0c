"""Named parameter registry with deterministic initialization."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .ops import TransformerBlockConfig

# init kinds
XAVIER = "xavier"
ZEROS = "zeros"
ONES = "ones"
EMBEDDING = "embedding"
POSITION = "position"

_DECAYABLE = {XAVIER, EMBEDDING}


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str
    force_decay: bool | None = None

    @property
    def decay(self) -> bool:
        # weight matrices and embedding tables unless overridden
        if self.force_decay is not None:
            return self.force_decay
        return self.init in _DECAYABLE


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def linear_specs(prefix: str, n_in: int, n_out: int) -> list[ParamSpec]:
    return [ParamSpec(f"{prefix}.W", (n_out, n_in), XAVIER), ParamSpec(f"{prefix}.b", (n_out,), ZEROS)]


def block_specs(prefix: str, cfg: TransformerBlockConfig) -> list[ParamSpec]:
    """Parameters of a self- or cross-attention stack (identical layouts)."""
    d, ff = cfg.d, cfg.ff_dim
    specs = []
    for i in range(cfg.layers):
        p = f"{prefix}.layer{i}"
        for proj in ("q", "k", "v", "o"):
            specs += [ParamSpec(f"{p}.attn.w{proj}", (d, d), XAVIER), ParamSpec(f"{p}.attn.b{proj}", (d,), ZEROS)]
        specs += [ParamSpec(f"{p}.ln1.gamma", (d,), ONES), ParamSpec(f"{p}.ln1.beta", (d,), ZEROS)]
        specs += linear_specs(f"{p}.ff1", d, ff) + linear_specs(f"{p}.ff2", ff, d)
        specs += [ParamSpec(f"{p}.ln2.gamma", (d,), ONES), ParamSpec(f"{p}.ln2.beta", (d,), ZEROS)]
    return specs


class ParameterStore:
    """Ordered ``name -> array`` registry plus buffers and AdamW moments.

    Each parameter draws from its own generator seeded by ``(seed, crc32(name))``
    so adding or removing a component leaves the others' initial values alone.
    """

    def __init__(self, specs, seed: int = 0, dtype=np.float32, buffers: dict | None = None):
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate parameter names: {dup}")
        self.specs = {s.name: s for s in specs}
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        for s in specs:
            rng = np.random.default_rng([seed, zlib.crc32(s.name.encode())])
            self.params[s.name] = _initial_value(s, rng).astype(self.dtype)
        self.buffers: dict[str, np.ndarray] = {k: np.asarray(v, dtype=self.dtype).copy()
                                               for k, v in (buffers or {}).items()}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def decayable(self, name: str) -> bool:
        return self.specs[name].decay

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def snapshot(self) -> tuple[dict, dict]:
        return ({k: v.copy() for k, v in self.params.items()}, {k: v.copy() for k, v in self.buffers.items()})

    def restore(self, snap) -> None:
        params, buffers = snap
        self.params = {k: v.copy() for k, v in params.items()}
        self.buffers = {k: v.copy() for k, v in buffers.items()}

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore.__new__(ParameterStore)
        out.specs = dict(self.specs)
        out.seed = self.seed
        out.dtype = np.dtype(dtype)
        out.params = {k: v.astype(dtype) for k, v in self.params.items()}
        out.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        out.m, out.v, out.step = {}, {}, 0
        return out


def _initial_value(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.init == XAVIER:
        return xavier_uniform(rng, spec.shape[0], int(np.prod(spec.shape[1:])))
    if spec.init == ZEROS:
        return np.zeros(spec.shape)
    if spec.init == ONES:
        return np.ones(spec.shape)
    if spec.init == EMBEDDING:
        return rng.normal(0.0, 1.0 / np.sqrt(spec.shape[-1]), size=spec.shape)
    if spec.init == POSITION:
        return rng.normal(0.0, 0.02, size=spec.shape)
    raise ValueError(f"unknown init kind {spec.init!r}")
