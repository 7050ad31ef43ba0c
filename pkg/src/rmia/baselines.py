"""Reference models trained with the same loop: logistic regression over
one-hot + numeric features, and a plain MLP on raw concatenated embeddings."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .features import EncodedBatch
from .model import (ForwardResult, Model, encode_backward, encode_forward, fuse_backward, fuse_forward,
                    updated_running_stats, _Lookups)
from .nn import ops
from .nn.params import EMBEDDING, ONES, ZEROS, ParamSpec, linear_specs


@dataclass(frozen=True)
class LogisticConfig:
    use_text: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "LogisticConfig":
        return cls(**obj)


class LogisticModel(Model):
    """Linear score over identity, resource, affinity and count one-hots plus
    text and rate features.  Logits are ``[0, s]`` so the pass probability is
    ``sigmoid(s)``; all weights sit in one column table ``lr.w``."""

    kind = "lr"

    def param_specs(self):
        specs = [ParamSpec("lr.w", (self.layout.total,), ZEROS, force_decay=True),
                 ParamSpec("lr.rate", (4,), ZEROS, force_decay=True),
                 ParamSpec("lr.b", (1,), ZEROS)]
        if self.config.use_text:
            specs.insert(1, ParamSpec("lr.text", (3 * self.enc_cfg.text_dim,), ZEROS, force_decay=True))
        return specs

    @staticmethod
    def _onehot_rows(batch: EncodedBatch) -> np.ndarray:
        return np.concatenate([batch.app_id, batch.apr_id, batch.res, batch.aff, batch.cnt], axis=1)

    def forward(self, params, buffers, batch, train=False):
        w = params["lr.w"]
        rows = self._onehot_rows(batch)
        s = w[rows].sum(axis=1) + batch.rates.astype(w.dtype) @ params["lr.rate"] + params["lr.b"][0]
        if self.config.use_text:
            s = s + batch.text.astype(w.dtype) @ params["lr.text"]
        logits = np.stack([np.zeros_like(s), s], axis=1)
        return ForwardResult(logits, ops.softmax(logits), s[:, None], {}, {}), rows

    def backward(self, dlogits, cache, params, batch):
        rows = cache
        ds = dlogits[:, 1]
        w = params["lr.w"]
        dw = np.zeros_like(w)
        np.add.at(dw, rows.reshape(-1), np.repeat(ds, rows.shape[1]))
        grads = {"lr.w": dw, "lr.rate": batch.rates.astype(w.dtype).T @ ds, "lr.b": np.array([ds.sum()], dtype=w.dtype)}
        if self.config.use_text:
            grads["lr.text"] = batch.text.astype(w.dtype).T @ ds
        return grads


@dataclass(frozen=True)
class MlpConfig:
    d: int = 32
    fusion_hidden: int = 128

    def __post_init__(self):
        if self.fusion_hidden < 1:
            raise ValueError("fusion_hidden must be >= 1")
        if self.d < 1:
            raise ValueError("d must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "MlpConfig":
        return cls(**obj)


MLP_ORDER = ("t", "r", "x_id", "xbar_id", "p", "sn", "sr")


class PlainMlpModel(Model):
    """Fusion head on raw embeddings: text, resource, mean identity of each
    party, affinity, binned counts and rates (13d wide at the defaults)."""

    kind = "mlp"
    has_batchnorm = True

    def param_specs(self):
        c, d = self.config, self.config.d
        specs = [ParamSpec("E", (self.layout.total, d), EMBEDDING)]
        specs += linear_specs("text", 3 * self.enc_cfg.text_dim, d)
        specs += linear_specs("res_in", self.layout.n_resource_fields * d, d)
        specs += linear_specs("rate", 4, d)
        specs += linear_specs("fuse", 13 * d, c.fusion_hidden)
        specs += [ParamSpec("bn.gamma", (c.fusion_hidden,), ONES), ParamSpec("bn.beta", (c.fusion_hidden,), ZEROS)]
        specs += linear_specs("out", c.fusion_hidden, 2)
        return specs

    def init_buffers(self):
        n = self.config.fusion_hidden
        return {"bn.running_mean": np.zeros(n), "bn.running_var": np.ones(n)}

    def forward(self, params, buffers, batch, train=False):
        bundle, enc_cache = encode_forward(params, batch, self.config, {"id", "r", "t", "p", "sn", "sr"})
        comps = {"t": bundle["e_t"], "r": bundle["e_r"], "x_id": bundle["e_x_id"].mean(axis=1),
                 "xbar_id": bundle["e_xbar_id"].mean(axis=1), "p": bundle["e_p"], "sn": bundle["e_sn"],
                 "sr": bundle["e_sr"]}
        h, logits, fcache = fuse_forward(params, buffers, comps, MLP_ORDER, train)
        running = updated_running_stats(buffers, fcache) if train else None
        return ForwardResult(logits, ops.softmax(logits), h, comps, bundle, {}, running), (enc_cache, fcache)

    def backward(self, dlogits, cache, params, batch):
        enc_cache, fcache = cache
        d = self.config.d
        grads: dict = {}
        dh = fuse_backward(dlogits, fcache, grads)
        widths = {"p": 4 * d, "sn": 4 * d}
        pieces, pos = {}, 0
        for name in MLP_ORDER:
            n = widths.get(name, d)
            pieces[name] = dh[:, pos:pos + n]
            pos += n
        d1, d2 = batch.app_id.shape[1], batch.apr_id.shape[1]
        dbundle = {"e_t": pieces["t"], "e_r": pieces["r"], "e_p": pieces["p"], "e_sn": pieces["sn"],
                   "e_sr": pieces["sr"],
                   "e_x_id": np.repeat(pieces["x_id"][:, None, :] / d1, d1, axis=1),
                   "e_xbar_id": np.repeat(pieces["xbar_id"][:, None, :] / d2, d2, axis=1)}
        lookups = _Lookups()
        encode_backward(dbundle, enc_cache, batch, params["E"], grads, lookups)
        grads["E"] = lookups.scatter(params["E"])
        return grads
