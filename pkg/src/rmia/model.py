"""Relational approval model: binary + ternary relation extractors and the
fusion decision head, with hand-written backward passes.

Shapes use B for batch, d for the model dim, d1/d2 for the applicant and
approver identity lengths and k for the history length.  The forward pass
is a pure function of ``(params, buffers, batch)``; batch-norm running
statistics are returned to the caller instead of being updated in place.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import ApprovalInstance, FeatureSchema
from .features import (
    EncodedBatch,
    EncoderConfig,
    HashingTextEncoder,
    TableLayout,
    TextEncoder,
    encode_dataset,
)
from .nn import ops
from .nn.ops import ShapeMismatch, TransformerBlockConfig
from .nn.params import EMBEDDING, ONES, POSITION, ZEROS, ParameterStore, ParamSpec, block_specs, linear_specs

COMPONENTS = ("t", "r", "bi", "p", "te", "sn", "sr")
ABLATIONS = {"w/o T": "t", "w/o R": "r", "w/o BI": "bi", "w/o P": "p", "w/o TE": "te", "w/o Sn": "sn",
             "w/o Sr": "sr"}
SELF_BLOCKS = ("sa_app_id", "sa_apr_id", "sa_bi", "sa_app_hist", "sa_apr_hist")
CROSS_BLOCKS = ("ca_x", "ca_r", "ca_xbar")
BN_MOMENTUM = 0.1


class MissingComponent(ValueError):
    pass


@dataclass(frozen=True)
class RmiaConfig:
    d: int = 32
    heads: int = 2
    ff: int | None = None
    layers: int = 1
    cross_heads: int = 2
    cross_layers: int = 1
    fusion_hidden: int = 128
    use_t: bool = True
    use_r: bool = True
    use_bi: bool = True
    use_p: bool = True
    use_te: bool = True
    use_sn: bool = True
    use_sr: bool = True

    def __post_init__(self):
        if self.d % self.heads or self.d % self.cross_heads:
            raise ShapeMismatch(f"d={self.d} must be divisible by the head counts")
        if self.fusion_hidden < 1:
            raise ValueError("fusion_hidden must be >= 1")
        if not any(self.enabled(c) for c in COMPONENTS):
            raise ValueError("at least one fusion component must be enabled")

    @property
    def block(self) -> TransformerBlockConfig:
        return TransformerBlockConfig(self.d, self.heads, self.ff, self.layers)

    @property
    def cross_block(self) -> TransformerBlockConfig:
        return TransformerBlockConfig(self.d, self.cross_heads, self.ff, self.cross_layers)

    def enabled(self, component: str) -> bool:
        return getattr(self, f"use_{component}")

    def without(self, component: str) -> "RmiaConfig":
        return replace(self, **{f"use_{component}": False})

    def component_dims(self) -> dict[str, int]:
        d = self.d
        return {"t": d, "r": d, "bi": d, "p": 4 * d, "te": d, "sn": 4 * d, "sr": d}

    def h_layout(self) -> list[tuple[str, int, int]]:
        """(component, start, stop) offsets of the fusion input, fixed order."""
        out, pos = [], 0
        for c in COMPONENTS:
            if self.enabled(c):
                n = self.component_dims()[c]
                out.append((c, pos, pos + n))
                pos += n
        return out

    @property
    def h_dim(self) -> int:
        return sum(stop - start for _, start, stop in self.h_layout())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "RmiaConfig":
        return cls(**obj)


def config_hash(kind: str, model_cfg: dict, schema: FeatureSchema, enc_cfg: EncoderConfig) -> str:
    blob = json.dumps({"kind": kind, "model": model_cfg, "schema": schema.to_dict(), "encoder": enc_cfg.to_dict()},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# -- helpers ------------------------------------------------------------------

def _sub(P, prefix):
    return ops._sub(P, prefix + ".")


def _acc(grads, prefix, g):
    for k, v in g.items():
        name = f"{prefix}.{k}"
        if name in grads:
            grads[name] = grads[name] + v
        else:
            grads[name] = v


def _lin(P, name, x):
    return ops.linear_forward(x, P[f"{name}.W"], P[f"{name}.b"])


def _lin_back(grads, name, dy, cache):
    dx, g = ops.linear_backward(dy, cache)
    _acc(grads, name, g)
    return dx


class _Lookups:
    """Collects (rows, grad) pairs so the embedding gradient is one scatter-add."""

    def __init__(self):
        self.rows, self.grads = [], []

    def add(self, rows, grad):
        self.rows.append(rows.reshape(-1))
        self.grads.append(grad.reshape(-1, grad.shape[-1]))

    def scatter(self, E):
        if not self.rows:
            return np.zeros_like(E)
        return scatter_rows(np.concatenate(self.rows), np.concatenate(self.grads), E.shape[0])


def scatter_rows(rows: np.ndarray, grads: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum ``grads[i]`` into row ``rows[i]`` of an [n_rows, d] zero matrix.

    Same result as ``np.add.at`` up to summation order, several times faster.
    """
    out = np.empty((grads.shape[1], n_rows), dtype=grads.dtype)
    for j in range(grads.shape[1]):
        out[j] = np.bincount(rows, weights=grads[:, j], minlength=n_rows)
    return out.T.copy()


# -- stages -------------------------------------------------------------------

def encode_forward(P, batch: EncodedBatch, cfg: RmiaConfig, need: set):
    """Embedding inputs for the requested pieces; see :class:`EmbeddingBundle`."""
    E = P["E"]
    B = len(batch)
    d = cfg.d
    out, cache = {}, {}
    if "id" in need:
        out["e_x_id"] = E[batch.app_id]
        out["e_xbar_id"] = E[batch.apr_id]
    if "hist" in need:
        k = batch.app_hist.shape[1]
        for side, rows, mask in (("x", batch.app_hist, batch.app_mask), ("xbar", batch.apr_hist, batch.apr_mask)):
            name = "hist_app" if side == "x" else "hist_apr"
            raw = E[rows].reshape(B, k, 3 * d)
            proj, c = _lin(P, name, raw)
            m = mask.astype(E.dtype)[..., None]
            out[f"e_{side}_hd"] = proj * m
            out[f"{side}_mask"] = mask
            cache[name] = (c, m)
    if "r" in need:
        raw = E[batch.res].reshape(B, -1)
        out["e_r"], cache["res_in"] = _lin(P, "res_in", raw)
    if "t" in need:
        out["e_t"], cache["text"] = _lin(P, "text", batch.text.astype(E.dtype, copy=False))
    if "p" in need:
        out["e_p"] = E[batch.aff].reshape(B, -1)
    if "sn" in need:
        out["e_sn"] = E[batch.cnt].reshape(B, -1)
    if "sr" in need:
        out["e_sr"], cache["rate"] = _lin(P, "rate", batch.rates.astype(E.dtype, copy=False))
    return out, cache


def encode_backward(dbundle, cache, batch: EncodedBatch, E, grads, lookups: _Lookups):
    B = len(batch)
    d = E.shape[1]
    if "e_x_id" in dbundle:
        lookups.add(batch.app_id, dbundle["e_x_id"])
    if "e_xbar_id" in dbundle:
        lookups.add(batch.apr_id, dbundle["e_xbar_id"])
    for side, name, rows in (("x", "hist_app", batch.app_hist), ("xbar", "hist_apr", batch.apr_hist)):
        key = f"e_{side}_hd"
        if key in dbundle:
            c, m = cache[name]
            draw = _lin_back(grads, name, dbundle[key] * m, c)
            lookups.add(rows, draw.reshape(B, rows.shape[1], 3, d))
    if "e_r" in dbundle:
        draw = _lin_back(grads, "res_in", dbundle["e_r"], cache["res_in"])
        lookups.add(batch.res, draw.reshape(B, -1, d))
    if "e_t" in dbundle:
        _lin_back(grads, "text", dbundle["e_t"], cache["text"])
    if "e_p" in dbundle:
        lookups.add(batch.aff, dbundle["e_p"].reshape(B, -1, d))
    if "e_sn" in dbundle:
        lookups.add(batch.cnt, dbundle["e_sn"].reshape(B, -1, d))
    if "e_sr" in dbundle:
        _lin_back(grads, "rate", dbundle["e_sr"], cache["rate"])


def binary_forward(P, e_x_id, e_xbar_id, cfg: RmiaConfig, with_bi: bool = True):
    """Identity towers, then the joint extractor mean-pooled into ``e_bi``."""
    bc = cfg.block
    hx, cx = ops.self_attention_forward(e_x_id, _sub(P, "sa_app_id"), bc)
    hb, cb = ops.self_attention_forward(e_xbar_id, _sub(P, "sa_apr_id"), bc)
    e_bi = cbi = cpool = None
    if with_bi:
        z, cbi = ops.self_attention_forward(np.concatenate([hx, hb], axis=1), _sub(P, "sa_bi"), bc)
        e_bi, cpool = ops.masked_mean_forward(z)
    return (hx, hb, e_bi), (cx, cb, cbi, cpool, hx.shape[1])


def binary_backward(d_hx, d_hb, d_ebi, cache, grads):
    cx, cb, cbi, cpool, d1 = cache
    if d_ebi is not None and cbi is not None:
        dz = ops.masked_mean_backward(d_ebi, cpool)
        dseq, g = ops.self_attention_backward(dz, cbi)
        _acc(grads, "sa_bi", g)
        d_hx = d_hx + dseq[:, :d1]
        d_hb = d_hb + dseq[:, d1:]
    dx, g = ops.self_attention_backward(d_hx, cx)
    _acc(grads, "sa_app_id", g)
    dxb, g = ops.self_attention_backward(d_hb, cb)
    _acc(grads, "sa_apr_id", g)
    return dx, dxb


def refine_forward(P, hx, hb, bundle, cfg: RmiaConfig):
    """Final applicant, resource and approver embeddings (each [B, d]).

    An entity with an empty history contributes a zero history vector.
    """
    bc = cfg.block
    out, cache = {}, {}
    out["r_hat"], cache["res"] = _lin(P, "res", bundle["e_r"])
    for side, hid, sa, fuse in (("x", hx, "sa_app_hist", "app_fuse"), ("xbar", hb, "sa_apr_hist", "apr_fuse")):
        mask = bundle[f"{side}_mask"]
        z, csa = ops.self_attention_forward(bundle[f"e_{side}_hd"], _sub(P, sa), bc, mask)
        hd, cpool_h = ops.masked_mean_forward(z, mask)
        idm, cpool_i = ops.masked_mean_forward(hid)
        cat = np.concatenate([idm, hd], axis=-1)
        out[f"{side}_hd_hat"] = hd
        out[f"{side}_hat"], cl = _lin(P, fuse, cat)
        cache[side] = (csa, cpool_h, cpool_i, cl)
    return out, cache


def refine_backward(dout, cache, cfg: RmiaConfig, grads):
    d = cfg.d
    d_er = _lin_back(grads, "res", dout["r_hat"], cache["res"])
    res = {"e_r": d_er}
    for side, sa, fuse in (("x", "sa_app_hist", "app_fuse"), ("xbar", "sa_apr_hist", "apr_fuse")):
        csa, cpool_h, cpool_i, cl = cache[side]
        dcat = _lin_back(grads, fuse, dout[f"{side}_hat"], cl)
        res[f"h{side}"] = ops.masked_mean_backward(dcat[..., :d], cpool_i)
        dz = ops.masked_mean_backward(dcat[..., d:], cpool_h)
        dhd, g = ops.self_attention_backward(dz, csa)
        _acc(grads, sa, g)
        res[f"e_{side}_hd"] = dhd
    return res


def ternary_forward(P, x_hat, r_hat, xbar_hat, cfg: RmiaConfig):
    """Each entity (plus its position embedding) queries the other two."""
    cc = cfg.cross_block
    a = x_hat + P["pos.x"]
    r = r_hat + P["pos.r"]
    b = xbar_hat + P["pos.xbar"]
    plan = (("ca_x", a, (b, r)), ("ca_r", r, (a, b)), ("ca_xbar", b, (a, r)))
    pooled, caches = [], []
    for name, q, ctx in plan:
        y, c = ops.cross_attention_forward(q[:, None, :], np.stack(ctx, axis=1), _sub(P, name), cc)
        m, cp = ops.masked_mean_forward(y)
        pooled.append(m)
        caches.append((c, cp))
    z, cl = _lin(P, "te", np.concatenate(pooled, axis=-1))
    e_te, cr = ops.relu_forward(z)
    return e_te, (caches, cl, cr)


def ternary_backward(d_ete, cache, cfg: RmiaConfig, grads):
    caches, cl, cr = cache
    d = cfg.d
    dcat = _lin_back(grads, "te", ops.relu_backward(d_ete, cr), cl)
    da = dr = db = 0.0
    for i, name in enumerate(CROSS_BLOCKS):
        c, cp = caches[i]
        dy = ops.masked_mean_backward(dcat[:, i * d:(i + 1) * d], cp)
        dq, dctx, g = ops.cross_attention_backward(dy, c)
        _acc(grads, name, g)
        dq = dq[:, 0, :]
        if name == "ca_x":
            da, db, dr = da + dq, db + dctx[:, 0], dr + dctx[:, 1]
        elif name == "ca_r":
            dr, da, db = dr + dq, da + dctx[:, 0], db + dctx[:, 1]
        else:
            db, da, dr = db + dq, da + dctx[:, 0], dr + dctx[:, 1]
    grads["pos.x"] = da.sum(axis=0)
    grads["pos.r"] = dr.sum(axis=0)
    grads["pos.xbar"] = db.sum(axis=0)
    return da, dr, db


def fuse_forward(P, B, components: dict, order, train: bool):
    """Concatenate components in ``order``, then linear -> ReLU -> BatchNorm -> linear."""
    missing = [c for c in order if c not in components]
    if missing:
        raise MissingComponent(f"enabled components missing from the fusion input: {missing}")
    h = np.concatenate([components[c] for c in order], axis=-1)
    z, c6 = _lin(P, "fuse", h)
    a, cr = ops.relu_forward(z)
    n, cbn = ops.batchnorm_forward(a, P["bn.gamma"], P["bn.beta"], B["bn.running_mean"], B["bn.running_var"], train)
    logits, c7 = _lin(P, "out", n)
    return h, logits, (c6, cr, cbn, c7)


def fuse_backward(dlogits, cache, grads):
    c6, cr, cbn, c7 = cache
    dn = _lin_back(grads, "out", dlogits, c7)
    da, g = ops.batchnorm_backward(dn, cbn)
    _acc(grads, "bn", g)
    return _lin_back(grads, "fuse", ops.relu_backward(da, cr), c6)


def updated_running_stats(buffers, fuse_cache):
    """Running mean/var after one training-mode batch (unbiased variance)."""
    mu, var = ops.batch_statistics(fuse_cache[2])
    n = fuse_cache[0][0].shape[0]
    unbiased = var * (n / (n - 1)) if n > 1 else var
    rm = (1 - BN_MOMENTUM) * buffers["bn.running_mean"] + BN_MOMENTUM * mu
    rv = (1 - BN_MOMENTUM) * buffers["bn.running_var"] + BN_MOMENTUM * unbiased
    return {"bn.running_mean": rm.astype(mu.dtype), "bn.running_var": rv.astype(mu.dtype)}


# -- model ----------------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    h: np.ndarray
    components: dict
    bundle: dict
    intermediates: dict = field(default_factory=dict)
    running_stats: dict | None = None


class Model:
    """Shared plumbing: registry init, encoding, loss and batched prediction.

    Subclasses provide ``param_specs``, ``forward`` and ``backward``.
    """

    kind = "base"
    has_batchnorm = False

    def __init__(self, config, schema: FeatureSchema, enc_cfg: EncoderConfig = EncoderConfig()):
        self.config = config
        self.schema = schema
        self.enc_cfg = enc_cfg
        self.layout = TableLayout(schema, enc_cfg.n_bins)
        self.text_encoder: TextEncoder = HashingTextEncoder(enc_cfg.text_dim, enc_cfg.hash_seed)

    def param_specs(self) -> list[ParamSpec]:
        raise NotImplementedError

    def init_buffers(self) -> dict:
        return {}

    def init_params(self, seed: int = 0, dtype=np.float32) -> ParameterStore:
        return ParameterStore(self.param_specs(), seed, dtype, self.init_buffers())

    def config_dict(self) -> dict:
        return self.config.to_dict()

    def config_hash(self) -> str:
        return config_hash(self.kind, self.config_dict(), self.schema, self.enc_cfg)

    def encode(self, instances) -> EncodedBatch:
        return encode_dataset(instances, self.layout, self.text_encoder, self.enc_cfg)

    def forward(self, params: dict, buffers: dict, batch: EncodedBatch, train: bool = False):
        raise NotImplementedError

    def backward(self, dlogits, cache, params: dict, batch: EncodedBatch) -> dict:
        raise NotImplementedError

    def loss_and_grads(self, store: ParameterStore, batch: EncodedBatch, train: bool = True):
        res, cache = self.forward(store.params, store.buffers, batch, train)
        loss, probs, dlogits = ops.softmax_cross_entropy(res.logits, batch.labels)
        grads = self.backward(dlogits, cache, store.params, batch)
        return loss, grads, res

    def predict_proba(self, store: ParameterStore, batch: EncodedBatch, batch_size: int = 1024) -> np.ndarray:
        """Pass-class probabilities in eval mode."""
        out = []
        for start in range(0, len(batch), batch_size):
            res, _ = self.forward(store.params, store.buffers, batch.take(slice(start, start + batch_size)), False)
            out.append(res.probs[:, 1])
        return np.concatenate(out) if out else np.zeros(0)


class RmiaModel(Model):
    kind = "rmia"
    has_batchnorm = True

    # registry ---------------------------------------------------------------
    def param_specs(self) -> list[ParamSpec]:
        c, d = self.config, self.config.d
        specs = [ParamSpec("E", (self.layout.total, d), EMBEDDING)]
        specs += linear_specs("text", 3 * self.enc_cfg.text_dim, d)
        specs += linear_specs("res_in", self.layout.n_resource_fields * d, d)
        specs += linear_specs("rate", 4, d)
        specs += linear_specs("hist_app", 3 * d, d) + linear_specs("hist_apr", 3 * d, d)
        for name in SELF_BLOCKS:
            specs += block_specs(name, c.block)
        specs += linear_specs("res", d, d)
        specs += linear_specs("app_fuse", 2 * d, d) + linear_specs("apr_fuse", 2 * d, d)
        specs += [ParamSpec("pos.x", (d,), POSITION), ParamSpec("pos.r", (d,), POSITION),
                  ParamSpec("pos.xbar", (d,), POSITION)]
        for name in CROSS_BLOCKS:
            specs += block_specs(name, c.cross_block)
        specs += linear_specs("te", 3 * d, d)
        specs += linear_specs("fuse", c.h_dim, c.fusion_hidden)
        specs += [ParamSpec("bn.gamma", (c.fusion_hidden,), ONES), ParamSpec("bn.beta", (c.fusion_hidden,), ZEROS)]
        specs += linear_specs("out", c.fusion_hidden, 2)
        return specs

    def init_buffers(self) -> dict:
        n = self.config.fusion_hidden
        return {"bn.running_mean": np.zeros(n), "bn.running_var": np.ones(n)}

    def _needs(self) -> set:
        c = self.config
        need = {comp for comp in ("t", "p", "sn", "sr") if c.enabled(comp)}
        if c.use_bi or c.use_te:
            need.add("id")
        if c.use_r or c.use_te:
            need.add("r")
        if c.use_te:
            need.add("hist")
        return need

    # forward / backward -------------------------------------------------------
    def forward(self, params: dict, buffers: dict, batch: EncodedBatch, train: bool = False):
        c = self.config
        bundle, enc_cache = encode_forward(params, batch, c, self._needs())
        comps, inter, cache = {}, {}, {"enc": enc_cache}
        for key in ("e_t", "e_p", "e_sn", "e_sr"):
            if key in bundle:
                comps[key[2:]] = bundle[key]
        if "id" in self._needs():
            (hx, hb, e_bi), cache["bi"] = binary_forward(params, bundle["e_x_id"], bundle["e_xbar_id"], c, c.use_bi)
            inter["x_id_hat"], inter["xbar_id_hat"] = hx, hb
            if c.use_bi:
                comps["bi"] = e_bi
        if c.use_te:
            ref, cache["ref"] = refine_forward(params, hx, hb, bundle, c)
            inter.update(ref)
            comps["te"], cache["te"] = ternary_forward(params, ref["x_hat"], ref["r_hat"], ref["xbar_hat"], c)
            r_hat = ref["r_hat"]
        elif c.use_r:
            r_hat, cache["res"] = _lin(params, "res", bundle["e_r"])
            inter["r_hat"] = r_hat
        if c.use_r:
            comps["r"] = r_hat
        order = [comp for comp in COMPONENTS if c.enabled(comp)]
        h, logits, cache["fuse"] = fuse_forward(params, buffers, comps, order, train)
        probs = ops.softmax(logits)
        running = updated_running_stats(buffers, cache["fuse"]) if train else None
        cache["order"] = order
        return ForwardResult(logits, probs, h, comps, bundle, inter, running), cache

    def backward(self, dlogits, cache, params: dict, batch: EncodedBatch) -> dict:
        c = self.config
        grads: dict = {}
        dh = fuse_backward(dlogits, cache["fuse"], grads)
        dcomp, pos = {}, 0
        for comp in cache["order"]:
            n = c.component_dims()[comp]
            dcomp[comp] = dh[:, pos:pos + n]
            pos += n
        dbundle = {f"e_{k}": dcomp[k] for k in ("t", "p", "sn", "sr") if k in dcomp}
        d_hx = d_hb = None
        if c.use_te:
            da, dr, db = ternary_backward(dcomp["te"], cache["te"], c, grads)
            if c.use_r:
                dr = dr + dcomp["r"]
            dref = refine_backward({"x_hat": da, "r_hat": dr, "xbar_hat": db}, cache["ref"], c, grads)
            dbundle["e_r"] = dref["e_r"]
            dbundle["e_x_hd"], dbundle["e_xbar_hd"] = dref["e_x_hd"], dref["e_xbar_hd"]
            d_hx, d_hb = dref["hx"], dref["hxbar"]
        elif c.use_r:
            dbundle["e_r"] = _lin_back(grads, "res", dcomp["r"], cache["res"])
        if "bi" in cache:
            if d_hx is None:
                B = dlogits.shape[0]
                d_hx = np.zeros((B, self.schema.d1, c.d), dtype=dlogits.dtype)
                d_hb = np.zeros((B, self.schema.d2, c.d), dtype=dlogits.dtype)
            dx, dxb = binary_backward(d_hx, d_hb, dcomp.get("bi"), cache["bi"], grads)
            dbundle["e_x_id"], dbundle["e_xbar_id"] = dx, dxb
        lookups = _Lookups()
        encode_backward(dbundle, cache["enc"], batch, params["E"], grads, lookups)
        grads["E"] = lookups.scatter(params["E"])
        for name, p in params.items():
            if name not in grads:
                grads[name] = np.zeros_like(p)
        return grads


# -- single-instance API ----------------------------------------------------------
# Thin unbatched views over the stages above (batch of one, eval mode).

@dataclass(frozen=True)
class EmbeddingBundle:
    """Encoder outputs for one instance; ``None`` where the config does not need a piece."""
    e_x_id: np.ndarray | None
    e_xbar_id: np.ndarray | None
    e_x_hd: np.ndarray | None
    e_xbar_hd: np.ndarray | None
    x_mask: np.ndarray | None
    xbar_mask: np.ndarray | None
    e_r: np.ndarray | None
    e_t: np.ndarray | None
    e_p: np.ndarray | None
    e_sn: np.ndarray | None
    e_sr: np.ndarray | None

    @classmethod
    def from_batch(cls, bundle: dict, i: int = 0) -> "EmbeddingBundle":
        names = [f.name for f in cls.__dataclass_fields__.values()]
        return cls(**{n: (bundle[n][i] if n in bundle else None) for n in names})


@dataclass(frozen=True)
class RmiaOutput:
    probs: np.ndarray
    logits: np.ndarray
    bundle: EmbeddingBundle
    e_bi: np.ndarray | None
    e_te: np.ndarray | None
    h: np.ndarray


def _one(x):
    return None if x is None else np.asarray(x)[None]


def binary_relation(params: dict, e_x_id, e_xbar_id, cfg: RmiaConfig):
    """Returns (x_id_hat [d1, d], xbar_id_hat [d2, d], e_bi [d])."""
    e_x_id, e_xbar_id = np.asarray(e_x_id), np.asarray(e_xbar_id)
    if e_x_id.ndim != 2 or e_xbar_id.ndim != 2 or e_x_id.shape[1] != cfg.d or e_xbar_id.shape[1] != cfg.d:
        raise ShapeMismatch(f"identity embeddings must be [n, {cfg.d}], got {e_x_id.shape} and {e_xbar_id.shape}")
    (hx, hb, e_bi), _ = binary_forward(params, _one(e_x_id), _one(e_xbar_id), cfg)
    return hx[0], hb[0], e_bi[0]


def entity_refinement(params: dict, bundle: EmbeddingBundle, x_id_hat, xbar_id_hat, cfg: RmiaConfig):
    """Returns (x_hat, r_hat, xbar_hat), each [d]."""
    for name in ("e_r", "e_x_hd", "e_xbar_hd", "x_mask", "xbar_mask"):
        if getattr(bundle, name) is None:
            raise MissingComponent(f"bundle lacks {name}")
    b = {n: _one(getattr(bundle, n)) for n in ("e_r", "e_x_hd", "e_xbar_hd", "x_mask", "xbar_mask")}
    out, _ = refine_forward(params, _one(x_id_hat), _one(xbar_id_hat), b, cfg)
    return out["x_hat"][0], out["r_hat"][0], out["xbar_hat"][0]


def ternary_relation(params: dict, x_hat, r_hat, xbar_hat, cfg: RmiaConfig) -> np.ndarray:
    vecs = [np.asarray(v) for v in (x_hat, r_hat, xbar_hat)]
    if any(v.shape != (cfg.d,) for v in vecs):
        raise ShapeMismatch(f"ternary inputs must be [{cfg.d}], got {[v.shape for v in vecs]}")
    e_te, _ = ternary_forward(params, *(v[None] for v in vecs), cfg)
    return e_te[0]


def fuse_and_predict(params: dict, buffers: dict, components: dict, cfg: RmiaConfig):
    """Eval-mode head for one instance; returns (h, logits, probs)."""
    order = [c for c in COMPONENTS if cfg.enabled(c)]
    dims = cfg.component_dims()
    for c in order:
        if c in components and np.shape(components[c]) != (dims[c],):
            raise ShapeMismatch(f"component {c} must be [{dims[c]}], got {np.shape(components[c])}")
    h, logits, _ = fuse_forward(params, buffers, {c: _one(v) for c, v in components.items()}, order, False)
    return h[0], logits[0], ops.softmax(logits)[0]


def rmia_forward(model: RmiaModel, store: ParameterStore, instance: ApprovalInstance) -> RmiaOutput:
    """Encode one instance and compose the stages in eval mode."""
    cfg, P = model.config, store.params
    batch = model.encode([instance])
    raw, _ = encode_forward(P, batch, cfg, model._needs())
    bundle = EmbeddingBundle.from_batch(raw)
    comps = {k[2:]: getattr(bundle, k) for k in ("e_t", "e_p", "e_sn", "e_sr") if getattr(bundle, k) is not None}
    e_bi = e_te = None
    if bundle.e_x_id is not None:
        if cfg.use_bi:
            hx, hb, e_bi = binary_relation(P, bundle.e_x_id, bundle.e_xbar_id, cfg)
            comps["bi"] = e_bi
        else:
            (hx, hb, _), _ = binary_forward(P, _one(bundle.e_x_id), _one(bundle.e_xbar_id), cfg, False)
            hx, hb = hx[0], hb[0]
    if cfg.use_te:
        x_hat, r_hat, xbar_hat = entity_refinement(P, bundle, hx, hb, cfg)
        e_te = comps["te"] = ternary_relation(P, x_hat, r_hat, xbar_hat, cfg)
    elif cfg.use_r:
        r_hat = _lin(P, "res", _one(bundle.e_r))[0][0]
    if cfg.use_r:
        comps["r"] = r_hat
    h, logits, probs = fuse_and_predict(P, store.buffers, comps, cfg)
    return RmiaOutput(probs, logits, bundle, e_bi, e_te, h)
