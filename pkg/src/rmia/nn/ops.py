"""Forward/backward pairs for the handful of layers the model needs.

Every ``*_forward`` returns ``(output, cache)`` and never mutates its
arguments; the matching ``*_backward`` takes the upstream gradient and the
cache.  Parameter gradients come back as dicts keyed by local names
(``"W"``, ``"b"``, ...) so callers can prefix them into a registry.
Leading axes are batch axes throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LN_EPS = 1e-5
BN_EPS = 1e-5


class ShapeMismatch(ValueError):
    pass


class AllMasked(ValueError):
    pass


def _finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {where}")


# -- linear -------------------------------------------------------------------

def linear_forward(x, W, b):
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeMismatch(f"linear: x{x.shape} W{W.shape} b{b.shape}")
    # 2-D matmul hits BLAS directly; batched 3-D matmul does not
    y = (x.reshape(-1, x.shape[-1]) @ W.T).reshape(*x.shape[:-1], W.shape[0])
    return y + b, (x, W)


def linear_backward(dy, cache):
    x, W = cache
    dx = (dy.reshape(-1, dy.shape[-1]) @ W).reshape(*dy.shape[:-1], W.shape[1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return dx, {"W": dy2.T @ x2, "b": dy2.sum(axis=0)}


def linear(x, W, b):
    """``y = W x + b`` over the trailing axis."""
    return linear_forward(np.asarray(x), np.asarray(W), np.asarray(b))[0]


# -- activations --------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, cache):
    return dy * cache


# -- layer / batch normalization ----------------------------------------------

def layernorm_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_backward(dy, cache):
    xhat, inv, gamma = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    g = dy * gamma
    dx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, {"gamma": dgamma, "beta": dbeta}


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Batch normalization over axis 0.  In eval mode the running statistics
    are used and the cache marks the op as affine."""
    if train:
        mu = x.mean(axis=0)
        xc = x - mu
        var = (xc * xc).mean(axis=0)
    else:
        mu, var = running_mean, running_var
        xc = x - mu
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma, train, mu, var)


def batchnorm_backward(dy, cache):
    xhat, inv, gamma, train, _, _ = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    g = dy * gamma
    if train:
        dx = inv * (g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0))
    else:
        dx = g * inv
    return dx, {"gamma": dgamma, "beta": dbeta}


def batch_statistics(cache):
    """(mean, biased variance) of the batch a training-mode batchnorm saw."""
    return cache[4], cache[5]


# -- attention ----------------------------------------------------------------

def _split_heads(x, heads):
    B, L, d = x.shape
    return x.reshape(B, L, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def mha_forward(xq, xkv, p, heads: int, key_mask=None):
    """Multi-head scaled dot-product attention.

    ``p`` holds wq/bq/wk/bk/wv/bv/wo/bo.  ``key_mask`` ([B, Lk] bool) removes
    keys; rows whose keys are all masked get uniform weights and must be
    discarded by the caller.
    """
    d = xq.shape[-1]
    if d % heads:
        raise ShapeMismatch(f"model dim {d} not divisible by {heads} heads")
    if xkv.shape[-1] != d:
        raise ShapeMismatch(f"query dim {d} != context dim {xkv.shape[-1]}")
    q, cq = linear_forward(xq, p["wq"], p["bq"])
    k, ck = linear_forward(xkv, p["wk"], p["bk"])
    v, cv = linear_forward(xkv, p["wv"], p["bv"])
    Q, K, V = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = 1.0 / np.sqrt(d // heads)
    S = (Q @ K.transpose(0, 1, 3, 2)) * scale
    if key_mask is not None:
        S = np.where(key_mask[:, None, None, :], S, np.finfo(S.dtype).min / 4)
    A = softmax(S)
    O = _merge_heads(A @ V)
    out, co = linear_forward(O, p["wo"], p["bo"])
    return out, (cq, ck, cv, co, Q, K, V, A, scale, heads)


def mha_backward(dout, cache):
    cq, ck, cv, co, Q, K, V, A, scale, heads = cache
    dO, g_o = linear_backward(dout, co)
    dO = _split_heads(dO, heads)
    dA = dO @ V.transpose(0, 1, 3, 2)
    dV = A.transpose(0, 1, 3, 2) @ dO
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
    dQ = (dS @ K) * scale
    dK = (dS.transpose(0, 1, 3, 2) @ Q) * scale
    dxq, g_q = linear_backward(_merge_heads(dQ), cq)
    dxk, g_k = linear_backward(_merge_heads(dK), ck)
    dxv, g_v = linear_backward(_merge_heads(dV), cv)
    grads = {"wq": g_q["W"], "bq": g_q["b"], "wk": g_k["W"], "bk": g_k["b"],
             "wv": g_v["W"], "bv": g_v["b"], "wo": g_o["W"], "bo": g_o["b"]}
    return dxq, dxk + dxv, grads


def attention_weights(cache):
    """Softmax weights [B, heads, Lq, Lk] from an ``mha_forward`` cache."""
    return cache[7]


# -- transformer blocks -------------------------------------------------------

@dataclass(frozen=True)
class TransformerBlockConfig:
    d: int = 32
    heads: int = 2
    ff: int | None = None  # defaults to 4d
    layers: int = 1

    def __post_init__(self):
        if self.d % self.heads:
            raise ShapeMismatch(f"d={self.d} not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")

    @property
    def ff_dim(self) -> int:
        return self.ff if self.ff is not None else 4 * self.d


def _sub(p, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}


def _ffn_ln(y1, p):
    """Position-wise feed-forward + residual + LayerNorm (second half of a block)."""
    f1, c1 = linear_forward(y1, p["ff1.W"], p["ff1.b"])
    r, cr = relu_forward(f1)
    f2, c2 = linear_forward(r, p["ff2.W"], p["ff2.b"])
    y, cn2 = layernorm_forward(y1 + f2, p["ln2.gamma"], p["ln2.beta"])
    return y, (c1, cr, c2, cn2)


def _ffn_ln_backward(dy, cache, grads):
    c1, cr, c2, cn2 = cache
    dz, g = layernorm_backward(dy, cn2)
    grads["ln2.gamma"], grads["ln2.beta"] = g["gamma"], g["beta"]
    dr, g = linear_backward(dz, c2)
    grads["ff2.W"], grads["ff2.b"] = g["W"], g["b"]
    df1 = relu_backward(dr, cr)
    dy1, g = linear_backward(df1, c1)
    grads["ff1.W"], grads["ff1.b"] = g["W"], g["b"]
    return dz + dy1


def _attn_layer_forward(xq, xkv, p, heads, key_mask):
    a, ca = mha_forward(xq, xkv, _sub(p, "attn."), heads, key_mask)
    y1, cn1 = layernorm_forward(xq + a, p["ln1.gamma"], p["ln1.beta"])
    y, cf = _ffn_ln(y1, p)
    return y, (ca, cn1, cf)


def _attn_layer_backward(dy, cache):
    ca, cn1, cf = cache
    grads = {}
    dy1 = _ffn_ln_backward(dy, cf, grads)
    ds, g = layernorm_backward(dy1, cn1)
    grads["ln1.gamma"], grads["ln1.beta"] = g["gamma"], g["beta"]
    dxq, dxkv, g = mha_backward(ds, ca)
    grads.update({"attn." + k: v for k, v in g.items()})
    return dxq + ds, dxkv, grads


def self_attention_forward(x, p, cfg: TransformerBlockConfig, mask=None):
    """Post-LN transformer encoder stack on ``x`` [B, L, d].

    Masked positions neither attend nor are attended to; their output rows
    are zero.  Parameter keys are ``layer{i}.<name>``.
    """
    if x.ndim != 3 or x.shape[-1] != cfg.d:
        raise ShapeMismatch(f"self-attention expects [B, L, {cfg.d}], got {x.shape}")
    m = None if mask is None else mask.astype(x.dtype)[..., None]
    caches = []
    h = x if m is None else x * m
    for i in range(cfg.layers):
        h, c = _attn_layer_forward(h, h, _sub(p, f"layer{i}."), cfg.heads, mask)
        if m is not None:
            h = h * m
        caches.append(c)
    return h, (caches, m)


def self_attention_backward(dy, cache):
    caches, m = cache
    grads = {}
    dh = dy
    for i in reversed(range(len(caches))):
        if m is not None:
            dh = dh * m
        dxq, dxkv, g = _attn_layer_backward(dh, caches[i])
        grads.update({f"layer{i}." + k: v for k, v in g.items()})
        dh = dxq + dxkv
    if m is not None:
        dh = dh * m
    return dh, grads


def cross_attention_forward(query, context, p, cfg: TransformerBlockConfig):
    """Cross-attention stack: queries from ``query`` [B, Lq, d], keys and
    values from ``context`` [B, Lc, d]; residual runs on the query path."""
    if query.ndim != 3 or context.ndim != 3 or query.shape[-1] != cfg.d or context.shape[-1] != cfg.d:
        raise ShapeMismatch(f"cross-attention expects [B, L, {cfg.d}], got {query.shape} and {context.shape}")
    if query.shape[0] != context.shape[0]:
        raise ShapeMismatch("query and context batch sizes differ")
    caches = []
    h = query
    for i in range(cfg.layers):
        h, c = _attn_layer_forward(h, context, _sub(p, f"layer{i}."), cfg.heads, None)
        caches.append(c)
    return h, caches


def cross_attention_backward(dy, caches):
    grads = {}
    dh = dy
    dctx = 0.0
    for i in reversed(range(len(caches))):
        dxq, dxkv, g = _attn_layer_backward(dh, caches[i])
        grads.update({f"layer{i}." + k: v for k, v in g.items()})
        dh = dxq
        dctx = dctx + dxkv
    return dh, dctx, grads


# -- pooling and loss ---------------------------------------------------------

def masked_mean_forward(x, mask=None):
    """Mean over axis -2 of [B, L, d]; rows with no valid position give zeros."""
    if mask is None:
        return x.mean(axis=-2), (x.shape, None, None)
    m = mask.astype(x.dtype)
    cnt = np.maximum(m.sum(axis=-1, keepdims=True), 1.0)
    return (x * m[..., None]).sum(axis=-2) / cnt, (x.shape, m, cnt)


def masked_mean_backward(dy, cache):
    shape, m, cnt = cache
    if m is None:
        return np.broadcast_to(dy[..., None, :] / shape[-2], shape).copy()
    return (dy / cnt)[..., None, :] * m[..., None]


def mean_pool(seq, mask=None):
    """Arithmetic mean over the unmasked rows of ``seq`` [L, d]."""
    seq = np.asarray(seq)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise AllMasked("mean_pool needs at least one unmasked row")
        return seq[mask].mean(axis=0)
    if seq.shape[0] == 0:
        raise AllMasked("mean_pool of an empty sequence")
    return seq.mean(axis=0)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns ``(loss, probs, dlogits)`` with the log-sum-exp form for stability;
    ``dlogits`` is the gradient of the mean loss.
    """
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    probs = np.exp(logp)
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), probs, dlogits / n


# -- single-sequence conveniences ---------------------------------------------

def self_attention_block(seq, mask, p, cfg: TransformerBlockConfig):
    """Unbatched self-attention stack on ``seq`` [L, d]."""
    seq = np.asarray(seq)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ShapeMismatch(f"expected [L, d] with L >= 1, got {seq.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (seq.shape[0],):
            raise ShapeMismatch(f"mask shape {mask.shape} != ({seq.shape[0]},)")
        if not mask.any():
            raise AllMasked("self-attention needs at least one unmasked position")
        mask = mask[None]
    out, _ = self_attention_forward(seq[None], p, cfg, mask)
    return out[0]


def cross_attention_block(query, context, p, cfg: TransformerBlockConfig):
    """Unbatched cross-attention stack: ``query`` [Lq, d] over ``context`` [Lc, d]."""
    query, context = np.asarray(query), np.asarray(context)
    if query.ndim != 2 or context.ndim != 2 or query.shape[0] < 1 or context.shape[0] < 1:
        raise ShapeMismatch(f"expected non-empty [L, d] inputs, got {query.shape} and {context.shape}")
    out, _ = cross_attention_forward(query[None], context[None], p, cfg)
    return out[0]
