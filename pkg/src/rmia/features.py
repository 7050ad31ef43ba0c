"""Feature encoding: raw instances -> embedding-table indices -> embeddings.

Encoding is split in two stages.  :func:`encode_dataset` turns instances
into integer index arrays (plus the frozen text vectors and normalized
rates) once; the model then gathers rows of the embedding table ``E`` from
those indices on every forward pass.  The single-instance functions below
(``encode_identity`` and friends) run the same two stages for one instance
and are what the tests compare the batched path against.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .data import AFFINITY_LEVELS, N_STATS, ApprovalInstance, FeatureSchema, HistoryRecord

DEFAULT_BIN_EDGES = (1, 2, 4, 8, 16)
_TOKEN = re.compile(r"[^\W_]+")


class OutOfVocabulary(ValueError):
    pass


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    text_dim: int = 64
    hash_seed: int = 0
    bin_edges: tuple[int, ...] = DEFAULT_BIN_EDGES
    oov_bucketing: bool = True

    @property
    def n_bins(self) -> int:
        return len(self.bin_edges) + 1

    def to_dict(self) -> dict:
        return {"text_dim": self.text_dim, "hash_seed": self.hash_seed, "bin_edges": list(self.bin_edges),
                "oov_bucketing": self.oov_bucketing}

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        return cls(int(obj.get("text_dim", 64)), int(obj.get("hash_seed", 0)),
                   tuple(int(e) for e in obj.get("bin_edges", DEFAULT_BIN_EDGES)),
                   bool(obj.get("oov_bucketing", True)))


class TextEncoder(Protocol):
    dim: int

    def encode(self, text: str) -> np.ndarray: ...


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def token_bucket(token: str, dim: int, seed: int = 0) -> int:
    digest = hashlib.blake2b(f"{seed}:{token}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


class HashingTextEncoder:
    """Frozen bag-of-tokens encoder: hashed token counts, L2-normalized.

    The empty string (or one with no tokens) maps to the zero vector.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._encode = lru_cache(maxsize=65536)(self._encode_uncached)

    def _encode_uncached(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in tokenize(text):
            vec[token_bucket(tok, self.dim, self.seed)] += 1.0
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        vec.setflags(write=False)
        return vec

    def encode(self, text: str) -> np.ndarray:
        return self._encode(text)


def count_bin(count: int, edges: Sequence[int] = DEFAULT_BIN_EDGES) -> int:
    """Bin index of a non-negative count; default bins {0},{1},{2-3},{4-7},{8-15},{16+}."""
    if count < 0:
        raise RangeError(f"count must be non-negative, got {count}")
    b = 0
    for e in edges:
        if count >= e:
            b += 1
    return b


def normalize_rate(rate: float) -> float:
    """ln(1 + x) / ln 2, mapping [0, 1] onto [0, 1]."""
    if not 0.0 <= rate <= 1.0:
        raise RangeError(f"rate must lie in [0, 1], got {rate}")
    return math.log1p(rate) / math.log(2.0)


@dataclass(frozen=True)
class TableLayout:
    """Row offsets of every categorical field inside the shared table ``E``.

    History counterpart IDs reuse the other side's work-number slice and
    history resource IDs reuse the resource-ID slice.
    """

    schema: FeatureSchema
    n_bins: int = len(DEFAULT_BIN_EDGES) + 1
    offsets: dict = field(init=False, compare=False)
    sizes: dict = field(init=False, compare=False)
    total: int = field(init=False, compare=False)

    def __post_init__(self):
        s = self.schema
        fields = [(f"applicant.{j}", v) for j, v in enumerate(s.applicant_vocab)]
        fields += [(f"approver.{j}", v) for j, v in enumerate(s.approver_vocab)]
        fields += [("resource_id", s.resource_vocab), ("permission_type", s.permission_vocab)]
        fields += [(f"resource_extra.{j}", v) for j, v in enumerate(s.resource_extra_vocab)]
        fields += [("decision", 2), ("affinity_level", AFFINITY_LEVELS), ("same_department", 2),
                   ("co_meeting", 2), ("co_business", 2)]
        fields += [(f"count_bin.{j}", self.n_bins) for j in range(N_STATS)]
        offsets, sizes, pos = {}, {}, 0
        for name, size in fields:
            offsets[name] = pos
            sizes[name] = size
            pos += size
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "total", pos)

    @property
    def n_resource_fields(self) -> int:
        return 2 + len(self.schema.resource_extra_vocab)

    def row(self, field_name: str, value: int, oov: bool = True) -> int:
        size = self.sizes[field_name]
        if value >= size or value < 0:
            if not oov:
                raise OutOfVocabulary(f"{field_name}: ID {value} outside vocabulary of size {size}")
            value = 0
        return self.offsets[field_name] + value

    def field_slice(self, field_name: str) -> slice:
        o = self.offsets[field_name]
        return slice(o, o + self.sizes[field_name])


@dataclass(frozen=True)
class EncodedBatch:
    """Index/feature arrays for a batch; every array has leading dim B."""

    app_id: np.ndarray    # [B, d1] rows of E
    apr_id: np.ndarray    # [B, d2]
    app_hist: np.ndarray  # [B, k, 3] rows: resource, counterpart, decision
    app_mask: np.ndarray  # [B, k] bool
    apr_hist: np.ndarray
    apr_mask: np.ndarray
    res: np.ndarray       # [B, 2 + n_extra]
    text: np.ndarray      # [B, 3 * D_t] frozen encoder output
    aff: np.ndarray       # [B, 4]
    cnt: np.ndarray       # [B, 4]
    rates: np.ndarray     # [B, 4] log-normalized
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.app_id.shape[0]

    def take(self, idx) -> "EncodedBatch":
        return EncodedBatch(**{k: (None if v is None else v[idx]) for k, v in self.__dict__.items()})

    @staticmethod
    def concat(batches: Sequence["EncodedBatch"]) -> "EncodedBatch":
        first = batches[0]
        out = {}
        for k, v in first.__dict__.items():
            out[k] = None if v is None else np.concatenate([getattr(b, k) for b in batches])
        return EncodedBatch(**out)


def _history_rows(history: Sequence[HistoryRecord], layout: TableLayout, counterpart_field: str, k: int,
                  oov: bool) -> tuple[np.ndarray, np.ndarray]:
    if len(history) > k:
        raise ValueError(f"history of length {len(history)} exceeds k={k}")
    rows = np.zeros((k, 3), dtype=np.int64)
    mask = np.zeros(k, dtype=bool)
    for j, rec in enumerate(history):
        rows[j] = (layout.row("resource_id", rec.resource_id, oov),
                   layout.row(counterpart_field, rec.counterpart_id, oov),
                   layout.row("decision", rec.decision, False))
        mask[j] = True
    return rows, mask


def identity_rows(identity: Sequence[int], layout: TableLayout, which: str, oov: bool = True) -> np.ndarray:
    return np.array([layout.row(f"{which}.{j}", v, oov) for j, v in enumerate(identity)], dtype=np.int64)


def encode_dataset(instances: Sequence[ApprovalInstance], layout: TableLayout, text_encoder: TextEncoder,
                   enc_cfg: EncoderConfig = EncoderConfig()) -> EncodedBatch:
    """Index arrays for a sequence of instances (labels kept if all present)."""
    s = layout.schema
    n, k = len(instances), s.k
    oov = enc_cfg.oov_bucketing
    app_id = np.zeros((n, s.d1), dtype=np.int64)
    apr_id = np.zeros((n, s.d2), dtype=np.int64)
    app_hist = np.zeros((n, k, 3), dtype=np.int64)
    apr_hist = np.zeros((n, k, 3), dtype=np.int64)
    app_mask = np.zeros((n, k), dtype=bool)
    apr_mask = np.zeros((n, k), dtype=bool)
    res = np.zeros((n, layout.n_resource_fields), dtype=np.int64)
    text = np.zeros((n, 3 * text_encoder.dim))
    aff = np.zeros((n, 4), dtype=np.int64)
    cnt = np.zeros((n, N_STATS), dtype=np.int64)
    rates = np.zeros((n, N_STATS))
    labels = np.zeros(n, dtype=np.int64)
    have_labels = True
    for i, inst in enumerate(instances):
        app_id[i] = identity_rows(inst.applicant.identity, layout, "applicant", oov)
        apr_id[i] = identity_rows(inst.approver.identity, layout, "approver", oov)
        app_hist[i], app_mask[i] = _history_rows(inst.applicant.history, layout, "approver.0", k, oov)
        apr_hist[i], apr_mask[i] = _history_rows(inst.approver.history, layout, "applicant.0", k, oov)
        res[i] = resource_rows(inst.resource, layout, oov)
        text[i] = text_vector(inst, text_encoder)
        aff[i] = affinity_rows(inst.affinity, layout)
        cnt[i] = [layout.row(f"count_bin.{j}", count_bin(c, enc_cfg.bin_edges), False)
                  for j, c in enumerate(inst.stats.counts)]
        rates[i] = [normalize_rate(r) for r in inst.stats.rates]
        if inst.label is None:
            have_labels = False
        else:
            labels[i] = inst.label
    return EncodedBatch(app_id, apr_id, app_hist, app_mask, apr_hist, apr_mask, res, text, aff, cnt, rates,
                        labels if have_labels else None)


def resource_rows(r, layout: TableLayout, oov: bool = True) -> np.ndarray:
    rows = [layout.row("resource_id", r.resource_id, oov), layout.row("permission_type", r.permission_type, oov)]
    rows += [layout.row(f"resource_extra.{j}", v, oov) for j, v in enumerate(r.extra)]
    return np.array(rows, dtype=np.int64)


def affinity_rows(a, layout: TableLayout) -> np.ndarray:
    return np.array([layout.row("affinity_level", a.affinity_level, False),
                     layout.row("same_department", a.same_department, False),
                     layout.row("co_meeting", a.co_meeting, False),
                     layout.row("co_business", a.co_business, False)], dtype=np.int64)


def text_vector(inst: ApprovalInstance, text_encoder: TextEncoder) -> np.ndarray:
    t = inst.texts
    return np.concatenate([text_encoder.encode(t.reason), text_encoder.encode(t.description),
                           text_encoder.encode(t.summary)])


# -- single-instance encoders -------------------------------------------------

def encode_identity(identity: Sequence[int], E: np.ndarray, layout: TableLayout, which: str,
                    oov: bool = True) -> np.ndarray:
    """Rows of ``E`` for each identity feature; ``which`` is 'applicant' or 'approver'."""
    if which not in ("applicant", "approver"):
        raise ValueError(f"which must be 'applicant' or 'approver', got {which!r}")
    return E[identity_rows(identity, layout, which, oov)]


def encode_history(history: Sequence[HistoryRecord], E: np.ndarray, W_h: np.ndarray, b_h: np.ndarray,
                   layout: TableLayout, which: str, oov: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Project each (resource, counterpart, decision) record 3d -> d; pad to k
    zero rows.  Returns ``(rows [k, d], mask [k])``."""
    counterpart = "approver.0" if which == "applicant" else "applicant.0"
    rows, mask = _history_rows(history, layout, counterpart, layout.schema.k, oov)
    d = E.shape[1]
    cat = E[rows].reshape(layout.schema.k, 3 * d)
    if W_h.shape != (d, 3 * d):
        raise ValueError(f"history projection must be [{d}, {3 * d}], got {W_h.shape}")
    return (cat @ W_h.T + b_h) * mask[:, None], mask


def encode_text(texts, enc: TextEncoder, W1: np.ndarray, b1: np.ndarray) -> np.ndarray:
    T = np.concatenate([enc.encode(texts.reason), enc.encode(texts.description), enc.encode(texts.summary)])
    return W1 @ T.astype(W1.dtype) + b1


def encode_affinity(aff, E: np.ndarray, layout: TableLayout) -> np.ndarray:
    return E[affinity_rows(aff, layout)].reshape(-1)


def encode_count_stats(counts: Sequence[int], E: np.ndarray, layout: TableLayout,
                       edges: Sequence[int] = DEFAULT_BIN_EDGES) -> np.ndarray:
    rows = [layout.row(f"count_bin.{j}", count_bin(c, edges), False) for j, c in enumerate(counts)]
    return E[rows].reshape(-1)


def encode_rate_stats(rates: Sequence[float], W_s: np.ndarray, b_s: np.ndarray) -> np.ndarray:
    x = np.array([normalize_rate(r) for r in rates], dtype=W_s.dtype)
    return W_s @ x + b_s


def encode_resource(resource, E: np.ndarray, layout: TableLayout, W_r: np.ndarray,
                    b_r: np.ndarray) -> np.ndarray:
    """Concatenated resource-field lookups mapped to d by one linear layer."""
    return W_r @ E[resource_rows(resource, layout)].reshape(-1) + b_r
