"""ACFA instance schema, validation, JSONL I/O and dataset splitting.

One :class:`ApprovalInstance` is one step of an access-control approval
flow: an applicant asks for a permission on a resource and a single
approver passes or fails it.  Vocabulary index 0 is reserved in every
categorical field as the out-of-vocabulary bucket, so real IDs start at 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_STATS = 4
AFFINITY_LEVELS = 6


class ValidationError(ValueError):
    def __init__(self, field: str, reason: str, line: int | None = None):
        self.field = field
        self.reason = reason
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field}: {reason}")


class ParseError(ValueError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class InvalidRatios(ValueError):
    pass


@dataclass(frozen=True)
class HistoryRecord:
    counterpart_id: int
    resource_id: int
    decision: int


@dataclass(frozen=True)
class ApplicantProfile:
    identity: tuple[int, ...]
    history: tuple[HistoryRecord, ...] = ()


@dataclass(frozen=True)
class ApproverProfile:
    identity: tuple[int, ...]
    history: tuple[HistoryRecord, ...] = ()


@dataclass(frozen=True)
class ResourceProfile:
    resource_id: int
    permission_type: int
    extra: tuple[int, ...] = ()


@dataclass(frozen=True)
class TextFields:
    reason: str = ""
    description: str = ""
    summary: str = ""


@dataclass(frozen=True)
class HistoryStats:
    """Counts and pass rates, in the fixed order: applicant-resource,
    applicant-resource-approver, applicant total, approver total."""

    counts: tuple[int, ...] = (0, 0, 0, 0)
    rates: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AffinityFeatures:
    affinity_level: int = 0
    same_department: int = 0
    co_meeting: int = 0
    co_business: int = 0


@dataclass(frozen=True)
class ApprovalInstance:
    applicant: ApplicantProfile
    resource: ResourceProfile
    approver: ApproverProfile
    texts: TextFields
    stats: HistoryStats
    affinity: AffinityFeatures
    label: int | None = None
    timestamp: int | None = None


@dataclass(frozen=True)
class FeatureSchema:
    """Vocabulary sizes for every categorical field plus the history length.

    ``applicant_vocab[0]`` / ``approver_vocab[0]`` are the work-number (ID)
    fields; history counterpart IDs are looked up in those vocabularies.
    """

    applicant_vocab: tuple[int, ...]
    approver_vocab: tuple[int, ...]
    resource_vocab: int
    permission_vocab: int
    resource_extra_vocab: tuple[int, ...] = ()
    k: int = 10

    @property
    def d1(self) -> int:
        return len(self.applicant_vocab)

    @property
    def d2(self) -> int:
        return len(self.approver_vocab)

    def to_dict(self) -> dict:
        return {
            "applicant_vocab": list(self.applicant_vocab),
            "approver_vocab": list(self.approver_vocab),
            "resource_vocab": self.resource_vocab,
            "permission_vocab": self.permission_vocab,
            "resource_extra_vocab": list(self.resource_extra_vocab),
            "d1": self.d1,
            "d2": self.d2,
            "k": self.k,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureSchema":
        schema = cls(
            applicant_vocab=tuple(int(v) for v in obj["applicant_vocab"]),
            approver_vocab=tuple(int(v) for v in obj["approver_vocab"]),
            resource_vocab=int(obj["resource_vocab"]),
            permission_vocab=int(obj["permission_vocab"]),
            resource_extra_vocab=tuple(int(v) for v in obj.get("resource_extra_vocab", ())),
            k=int(obj.get("k", 10)),
        )
        if "d1" in obj and int(obj["d1"]) != schema.d1:
            raise ValidationError("d1", f"declared {obj['d1']} but applicant_vocab has {schema.d1} entries")
        if "d2" in obj and int(obj["d2"]) != schema.d2:
            raise ValidationError("d2", f"declared {obj['d2']} but approver_vocab has {schema.d2} entries")
        if schema.k < 1:
            raise ValidationError("k", "history length must be >= 1")
        vocabs = (*schema.applicant_vocab, *schema.approver_vocab, schema.resource_vocab,
                  schema.permission_vocab, *schema.resource_extra_vocab)
        if any(v < 2 for v in vocabs):
            raise ValidationError("vocab", "every vocabulary needs the OOV row plus at least one ID")
        return schema


@dataclass(frozen=True)
class Dataset:
    instances: tuple[ApprovalInstance, ...]
    schema: FeatureSchema

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]

    def labels(self) -> np.ndarray:
        return np.array([inst.label for inst in self.instances], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.instances[i] for i in indices), self.schema)


# -- validation ---------------------------------------------------------------

def _check_id(value, vocab: int, name: str, allow_oov: bool) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ValidationError(name, f"expected an integer ID, got {value!r}")
    if value < 0:
        raise ValidationError(name, f"ID must be non-negative, got {value}")
    if not allow_oov and value >= vocab:
        raise ValidationError(name, f"ID {value} outside vocabulary of size {vocab}")


def _check_flag(value, name: str, upper: int = 1) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or not 0 <= value <= upper:
        raise ValidationError(name, f"expected an integer in [0, {upper}], got {value!r}")


def _check_history(history, schema: FeatureSchema, counterpart_vocab: int, name: str,
                   allow_oov: bool) -> None:
    if len(history) > schema.k:
        raise ValidationError(f"{name}.history", f"{len(history)} records exceed k={schema.k}")
    for j, rec in enumerate(history):
        _check_id(rec.counterpart_id, counterpart_vocab, f"{name}.history[{j}].counterpart_id", allow_oov)
        _check_id(rec.resource_id, schema.resource_vocab, f"{name}.history[{j}].resource_id", allow_oov)
        _check_flag(rec.decision, f"{name}.history[{j}].decision")


def validate_instance(inst: ApprovalInstance, schema: FeatureSchema, *,
                      require_label: bool = True, allow_oov: bool = False) -> None:
    """Raise :class:`ValidationError` naming the first violated field.

    ``allow_oov`` relaxes only the upper vocabulary bound; the encoder then
    maps unknown IDs to the reserved row 0.
    """
    if require_label or inst.label is not None:
        _check_flag(inst.label, "label")

    app = inst.applicant
    if len(app.identity) != schema.d1:
        raise ValidationError("applicant.identity", f"expected {schema.d1} features, got {len(app.identity)}")
    for j, (v, size) in enumerate(zip(app.identity, schema.applicant_vocab)):
        _check_id(v, size, f"applicant.identity[{j}]", allow_oov)
    _check_history(app.history, schema, schema.approver_vocab[0], "applicant", allow_oov)

    res = inst.resource
    _check_id(res.resource_id, schema.resource_vocab, "resource.resource_id", allow_oov)
    _check_id(res.permission_type, schema.permission_vocab, "resource.permission_type", allow_oov)
    if len(res.extra) != len(schema.resource_extra_vocab):
        raise ValidationError("resource.extra", f"expected {len(schema.resource_extra_vocab)} features, "
                                                f"got {len(res.extra)}")
    for j, (v, size) in enumerate(zip(res.extra, schema.resource_extra_vocab)):
        _check_id(v, size, f"resource.extra[{j}]", allow_oov)

    apr = inst.approver
    if len(apr.identity) != schema.d2:
        raise ValidationError("approver.identity", f"expected {schema.d2} features, got {len(apr.identity)}")
    for j, (v, size) in enumerate(zip(apr.identity, schema.approver_vocab)):
        _check_id(v, size, f"approver.identity[{j}]", allow_oov)
    _check_history(apr.history, schema, schema.applicant_vocab[0], "approver", allow_oov)

    for name in ("reason", "description", "summary"):
        text = getattr(inst.texts, name)
        if not isinstance(text, str):
            raise ValidationError(f"texts.{name}", "expected a string")
        try:
            text.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise ValidationError(f"texts.{name}", "not valid UTF-8") from exc

    st = inst.stats
    if len(st.counts) != N_STATS:
        raise ValidationError("counts", f"expected {N_STATS} counts, got {len(st.counts)}")
    if len(st.rates) != N_STATS:
        raise ValidationError("rates", f"expected {N_STATS} rates, got {len(st.rates)}")
    for c in st.counts:
        if isinstance(c, bool) or not isinstance(c, (int, np.integer)) or c < 0:
            raise ValidationError("counts", f"counts must be non-negative integers, got {c!r}")
    for r in st.rates:
        if isinstance(r, bool) or not isinstance(r, (int, float)) or not math.isfinite(r) or not 0.0 <= r <= 1.0:
            raise ValidationError("rates", f"rates must lie in [0, 1], got {r!r}")

    aff = inst.affinity
    _check_flag(aff.affinity_level, "affinity.affinity_level", AFFINITY_LEVELS - 1)
    _check_flag(aff.same_department, "affinity.same_department")
    _check_flag(aff.co_meeting, "affinity.co_meeting")
    _check_flag(aff.co_business, "affinity.co_business")

    if inst.timestamp is not None and (not isinstance(inst.timestamp, int) or inst.timestamp < 0):
        raise ValidationError("timestamp", "expected a non-negative integer")


# -- JSON codec ---------------------------------------------------------------

def _history_to_list(history) -> list[dict]:
    return [{"counterpart_id": r.counterpart_id, "resource_id": r.resource_id, "decision": r.decision}
            for r in history]


def instance_to_dict(inst: ApprovalInstance) -> dict:
    out = {
        "applicant": {"identity": list(inst.applicant.identity),
                      "history": _history_to_list(inst.applicant.history)},
        "resource": {"resource_id": inst.resource.resource_id,
                     "permission_type": inst.resource.permission_type,
                     "extra": list(inst.resource.extra)},
        "approver": {"identity": list(inst.approver.identity),
                     "history": _history_to_list(inst.approver.history)},
        "texts": {"reason": inst.texts.reason, "description": inst.texts.description,
                  "summary": inst.texts.summary},
        "stats": {"counts": list(inst.stats.counts), "rates": list(inst.stats.rates)},
        "affinity": {"affinity_level": inst.affinity.affinity_level,
                     "same_department": inst.affinity.same_department,
                     "co_meeting": inst.affinity.co_meeting,
                     "co_business": inst.affinity.co_business},
    }
    if inst.label is not None:
        out["label"] = inst.label
    if inst.timestamp is not None:
        out["timestamp"] = inst.timestamp
    return out


def _history_from_list(items, name: str) -> tuple[HistoryRecord, ...]:
    if not isinstance(items, list):
        raise ValidationError(f"{name}.history", "expected a list")
    out = []
    for j, rec in enumerate(items):
        if not isinstance(rec, dict):
            raise ValidationError(f"{name}.history[{j}]", "expected an object")
        try:
            out.append(HistoryRecord(rec["counterpart_id"], rec["resource_id"], rec["decision"]))
        except KeyError as exc:
            raise ValidationError(f"{name}.history[{j}].{exc.args[0]}", "missing key") from None
    return tuple(out)


def _section(obj: dict, key: str) -> dict:
    if key not in obj:
        raise ValidationError(key, "missing key")
    value = obj[key]
    if not isinstance(value, dict):
        raise ValidationError(key, "expected an object")
    return value


def _get(section: dict, key: str, name: str, default=...):
    if key in section:
        return section[key]
    if default is ...:
        raise ValidationError(f"{name}.{key}", "missing key")
    return default


def instance_from_dict(obj) -> ApprovalInstance:
    """Build an instance from a decoded JSON object; structure errors raise
    :class:`ValidationError`, value ranges are left to :func:`validate_instance`."""
    if not isinstance(obj, dict):
        raise ValidationError("instance", "expected a JSON object")
    app = _section(obj, "applicant")
    res = _section(obj, "resource")
    apr = _section(obj, "approver")
    texts = _section(obj, "texts")
    stats = _section(obj, "stats")
    aff = _section(obj, "affinity")
    for name, sec, key in (("applicant", app, "identity"), ("approver", apr, "identity"),
                           ("resource", res, "extra"), ("stats", stats, "counts"), ("stats", stats, "rates")):
        if key in sec and not isinstance(sec[key], list):
            raise ValidationError(f"{name}.{key}", "expected a list")
    return ApprovalInstance(
        applicant=ApplicantProfile(tuple(_get(app, "identity", "applicant")),
                                   _history_from_list(app.get("history", []), "applicant")),
        resource=ResourceProfile(_get(res, "resource_id", "resource"), _get(res, "permission_type", "resource"),
                                 tuple(res.get("extra", []))),
        approver=ApproverProfile(tuple(_get(apr, "identity", "approver")),
                                 _history_from_list(apr.get("history", []), "approver")),
        texts=TextFields(texts.get("reason", ""), texts.get("description", ""), texts.get("summary", "")),
        stats=HistoryStats(tuple(_get(stats, "counts", "stats")), tuple(_get(stats, "rates", "stats"))),
        affinity=AffinityFeatures(_get(aff, "affinity_level", "affinity"), _get(aff, "same_department", "affinity"),
                                  _get(aff, "co_meeting", "affinity"), _get(aff, "co_business", "affinity")),
        label=obj.get("label"),
        timestamp=obj.get("timestamp"),
    )


def dumps_instance(inst: ApprovalInstance) -> str:
    return json.dumps(instance_to_dict(inst), ensure_ascii=False, separators=(",", ":"))


def save_dataset(ds: Dataset | Sequence[ApprovalInstance], path: str | Path) -> None:
    instances = ds.instances if isinstance(ds, Dataset) else ds
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(dumps_instance(inst))
            fh.write("\n")


def load_dataset(path: str | Path, schema: FeatureSchema, *, require_label: bool = True) -> Dataset:
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, str(exc)) from None
            try:
                inst = instance_from_dict(obj)
                validate_instance(inst, schema, require_label=require_label)
            except ValidationError as exc:
                raise ValidationError(exc.field, exc.reason, line=lineno) from None
            instances.append(inst)
    return Dataset(tuple(instances), schema)


def save_schema(schema: FeatureSchema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_schema(path: str | Path) -> FeatureSchema:
    return FeatureSchema.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- splitting ----------------------------------------------------------------

def _check_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3:
        raise InvalidRatios(f"expected three ratios, got {len(ratios)}")
    if any(not r > 0 for r in ratios):
        raise InvalidRatios(f"ratios must be positive, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatios(f"ratios must sum to 1, got {sum(ratios)!r}")


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    _check_ratios(ratios)
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_dataset(ds: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0, *,
                  temporal: bool = False) -> tuple[Dataset, Dataset, Dataset]:
    """Random by-instance split; ``temporal=True`` orders by timestamp instead
    so validation and test hold the most recent instances."""
    n_train, n_val, _ = split_sizes(len(ds), ratios)
    if temporal:
        if any(inst.timestamp is None for inst in ds):
            raise ValueError("temporal split needs a timestamp on every instance")
        order = sorted(range(len(ds)), key=lambda i: (ds[i].timestamp, i))
    else:
        order = np.random.default_rng(seed).permutation(len(ds)).tolist()
    return (ds.subset(order[:n_train]),
            ds.subset(order[n_train:n_train + n_val]),
            ds.subset(order[n_train + n_val:]))
