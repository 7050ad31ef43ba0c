"""Synthetic ACFA worlds with a known ground-truth approval oracle.

The oracle mixes a binary applicant-approver signal (affinity level, same
department) with an XOR-style applicant-resource-approver interaction, so a
purely additive model cannot reach the Bayes ranking.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import (
    AffinityFeatures,
    ApplicantProfile,
    ApprovalInstance,
    ApproverProfile,
    Dataset,
    FeatureSchema,
    HistoryRecord,
    HistoryStats,
    ResourceProfile,
    TextFields,
)

HIGH_AFFINITY = 3
TEXT_TIERS = ("fuzzy", "general", "business")

# applicant identity: work number, position, department, employee category, location, grade
N_POSITIONS = 8
EMPLOYEE_CATEGORIES = ("regular", "intern", "outsourced")
N_LOCATIONS = 4
N_GRADES = 6
# approver identity: work number, role, department, level, location
APPROVER_ROLES = ("supervisor", "resource_owner")
N_APPROVER_LEVELS = 5
PERMISSION_TYPES = ("functional", "role")
N_SENSITIVITY = 3

_REASONS = {
    "fuzzy": ("application for permissions", "work needs", "need access", "please approve",
              "routine request", "requesting permission"),
    "general": ("data analysis", "viewing data", "report checking", "query statistics",
                "dashboard review", "metric lookup"),
    "business": ("development requirements for the {dept} launch", "business integration for project {proj}",
                 "campaign deployment for the {dept} team", "settlement reconciliation for project {proj}",
                 "release pipeline maintenance for project {proj}", "risk model iteration for {dept}"),
}
_SUMMARIES = ("renewal of an existing permission", "new permission request", "temporary access", "")
_DEPT_NAMES = ("finance", "logistics", "marketing", "platform", "security", "sales", "legal", "research",
               "support", "growth")


class InvalidConfig(ValueError):
    pass


class UnknownEntity(KeyError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_departments: int = 5
    n_applicants: int = 200
    n_approvers: int = 50
    n_resources: int = 100
    cross_common: int = 3  # extra common resources borrowed from other departments
    k: int = 10
    # approver scope: "department" (the approver department's common set) or
    # "groups" (a few latent resource groups per approver, independent of department)
    scope: str = "groups"
    n_resource_groups: int = 10
    scope_groups: int = 2

    def validate(self) -> None:
        for name in ("n_departments", "n_applicants", "n_approvers", "n_resources", "k"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.cross_common < 0:
            raise InvalidConfig("cross_common must be >= 0")
        if self.scope not in ("department", "groups"):
            raise InvalidConfig(f"scope must be 'department' or 'groups', got {self.scope!r}")
        if self.scope == "groups" and not 1 <= self.scope_groups <= self.n_resource_groups:
            raise InvalidConfig("need 1 <= scope_groups <= n_resource_groups")


@dataclass(frozen=True)
class OracleParams:
    beta0: float = -5.5
    beta_affinity: float = 5.0
    beta_same_dept: float = 1.0
    beta_common_resource: float = 3.0
    beta_ternary: float = 4.0
    noise_std: float = 0.05
    beta_business_text: float = 0.3

    def __post_init__(self):
        if not self.noise_std >= 0:
            raise InvalidConfig(f"noise_std must be >= 0, got {self.noise_std}")

    def without_ternary(self) -> "OracleParams":
        return OracleParams(**{**asdict(self), "beta_ternary": 0.0})


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    config: WorldConfig
    rng_seed: int
    applicant_dept: np.ndarray      # [n_applicants]
    applicant_identity: np.ndarray  # [n_applicants, 6], 1-based IDs
    approver_dept: np.ndarray
    approver_identity: np.ndarray   # [n_approvers, 5]
    resource_dept: np.ndarray       # owning department
    resource_permission: np.ndarray  # 1-based permission type
    resource_sensitivity: np.ndarray  # 1-based
    affinity: np.ndarray            # [n_applicants, n_approvers] level 0..5
    co_meeting: np.ndarray
    co_business: np.ndarray
    common: np.ndarray              # [n_departments, n_resources] bool
    resource_group: np.ndarray      # latent group per resource (never observed)
    approver_scope: np.ndarray      # [n_approvers, n_resources] bool

    @property
    def departments(self) -> int:
        return self.config.n_departments

    def schema(self) -> FeatureSchema:
        c = self.config
        return FeatureSchema(
            applicant_vocab=(c.n_applicants + 1, N_POSITIONS + 1, c.n_departments + 1,
                             len(EMPLOYEE_CATEGORIES) + 1, N_LOCATIONS + 1, N_GRADES + 1),
            approver_vocab=(c.n_approvers + 1, len(APPROVER_ROLES) + 1, c.n_departments + 1,
                            N_APPROVER_LEVELS + 1, N_LOCATIONS + 1),
            resource_vocab=c.n_resources + 1,
            permission_vocab=len(PERMISSION_TYPES) + 1,
            resource_extra_vocab=(c.n_departments + 1, N_SENSITIVITY + 1),
            k=c.k,
        )

    def common_resources(self, dept: int) -> np.ndarray:
        return np.flatnonzero(self.common[dept])

    def structurally_equal(self, other: "SyntheticWorld") -> bool:
        if self.config != other.config or self.rng_seed != other.rng_seed:
            return False
        names = ("applicant_dept", "applicant_identity", "approver_dept", "approver_identity", "resource_dept",
                 "resource_permission", "resource_sensitivity", "affinity", "co_meeting", "co_business", "common",
                 "resource_group", "approver_scope")
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)


def _dept_distance(a, b, n: int):
    diff = np.abs(np.asarray(a) - np.asarray(b))
    return np.minimum(diff, n - diff)


def generate_world(config: WorldConfig = WorldConfig(), seed: int = 0) -> SyntheticWorld:
    config.validate()
    rng = np.random.default_rng([seed, 0x57])
    D = config.n_departments

    # round-robin first so every department has people, then shuffle
    app_dept = rng.permutation(np.arange(config.n_applicants) % D)
    apr_dept = rng.permutation(np.arange(config.n_approvers) % D)
    res_dept = rng.permutation(np.arange(config.n_resources) % D)

    app_identity = np.stack([
        np.arange(1, config.n_applicants + 1),
        rng.integers(1, N_POSITIONS + 1, config.n_applicants),
        app_dept + 1,
        rng.choice(np.arange(1, len(EMPLOYEE_CATEGORIES) + 1), config.n_applicants, p=[0.6, 0.15, 0.25]),
        rng.integers(1, N_LOCATIONS + 1, config.n_applicants),
        rng.integers(1, N_GRADES + 1, config.n_applicants),
    ], axis=1).astype(np.int64)
    apr_identity = np.stack([
        np.arange(1, config.n_approvers + 1),
        rng.integers(1, len(APPROVER_ROLES) + 1, config.n_approvers),
        apr_dept + 1,
        rng.integers(1, N_APPROVER_LEVELS + 1, config.n_approvers),
        rng.integers(1, N_LOCATIONS + 1, config.n_approvers),
    ], axis=1).astype(np.int64)

    res_perm = rng.integers(1, len(PERMISSION_TYPES) + 1, config.n_resources)
    res_sens = rng.integers(1, N_SENSITIVITY + 1, config.n_resources)

    # affinity depends on the pair only through the department distance and a
    # pair-level interaction term, both symmetric in (applicant, approver)
    dist = _dept_distance(app_dept[:, None], apr_dept[None, :], D)
    base = 3.2 - 1.3 * dist
    interaction = rng.normal(0.0, 1.1, size=dist.shape)
    affinity = np.clip(np.rint(base + interaction), 0, 5).astype(np.int64)
    meet_p = 0.1 + 0.13 * affinity
    co_meeting = (rng.random(dist.shape) < meet_p).astype(np.int64)
    co_business = (rng.random(dist.shape) < 0.5 * meet_p + 0.2 * (dist == 0)).astype(np.int64)

    common = np.zeros((D, config.n_resources), dtype=bool)
    for d in range(D):
        owned = np.flatnonzero(res_dept == d)
        # a department does not necessarily use everything it owns
        keep = owned[rng.random(owned.size) < 0.7]
        if keep.size == 0:
            keep = owned[:1] if owned.size else rng.integers(0, config.n_resources, 1)
        common[d, keep] = True
        others = np.flatnonzero(res_dept != d)
        if others.size and config.cross_common:
            common[d, rng.choice(others, min(config.cross_common, others.size), replace=False)] = True

    res_group = rng.permutation(np.arange(config.n_resources) % config.n_resource_groups)
    if config.scope == "department":
        scope = common[apr_dept].copy()
    else:
        scope = np.zeros((config.n_approvers, config.n_resources), dtype=bool)
        for b in range(config.n_approvers):
            groups = rng.choice(config.n_resource_groups, config.scope_groups, replace=False)
            scope[b] = np.isin(res_group, groups)

    return SyntheticWorld(config, seed, app_dept, app_identity, apr_dept, apr_identity, res_dept, res_perm,
                          res_sens, affinity, co_meeting, co_business, common, res_group, scope)


def _logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _check_entity(index: int, size: int, kind: str) -> int:
    if isinstance(index, bool) or not 0 <= int(index) < size:
        raise UnknownEntity(f"{kind} {index} not in world (size {size})")
    return int(index)


def oracle_terms(world: SyntheticWorld, applicant: int, resource: int, approver: int) -> dict:
    """Indicator/level terms entering the oracle logit, with 0-based entity indices."""
    a = _check_entity(applicant, world.config.n_applicants, "applicant")
    r = _check_entity(resource, world.config.n_resources, "resource")
    b = _check_entity(approver, world.config.n_approvers, "approver")
    level = int(world.affinity[a, b])
    high = level >= HIGH_AFFINITY
    in_scope = bool(world.approver_scope[b, r])
    return {
        "level": level,
        "same_dept": int(world.applicant_dept[a] == world.approver_dept[b]),
        "common_resource": int(world.common[world.applicant_dept[a], r]),
        "ternary": int(high != in_scope),
    }


def oracle_logit(world, applicant, resource, approver, params: OracleParams, text_tier: str | None = None) -> float:
    t = oracle_terms(world, applicant, resource, approver)
    z = (params.beta0 + params.beta_affinity * t["level"] / 5.0 + params.beta_same_dept * t["same_dept"]
         + params.beta_common_resource * t["common_resource"] + params.beta_ternary * t["ternary"])
    if text_tier == "business":
        z += params.beta_business_text
    return z


def oracle_probability(world, applicant, resource, approver, params: OracleParams = OracleParams(),
                       text_tier: str | None = None) -> float:
    """Ground-truth pass probability; strictly inside (0, 1) for finite logits."""
    p = _logistic(oracle_logit(world, applicant, resource, approver, params, text_tier))
    return min(max(p, 5e-324), 1.0 - 2.0 ** -53)


def text_tier(reason: str) -> str:
    """Recover the specificity tier of a generated application reason."""
    low = reason.lower()
    for tier in ("business", "general", "fuzzy"):
        for template in _REASONS[tier]:
            stem = template.split("{")[0].strip()
            if low.startswith(stem):
                return tier
    return "fuzzy"


def _make_texts(rng: np.random.Generator, world: SyntheticWorld, a: int, r: int, tier: str) -> TextFields:
    templates = _REASONS[tier]
    reason = templates[int(rng.integers(len(templates)))]
    dept_name = _DEPT_NAMES[int(world.applicant_dept[a]) % len(_DEPT_NAMES)]
    reason = reason.format(dept=dept_name, proj=int(rng.integers(1, 40)))
    perm = PERMISSION_TYPES[int(world.resource_permission[r]) - 1]
    owner = _DEPT_NAMES[int(world.resource_dept[r]) % len(_DEPT_NAMES)]
    description = f"{perm} permission on {owner} resource {r + 1}"
    summary = _SUMMARIES[int(rng.integers(len(_SUMMARIES)))]
    return TextFields(reason, description, summary)


def _stats_from_history(app_hist, apr_hist, resource_id: int, approver_id: int) -> HistoryStats:
    subsets = (
        [rec for rec in app_hist if rec.resource_id == resource_id],
        [rec for rec in app_hist if rec.resource_id == resource_id and rec.counterpart_id == approver_id],
        list(app_hist),
        list(apr_hist),
    )
    counts = tuple(len(s) for s in subsets)
    rates = tuple(sum(rec.decision for rec in s) / len(s) if s else 0.0 for s in subsets)
    return HistoryStats(counts, rates)


@dataclass
class GroundTruth:
    """Per-instance oracle probabilities and the generating event indices."""

    probability: np.ndarray
    probability_without_ternary: np.ndarray
    tiers: list = field(default_factory=list)


def generate_labeled(world: SyntheticWorld, params: OracleParams = OracleParams(), n: int = 1000, seed: int = 0,
                     *, balanced: bool = False, warmup: int | None = None,
                     p_common_request: float = 0.6, p_own_dept_approver: float = 0.5,
                     tier_probs=(0.35, 0.35, 0.30)) -> tuple[Dataset, GroundTruth]:
    """Simulate an approval event stream and emit ``n`` instances after warm-up.

    Histories hold the most recent ``k`` decisions before each event, so the
    statistics never see the current outcome.
    """
    if n < 1:
        raise InvalidConfig(f"n must be >= 1, got {n}")
    cfg = world.config
    k = cfg.k
    rng = np.random.default_rng([seed, 0xA5])
    if warmup is None:
        warmup = cfg.n_applicants * k // 2
    approvers_by_dept = [np.flatnonzero(world.approver_dept == d) for d in range(cfg.n_departments)]
    all_approvers = np.arange(cfg.n_approvers)
    approvers_by_scope = [np.flatnonzero(world.approver_scope[:, r]) for r in range(cfg.n_resources)]
    common_by_dept = [world.common_resources(d) for d in range(cfg.n_departments)]
    app_log = [deque(maxlen=k) for _ in range(cfg.n_applicants)]
    apr_log = [deque(maxlen=k) for _ in range(cfg.n_approvers)]

    want = {0: n // 2, 1: n - n // 2} if balanced else None
    instances, probs, probs_nt, tiers = [], [], [], []
    event = 0
    max_events = warmup + 200 * n
    while len(instances) < n:
        if event >= max_events:
            raise InvalidConfig("could not reach the requested class balance")
        a = int(rng.integers(cfg.n_applicants))
        dept = int(world.applicant_dept[a])
        if rng.random() < p_common_request and common_by_dept[dept].size:
            r = int(rng.choice(common_by_dept[dept]))
        else:
            r = int(rng.integers(cfg.n_resources))
        # supervisor route (own department) or owner route (scope covers r)
        pool = approvers_by_dept[dept] if rng.random() < p_own_dept_approver else approvers_by_scope[r]
        if pool.size == 0:
            pool = all_approvers
        b = int(rng.choice(pool))
        tier = TEXT_TIERS[int(rng.choice(3, p=tier_probs))]
        texts = _make_texts(rng, world, a, r, tier)

        p = oracle_probability(world, a, r, b, params, tier)
        noisy = p + (rng.normal(0.0, params.noise_std) if params.noise_std > 0 else 0.0)
        noisy = min(max(noisy, 1e-6), 1.0 - 1e-6)
        y = int(rng.random() < noisy)

        app_id, res_id, apr_id = a + 1, r + 1, b + 1
        if event >= warmup and (want is None or want[y] > 0):
            app_hist = tuple(reversed(app_log[a]))
            apr_hist = tuple(reversed(apr_log[b]))
            inst = ApprovalInstance(
                applicant=ApplicantProfile(tuple(int(v) for v in world.applicant_identity[a]), app_hist),
                resource=ResourceProfile(res_id, int(world.resource_permission[r]),
                                         (int(world.resource_dept[r]) + 1, int(world.resource_sensitivity[r]))),
                approver=ApproverProfile(tuple(int(v) for v in world.approver_identity[b]), apr_hist),
                texts=texts,
                stats=_stats_from_history(app_hist, apr_hist, res_id, apr_id),
                affinity=AffinityFeatures(int(world.affinity[a, b]),
                                          int(world.applicant_dept[a] == world.approver_dept[b]),
                                          int(world.co_meeting[a, b]), int(world.co_business[a, b])),
                label=y,
                timestamp=event,
            )
            instances.append(inst)
            probs.append(p)
            probs_nt.append(oracle_probability(world, a, r, b, params.without_ternary(), tier))
            tiers.append(tier)
            if want is not None:
                want[y] -= 1
        app_log[a].append(HistoryRecord(apr_id, res_id, y))
        apr_log[b].append(HistoryRecord(app_id, res_id, y))
        event += 1

    truth = GroundTruth(np.array(probs), np.array(probs_nt), tiers)
    return Dataset(tuple(instances), world.schema()), truth


def generate_instances(world: SyntheticWorld, params: OracleParams = OracleParams(), n: int = 1000,
                       seed: int = 0, **kwargs) -> Dataset:
    return generate_labeled(world, params, n, seed, **kwargs)[0]
