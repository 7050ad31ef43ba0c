from dataclasses import replace

import numpy as np
import pytest

from rmia.data import (
    AffinityFeatures,
    ApplicantProfile,
    ApprovalInstance,
    ApproverProfile,
    FeatureSchema,
    HistoryRecord,
    HistoryStats,
    ResourceProfile,
    TextFields,
)
from rmia.synth import OracleParams, WorldConfig, generate_labeled, generate_world

TINY_WORLD = WorldConfig(n_departments=3, n_applicants=24, n_approvers=9, n_resources=18, cross_common=2, k=4,
                         n_resource_groups=6, scope_groups=2)

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.fixture(scope="session")
def tiny_world():
    return generate_world(TINY_WORLD, 3)


@pytest.fixture(scope="session")
def tiny_data(tiny_world):
    ds, truth = generate_labeled(tiny_world, OracleParams(), 400, 5)
    return ds, truth


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test decides")
    config.addinivalue_line("markers", "slow: long-running end-to-end test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        detail = getattr(item, "criterion_detail", "")
        _CRITERIA[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {status}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


def random_params(store, scale=0.1, seed=0):
    """Perturb every parameter so zero-initialized biases are exercised."""
    rng = np.random.default_rng(seed)
    for v in store.params.values():
        v += rng.normal(0.0, scale, v.shape).astype(v.dtype)
    return store


# d1 = d2 = 2, k = 2: the tiny configuration used by the gradient suite
TINY_SCHEMA = FeatureSchema(applicant_vocab=(6, 3), approver_vocab=(5, 3), resource_vocab=5, permission_vocab=3,
                            resource_extra_vocab=(3,), k=2)

_WORDS = ("access", "project", "report", "urgent", "data", "review", "team", "quarterly")


def random_instance(schema: FeatureSchema, rng, label: int | None = None) -> ApprovalInstance:
    """Valid random instance; histories may be empty or full."""
    def hist(counterpart_vocab):
        n = int(rng.integers(0, schema.k + 1))
        return tuple(HistoryRecord(int(rng.integers(1, counterpart_vocab)), int(rng.integers(1, schema.resource_vocab)),
                                   int(rng.integers(0, 2))) for _ in range(n))

    def text():
        return " ".join(rng.choice(_WORDS, int(rng.integers(0, 6))))

    counts = tuple(int(c) for c in rng.integers(0, 20, 4))
    return ApprovalInstance(
        applicant=ApplicantProfile(tuple(int(rng.integers(1, v)) for v in schema.applicant_vocab),
                                   hist(schema.approver_vocab[0])),
        resource=ResourceProfile(int(rng.integers(1, schema.resource_vocab)), int(rng.integers(1, schema.permission_vocab)),
                                 tuple(int(rng.integers(1, v)) for v in schema.resource_extra_vocab)),
        approver=ApproverProfile(tuple(int(rng.integers(1, v)) for v in schema.approver_vocab),
                                 hist(schema.applicant_vocab[0])),
        texts=TextFields(text(), text(), text()),
        stats=HistoryStats(counts, tuple(float(x) for x in rng.random(4))),
        affinity=AffinityFeatures(int(rng.integers(0, 6)), *(int(x) for x in rng.integers(0, 2, 3))),
        label=int(rng.integers(0, 2)) if label is None else label,
    )


def random_instances(schema: FeatureSchema, n: int, seed: int = 0) -> list[ApprovalInstance]:
    rng = np.random.default_rng(seed)
    out = [random_instance(schema, rng) for _ in range(n)]
    if n >= 2:  # keep both classes present
        out[0] = replace(out[0], label=0)
        out[1] = replace(out[1], label=1)
    return out
