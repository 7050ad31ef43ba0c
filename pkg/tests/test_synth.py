import math
from collections import defaultdict, deque
from decimal import Decimal, getcontext

import numpy as np
import pytest

from conftest import TINY_WORLD
from rmia.data import HistoryRecord, dumps_instance, validate_instance
from rmia.metrics import auc
from rmia.synth import (
    HIGH_AFFINITY,
    InvalidConfig,
    OracleParams,
    UnknownEntity,
    WorldConfig,
    generate_labeled,
    generate_world,
    oracle_probability,
    text_tier,
)

ZERO = OracleParams(beta0=0, beta_affinity=0, beta_same_dept=0, beta_common_resource=0, beta_ternary=0,
                    beta_business_text=0)


def decimal_oracle(world, a, r, b, params) -> float:
    """Independent high-precision evaluation of the stated logistic formula."""
    getcontext().prec = 60
    level = int(world.affinity[a, b])
    same = world.applicant_dept[a] == world.approver_dept[b]
    common = bool(world.common[world.applicant_dept[a], r])
    xor = (level >= 3) ^ bool(world.approver_scope[b, r])
    z = (Decimal(repr(params.beta0)) + Decimal(repr(params.beta_affinity)) * level / 5
         + Decimal(repr(params.beta_same_dept)) * same + Decimal(repr(params.beta_common_resource)) * common
         + Decimal(repr(params.beta_ternary)) * xor)
    return float(1 / (1 + (-z).exp()))


class TestWorld:
    def test_deterministic(self):
        assert generate_world(TINY_WORLD, 1).structurally_equal(generate_world(TINY_WORLD, 1))
        assert not generate_world(TINY_WORLD, 1).structurally_equal(generate_world(TINY_WORLD, 2))

    def test_default_counts(self):
        w = generate_world(WorldConfig(), 0)
        assert (w.config.n_departments, len(w.applicant_dept), len(w.approver_dept), len(w.resource_dept)) == \
               (5, 200, 50, 100)
        assert w.affinity.shape == (200, 50)

    @pytest.mark.parametrize("field", ["n_resources", "n_applicants", "n_departments", "k"])
    def test_zero_count(self, field):
        with pytest.raises(InvalidConfig):
            generate_world(WorldConfig(**{field: 0}), 0)

    def test_bad_scope(self):
        with pytest.raises(InvalidConfig):
            generate_world(WorldConfig(scope="everything"), 0)
        with pytest.raises(InvalidConfig):
            generate_world(WorldConfig(scope_groups=11), 0)

    @pytest.mark.parametrize("seed", range(3))
    def test_invariants(self, seed):
        w = generate_world(WorldConfig(), seed)
        D = w.config.n_departments
        for arr in (w.applicant_dept, w.approver_dept, w.resource_dept):
            assert arr.min() >= 0 and arr.max() < D
        assert w.common.any(axis=1).all()
        assert w.affinity.min() >= 0 and w.affinity.max() <= 5
        assert w.approver_scope.any(axis=1).all()
        # identity department column agrees with the department arrays
        assert np.array_equal(w.applicant_identity[:, 2], w.applicant_dept + 1)
        assert np.array_equal(w.approver_identity[:, 2], w.approver_dept + 1)

    def test_department_scope_mode(self):
        w = generate_world(WorldConfig(scope="department"), 0)
        assert np.array_equal(w.approver_scope, w.common[w.approver_dept])

    def test_schema_matches_world(self):
        w = generate_world(TINY_WORLD, 0)
        s = w.schema()
        assert s.d1 == 6 and s.d2 == 5 and s.k == TINY_WORLD.k
        assert s.applicant_vocab[0] == TINY_WORLD.n_applicants + 1


class TestOracle:
    def test_all_zero_is_half(self, tiny_world):
        for a, r, b in [(0, 0, 0), (5, 7, 3), (23, 17, 8)]:
            assert oracle_probability(tiny_world, a, r, b, ZERO) == 0.5

    def test_saturation(self, tiny_world):
        p = oracle_probability(tiny_world, 0, 0, 0, OracleParams(beta0=800.0))
        assert 0 < p < 1 and p > 1 - 1e-15

    def test_strictly_inside(self, tiny_world):
        p = oracle_probability(tiny_world, 0, 0, 0, OracleParams(beta0=-800.0))
        assert 0 < p < 1e-300

    def test_against_high_precision(self, tiny_world):
        rng = np.random.default_rng(0)
        cfg = tiny_world.config
        params = OracleParams()
        for _ in range(200):
            a, r, b = (int(rng.integers(n)) for n in (cfg.n_applicants, cfg.n_resources, cfg.n_approvers))
            assert oracle_probability(tiny_world, a, r, b, params) == pytest.approx(
                decimal_oracle(tiny_world, a, r, b, params), rel=1e-13, abs=1e-300)

    def test_xor_flips_with_scope(self, tiny_world):
        # find a high-affinity pair and two resources on either side of the scope
        a, b = np.argwhere(tiny_world.affinity >= HIGH_AFFINITY)[0]
        inside = np.flatnonzero(tiny_world.approver_scope[b])
        outside = np.flatnonzero(~tiny_world.approver_scope[b])
        only = OracleParams(beta0=0, beta_affinity=0, beta_same_dept=0, beta_common_resource=0, beta_ternary=2.0)
        assert oracle_probability(tiny_world, a, inside[0], b, only) == 0.5
        assert oracle_probability(tiny_world, a, outside[0], b, only) == pytest.approx(1 / (1 + math.exp(-2)))

    def test_unknown_entity(self, tiny_world):
        with pytest.raises(UnknownEntity):
            oracle_probability(tiny_world, 10_000, 0, 0)
        with pytest.raises(UnknownEntity):
            oracle_probability(tiny_world, 0, -1, 0)

    def test_negative_noise_rejected(self):
        with pytest.raises(InvalidConfig):
            OracleParams(noise_std=-0.1)


class TestInstances:
    def test_count_and_validity(self, tiny_world, tiny_data):
        ds, truth = tiny_data
        assert len(ds) == 400 and len(truth.probability) == 400
        for inst in ds:
            validate_instance(inst, tiny_world.schema())

    def test_n_must_be_positive(self, tiny_world):
        with pytest.raises(InvalidConfig):
            generate_labeled(tiny_world, OracleParams(), 0, 0)

    def test_byte_identical(self, tiny_world):
        a, _ = generate_labeled(tiny_world, OracleParams(), 200, 9)
        b, _ = generate_labeled(tiny_world, OracleParams(), 200, 9)
        assert [dumps_instance(x) for x in a] == [dumps_instance(x) for x in b]

    def test_balanced(self, tiny_world):
        ds, _ = generate_labeled(tiny_world, OracleParams(), 301, 2, balanced=True)
        assert int(ds.labels().sum()) == 151

    def test_stats_consistency(self, tiny_data):
        ds, _ = tiny_data
        for inst in ds:
            h = inst.applicant.history
            subsets = ([x for x in h if x.resource_id == inst.resource.resource_id],
                       [x for x in h if x.resource_id == inst.resource.resource_id
                        and x.counterpart_id == inst.approver.identity[0]],
                       list(h), list(inst.approver.history))
            assert inst.stats.counts == tuple(len(s) for s in subsets)
            for rate, s in zip(inst.stats.rates, subsets):
                assert rate == (sum(x.decision for x in s) / len(s) if s else 0.0)

    def test_histories_hold_only_earlier_outcomes(self, tiny_world):
        # with no warm-up and no balancing every event is emitted, so a replay
        # of the emitted stream must reproduce each history exactly
        ds, _ = generate_labeled(tiny_world, OracleParams(), 300, 4, warmup=0)
        k = tiny_world.config.k
        app_log, apr_log = defaultdict(lambda: deque(maxlen=k)), defaultdict(lambda: deque(maxlen=k))
        for inst in sorted(ds, key=lambda x: x.timestamp):
            a, b, r = inst.applicant.identity[0], inst.approver.identity[0], inst.resource.resource_id
            assert inst.applicant.history == tuple(reversed(app_log[a]))
            assert inst.approver.history == tuple(reversed(apr_log[b]))
            app_log[a].append(HistoryRecord(b, r, inst.label))
            apr_log[b].append(HistoryRecord(a, r, inst.label))

    def test_monte_carlo_pass_rate(self, tiny_world):
        ds, truth = generate_labeled(tiny_world, OracleParams(noise_std=0.0), 1000, 11)
        p = truth.probability
        sigma = math.sqrt(float(np.sum(p * (1 - p)))) / len(p)
        assert abs(ds.labels().mean() - p.mean()) <= 3 * sigma

    def test_truth_matches_oracle(self, tiny_world, tiny_data):
        ds, truth = tiny_data
        for inst, p, tier in list(zip(ds, truth.probability, truth.tiers))[:50]:
            a, r, b = inst.applicant.identity[0] - 1, inst.resource.resource_id - 1, inst.approver.identity[0] - 1
            assert p == oracle_probability(tiny_world, a, r, b, OracleParams(), tier)
            assert text_tier(inst.texts.reason) == tier


@pytest.fixture(scope="module")
def sample():
    world = generate_world(WorldConfig(), 0)
    return generate_labeled(world, OracleParams(), 10_000, 0)


class TestBayes:
    def test_default_bayes_auc(self, sample):
        ds, truth = sample
        assert auc(truth.probability, ds.labels()) > 0.85

    def test_ternary_term_is_informative(self, sample):
        ds, truth = sample
        y = ds.labels()
        assert auc(truth.probability_without_ternary, y) < auc(truth.probability, y) - 0.05

    def test_pass_rate_is_high(self, sample):
        ds, _ = sample
        assert 0.6 < ds.labels().mean() < 0.9
