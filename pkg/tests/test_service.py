import http.client
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import pytest

from conftest import TINY_SCHEMA, random_instances, random_params
from rmia.checkpoint import save_checkpoint
from rmia.data import ResourceProfile, instance_to_dict
from rmia.model import RmiaConfig, RmiaModel
from rmia.service import MAX_BODY_BYTES, Scorer, ScoringServer


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    model = RmiaModel(RmiaConfig(d=8, heads=2, fusion_hidden=16), TINY_SCHEMA)
    store = random_params(model.init_params(0), 0.2, 1)
    path = tmp_path_factory.mktemp("svc") / "m.ckpt"
    save_checkpoint(model, store, path)
    return path


@pytest.fixture(scope="module")
def server(ckpt):
    srv = ScoringServer(("127.0.0.1", 0), Scorer.from_checkpoint(ckpt))
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def request(server, method, path, body=None, headers=None):
    conn = http.client.HTTPConnection(*server.server_address[:2], timeout=10)
    try:
        conn.request(method, path, body=body, headers=headers or {})
        resp = conn.getresponse()
        return resp.status, json.loads(resp.read())
    finally:
        conn.close()


def post(server, obj):
    return request(server, "POST", "/score", json.dumps(obj).encode(), {"Content-Type": "application/json"})


class TestScorer:
    def test_threshold_range(self, ckpt):
        with pytest.raises(ValueError):
            Scorer.from_checkpoint(ckpt, 1.5)

    def test_decision(self, ckpt):
        s = Scorer.from_checkpoint(ckpt)
        for inst in random_instances(TINY_SCHEMA, 10, 2):
            out = s.score(inst)
            assert out["decision"] == ("pass" if out["prob_pass"] >= 0.5 else "fail")

    def test_single_matches_batched(self, ckpt):
        s = Scorer.from_checkpoint(ckpt)
        insts = random_instances(TINY_SCHEMA, 40, 3)
        batched = s.model.predict_proba(s.store, s.model.encode(insts))
        for inst, p in zip(insts, batched):
            assert abs(s.prob_pass(inst) - p) < 1e-6


class TestEndpoint:
    def test_health(self, server):
        status, body = request(server, "GET", "/health")
        assert status == 200 and body["status"] == "ok"
        assert body["model_hash"] == server.scorer.model_hash

    def test_parity_with_offline(self, server, ckpt):
        offline = Scorer.from_checkpoint(ckpt)
        for inst in random_instances(TINY_SCHEMA, 50, 4):
            status, body = post(server, instance_to_dict(inst))
            assert status == 200
            assert body["prob_pass"] == offline.prob_pass(inst)
            assert body["model_hash"] == offline.model_hash and body["latency_ms"] >= 0

    def test_unlabeled_and_oov_accepted(self, server):
        inst = replace(random_instances(TINY_SCHEMA, 1, 5)[0], label=None, resource=ResourceProfile(99, 1, (1,)))
        status, body = post(server, instance_to_dict(inst))
        assert status == 200 and 0 < body["prob_pass"] < 1

    def test_malformed_json(self, server):
        status, body = request(server, "POST", "/score", b"{nope", {"Content-Type": "application/json"})
        assert status == 400 and "malformed" in body["error"]

    def test_validation_error_names_field(self, server):
        obj = instance_to_dict(random_instances(TINY_SCHEMA, 1, 6)[0])
        obj["affinity"]["affinity_level"] = 9
        status, body = post(server, obj)
        assert status == 400 and body["field"] == "affinity.affinity_level"

    def test_missing_section(self, server):
        obj = instance_to_dict(random_instances(TINY_SCHEMA, 1, 6)[0])
        del obj["texts"]
        status, body = post(server, obj)
        assert status == 400 and body["field"] == "texts"

    def test_too_large(self, server):
        # the server answers from the declared length alone, before any body is read
        conn = http.client.HTTPConnection(*server.server_address[:2], timeout=10)
        conn.putrequest("POST", "/score")
        conn.putheader("Content-Type", "application/json")
        conn.putheader("Content-Length", str(MAX_BODY_BYTES + 1))
        conn.endheaders()
        resp = conn.getresponse()
        assert resp.status == 413
        conn.close()

    def test_wrong_content_type(self, server):
        status, _ = request(server, "POST", "/score", b"{}", {"Content-Type": "text/plain"})
        assert status == 415

    def test_length_required(self, server):
        conn = http.client.HTTPConnection(*server.server_address[:2], timeout=10)
        conn.putrequest("POST", "/score")
        conn.putheader("Content-Type", "application/json")
        conn.endheaders()
        resp = conn.getresponse()
        assert resp.status == 411
        conn.close()

    @pytest.mark.parametrize("method,path", [("GET", "/nope"), ("POST", "/health")])
    def test_unknown_route(self, server, method, path):
        status, _ = request(server, method, path, b"{}" if method == "POST" else None,
                            {"Content-Type": "application/json"})
        assert status == 404

    def test_concurrent_requests(self, server, ckpt):
        offline = Scorer.from_checkpoint(ckpt)
        insts = random_instances(TINY_SCHEMA, 40, 8)
        with ThreadPoolExecutor(8) as pool:
            results = list(pool.map(lambda i: post(server, instance_to_dict(i)), insts))
        assert all(s == 200 for s, _ in results)
        assert [b["prob_pass"] for _, b in results] == [offline.prob_pass(i) for i in insts]
