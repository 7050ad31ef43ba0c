import json
import struct

import numpy as np
import pytest

from conftest import TINY_SCHEMA, random_instances, random_params
from rmia.baselines import LogisticConfig, LogisticModel, MlpConfig, PlainMlpModel
from rmia.checkpoint import (
    MAGIC,
    ConfigHashMismatch,
    CorruptCheckpoint,
    checkpoint_bytes,
    load_checkpoint,
    load_into,
    read_header,
    save_checkpoint,
)
from rmia.model import RmiaConfig, RmiaModel, config_hash

CFG = RmiaConfig(d=8, heads=2, fusion_hidden=16)


def saved(tmp_path, model=None, dtype=np.float32, seed=0):
    model = model or RmiaModel(CFG, TINY_SCHEMA)
    store = random_params(model.init_params(seed, dtype), 0.1, seed)
    if "bn.running_mean" in store.buffers:
        store.buffers["bn.running_mean"] += 0.3
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, store, path, extra={"note": "x"})
    return model, store, path


class TestRoundTrip:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_bit_exact(self, tmp_path, dtype):
        model, store, path = saved(tmp_path, dtype=dtype)
        m2, s2, header = load_checkpoint(path)
        assert header["extra"] == {"note": "x"} and header["precision"] == np.dtype(dtype).name
        assert list(s2.params) == list(store.params)
        for k in store.params:
            assert s2.params[k].dtype == store.params[k].dtype
            assert s2.params[k].tobytes() == store.params[k].tobytes()
        for k in store.buffers:
            assert s2.buffers[k].tobytes() == store.buffers[k].tobytes()
        assert m2.config == model.config and m2.schema == model.schema

    def test_identical_predictions(self, tmp_path):
        model, store, path = saved(tmp_path)
        batch = model.encode(random_instances(TINY_SCHEMA, 300, 1))
        m2, s2, _ = load_checkpoint(path)
        assert model.predict_proba(store, batch).tobytes() == m2.predict_proba(s2, batch).tobytes()

    def test_bytes_deterministic(self):
        model = RmiaModel(CFG, TINY_SCHEMA)
        a = checkpoint_bytes(model, model.init_params(3))
        b = checkpoint_bytes(model, model.init_params(3))
        assert a == b and a.startswith(MAGIC)

    @pytest.mark.parametrize("model", [LogisticModel(LogisticConfig(), TINY_SCHEMA),
                                       PlainMlpModel(MlpConfig(d=4, fusion_hidden=6), TINY_SCHEMA)])
    def test_baseline_kinds(self, tmp_path, model):
        _, store, path = saved(tmp_path, model)
        m2, s2, _ = load_checkpoint(path)
        assert type(m2) is type(model)
        batch = model.encode(random_instances(TINY_SCHEMA, 20, 2))
        assert np.array_equal(model.predict_proba(store, batch), m2.predict_proba(s2, batch))

    def test_load_into(self, tmp_path):
        model, store, path = saved(tmp_path)
        s2 = load_into(RmiaModel(CFG, TINY_SCHEMA), path)
        assert s2.params["E"].tobytes() == store.params["E"].tobytes()


class TestFailures:
    def test_truncated(self, tmp_path):
        _, _, path = saved(tmp_path)
        data = path.read_bytes()
        for cut in (4, len(MAGIC) + 2, len(MAGIC) + 40, len(data) - 7):
            path.write_bytes(data[:cut])
            with pytest.raises(CorruptCheckpoint):
                load_checkpoint(path)

    def test_flipped_payload_byte(self, tmp_path):
        _, _, path = saved(tmp_path)
        data = bytearray(path.read_bytes())
        data[-3] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\0" * 32)
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_expected_hash_mismatch(self, tmp_path):
        _, _, path = saved(tmp_path)
        with pytest.raises(ConfigHashMismatch):
            load_checkpoint(path, expected_hash="0" * 64)
        with pytest.raises(ConfigHashMismatch):
            load_into(RmiaModel(RmiaConfig(d=8, heads=2, fusion_hidden=16, use_te=False), TINY_SCHEMA), path)

    def test_edited_config_detected(self, tmp_path):
        _, _, path = saved(tmp_path)
        data = path.read_bytes()
        header, pos = read_header(data)
        header["model_config"]["use_bi"] = False
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob + data[pos:])
        with pytest.raises(ConfigHashMismatch):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "missing.ckpt")


class TestConfigHash:
    def test_flags_change_hash(self):
        a = RmiaModel(CFG, TINY_SCHEMA).config_hash()
        b = RmiaModel(CFG.without("bi"), TINY_SCHEMA).config_hash()
        assert a != b and len(a) == 64

    def test_stable_value(self):
        m = RmiaModel(CFG, TINY_SCHEMA)
        assert m.config_hash() == config_hash("rmia", m.config_dict(), TINY_SCHEMA, m.enc_cfg)
