import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esdd import tensor as tn
from esdd.cli import gradcheck_model
from esdd.dsu import DsuConfig
from esdd.features import FeatureStack
from esdd.mhfa import (
    MhfaConfig,
    aggregate_layers,
    init_params,
    load_checkpoint,
    mhfa_forward,
    nll_loss,
    save_checkpoint,
)


def small(dtype=np.float64, **kw):
    cfg = MhfaConfig(**{"L": 3, "D": 8, "H": 4, "D_cmp": 6, "E": 5, **kw})
    rng = np.random.default_rng(0)
    params = init_params(cfg, rng, dtype)
    params = params.replace(w_k=rng.normal(size=cfg.L).astype(dtype), w_v=rng.normal(size=cfg.L).astype(dtype))
    return cfg, params


class TestAggregateLayers:
    def test_single_layer(self):
        x = np.random.default_rng(0).normal(size=(1, 4, 3))
        np.testing.assert_allclose(aggregate_layers(x, [7.3]).data, x[0])

    def test_uniform_weights_give_mean(self):
        x = np.random.default_rng(1).normal(size=(5, 4, 3))
        np.testing.assert_allclose(aggregate_layers(x, np.zeros(5)).data, x.mean(axis=0))

    def test_peaked_weights_select_layer_zero(self):
        x = np.random.default_rng(2).normal(size=(4, 6, 3))
        w = np.array([10.0, -10.0, -10.0, -10.0])
        # Closed form: layer 0 weight 1/(1+3e^-20), others e^-20/(1+3e^-20).
        out = aggregate_layers(x, w).data
        rel = np.linalg.norm(out - x[0]) / np.linalg.norm(x[0])
        assert rel < 1e-3

    def test_length_mismatch(self):
        with pytest.raises(tn.ShapeError):
            aggregate_layers(np.zeros((3, 2, 2)), np.zeros(2))

    def test_accepts_feature_stack(self):
        v = np.ones((2, 3, 4), np.float32)
        assert aggregate_layers(FeatureStack(v), np.zeros(2, np.float32)).shape == (3, 4)


class TestForward:
    def test_shape_contract_paper_dims(self):
        cfg = MhfaConfig(L=4, D=32, H=32, D_cmp=128, E=256)
        params = init_params(cfg, np.random.default_rng(0))
        out = mhfa_forward(np.zeros((4, 16, 32), np.float32), params, cfg)
        assert out.logits.shape == (2,)
        assert out.embedding.shape == (256,)
        assert params.W_fc.shape == (32 * 128, 256)

    def test_attention_columns_sum_to_one(self):
        cfg, params = small()
        x = np.random.default_rng(3).normal(size=(2, 3, 7, 8))
        A = mhfa_forward(x, params, cfg).attention.data
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 2**31 - 1))
    def test_frame_permutation_invariance(self, T, seed):
        cfg, params = small()
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, T, 8))
        perm = rng.permutation(T)
        a = mhfa_forward(x, params, cfg).logits.data
        b = mhfa_forward(x[:, perm], params, cfg).logits.data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_single_frame_hand_evaluation(self):
        cfg, params = small(adapter_enabled=False)
        x = np.random.default_rng(4).normal(size=(3, 1, 8))
        out = mhfa_forward(x, params, cfg)
        np.testing.assert_array_equal(out.attention.data, np.ones((1, cfg.H)))
        # Direct pipeline with A == 1.
        wv = np.exp(params.w_v) / np.exp(params.w_v).sum()
        v = (wv[:, None] * x[:, 0, :]).sum(axis=0) @ params.W_v + params.b_v
        emb = np.tile(v, cfg.H) @ params.W_fc + params.b_fc
        np.testing.assert_allclose(out.embedding.data, emb, rtol=1e-12)
        np.testing.assert_allclose(out.logits.data, emb @ params.W_cls + params.b_cls, rtol=1e-12)

    def test_layer_logit_shift_changes_nothing(self):
        cfg, params = small()
        x = np.random.default_rng(5).normal(size=(2, 3, 6, 8))
        a = mhfa_forward(x, params, cfg).logits.data
        b = mhfa_forward(x, params.replace(w_k=params.w_k + 3.7, w_v=params.w_v - 1.1), cfg).logits.data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_dsu_bypassed_in_eval(self):
        cfg, params = small()
        cfg_dsu = MhfaConfig(**{**cfg.to_dict(), "dsu_enabled": True, "dsu": DsuConfig(p=1.0)})
        x = np.random.default_rng(6).normal(size=(4, 3, 6, 8))
        a = mhfa_forward(x, params, cfg, mode="eval").logits.data
        b = mhfa_forward(x, params, cfg_dsu, mode="eval", rng=np.random.default_rng(0)).logits.data
        assert a.tobytes() == b.tobytes()

    def test_dsu_active_in_train(self):
        cfg, params = small()
        cfg_dsu = MhfaConfig(**{**cfg.to_dict(), "dsu_enabled": True, "dsu": DsuConfig(p=1.0)})
        x = np.random.default_rng(6).normal(size=(4, 3, 6, 8))
        a = mhfa_forward(x, params, cfg, mode="train").logits.data
        b = mhfa_forward(x, params, cfg_dsu, mode="train", rng=np.random.default_rng(0)).logits.data
        assert not np.allclose(a, b)

    def test_dimension_error_names_stage(self):
        cfg, params = small()
        with pytest.raises(tn.ShapeError, match="input stage"):
            mhfa_forward(np.zeros((3, 4, 9)), params, cfg)

    def test_adapter_identity_start(self):
        cfg, params = small(adapter_enabled=True)
        plain = MhfaConfig(**{**cfg.to_dict(), "adapter_enabled": False})
        x = np.random.default_rng(7).normal(size=(3, 6, 8))
        a = mhfa_forward(x, params, cfg).logits.data
        b = mhfa_forward(x, params.replace(gamma=None, beta=None), plain).logits.data
        np.testing.assert_allclose(a, b, rtol=1e-12)


class TestLoss:
    def test_uniform_logits(self):
        for label in (0, 1):
            assert math.isclose(nll_loss(np.zeros(2), label).item(), math.log(2), rel_tol=1e-12)

    def test_confident_correct(self):
        assert nll_loss(np.array([20.0, -20.0]), 0).item() < 1e-15

    def test_confident_wrong(self):
        # log(1 + e^40) - (-20) ... closed form: 40 + log1p(e^-40)
        expected = 40 + math.log1p(math.exp(-40))
        assert math.isclose(nll_loss(np.array([20.0, -20.0]), 1).item(), expected, rel_tol=1e-12)

    def test_batch_average(self):
        logits = np.array([[0.0, 0.0], [20.0, -20.0]])
        assert math.isclose(nll_loss(logits, [1, 1]).item(), (math.log(2) + 40) / 2, rel_tol=1e-9)


class TestGradients:
    def test_end_to_end_gradcheck(self):
        res, names = gradcheck_model(seed=0)
        assert {"w_k", "w_v", "gamma", "beta", "W_att"} <= set(names)
        assert res.ok and res.max_rel_error <= 1e-4, res

    def test_fault_injection_detected(self):
        res, names = gradcheck_model(seed=0, fault=(names_index("W_att"), 2.0))
        assert res.max_rel_error >= 0.3


def names_index(name):
    return ["w_k", "w_v", "W_k", "W_v", "b_v", "W_att", "W_fc", "b_fc", "W_cls", "b_cls", "gamma", "beta"].index(name)


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path):
        cfg = MhfaConfig(L=3, D=8, H=4, D_cmp=6, E=5, adapter_enabled=True, dsu_enabled=True)
        params = init_params(cfg, np.random.default_rng(1))
        save_checkpoint(tmp_path / "m.ckpt", params, cfg, {"epoch": 3})
        back, cfg2, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert cfg2 == cfg and meta == {"epoch": 3}
        for (k, a), (k2, b) in zip(params.items(), back.items()):
            assert k == k2 and a.shape == b.shape and a.tobytes() == b.tobytes()

    def test_header_registry(self, tmp_path):
        import json
        import struct

        cfg = MhfaConfig(L=2, D=4, H=2, D_cmp=3, E=2)
        params = init_params(cfg, np.random.default_rng(0))
        save_checkpoint(tmp_path / "m.ckpt", params, cfg)
        raw = (tmp_path / "m.ckpt").read_bytes()
        (n,) = struct.unpack_from("<Q", raw, 8)
        header = json.loads(raw[16:16 + n])
        assert [p["name"] for p in header["params"]] == [k for k, _ in params.items()]
        assert len(raw) == 16 + n + 4 * params.n_scalars()
