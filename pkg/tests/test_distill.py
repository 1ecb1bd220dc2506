import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparse3d.distill import (AdamState, DistillConfig, TrainHistory, adam_step,
                              distill_train, init_projections, layerwise_loss, logit_loss,
                              schedule_k, synthetic_volume)
from sparse3d.encoder import (LayerOutputs, ViTConfig, encode, init_params, param_checksum)
from sparse3d.rng import Rng
from sparse3d.tensor import Tape, Tensor, backward


def outs(values):
    layers = [Tensor(np.atleast_2d(v)) for v in values]
    return LayerOutputs(layers, layers[-1])


def tiny_pair(variant="sparse_flash"):
    teacher = ViTConfig(8, 4, 16, 12, 2, attention_variant="naive")
    student = ViTConfig(8, 4, 16, 6, 2, ffn_only_prefix=2, attention_variant=variant,
                        segment_size=2, dilation=2)
    return teacher, student


class TestSchedule:
    @pytest.mark.parametrize("i,k", [(1, 1), (18, 3), (36, 6), (6, 1), (7, 2)])
    def test_examples(self, i, k):
        assert schedule_k(i, 36) == k

    def test_trace_36(self):
        assert [schedule_k(i, 36) for i in range(1, 37)] == [k for k in range(1, 7) for _ in range(6)]

    @given(st.integers(6, 500))
    def test_monotone_and_surjective(self, total):
        ks = [schedule_k(i, total) for i in range(1, total + 1)]
        assert ks == sorted(ks) and set(ks) == set(range(1, 7))
        assert all(k == math.ceil(6 * i / total) for i, k in enumerate(ks, 1))

    @pytest.mark.parametrize("i", [0, 37])
    def test_out_of_range(self, i):
        with pytest.raises(ValueError):
            schedule_k(i, 36)

    def test_config_needs_six(self):
        with pytest.raises(ValueError):
            DistillConfig(total_iterations=5)


class TestLayerwiseLoss:
    def test_matched_outputs_give_zero(self):
        r = Rng(0)
        s = [r.normal((3, 4)) for _ in range(6)]
        t = [v for x in s for v in (r.normal((3, 4)), x)]
        assert layerwise_loss(outs(t), outs(s), 6).item() == 0.0

    def test_hand_arithmetic(self):
        t = outs([[0.0], [3.0]] + [[0.0]] * 10)
        s = outs([[1.0]] + [[0.0]] * 5)
        assert layerwise_loss(t, s, 1).item() == pytest.approx(2.0)

    def test_rms_mode(self):
        t = outs([np.zeros((2, 2)), np.full((2, 2), 3.0)] + [np.zeros((2, 2))] * 10)
        s = outs([np.full((2, 2), 1.0)] + [np.zeros((2, 2))] * 5)
        assert layerwise_loss(t, s, 1, "plain_l2").item() == pytest.approx(4.0)
        assert layerwise_loss(t, s, 1, "rms").item() == pytest.approx(2.0)

    def test_float64_oracle_k3(self):
        tcfg, scfg = tiny_pair()
        tp, sp = init_params(tcfg, Rng(1)), init_params(scfg, Rng(2))
        vols = [synthetic_volume(8, Rng(3).fork(str(b))) for b in range(2)]
        t_outs = [encode(v, tcfg, tp) for v in vols]
        s_outs = [encode(v, scfg, sp) for v in vols]
        want = np.mean([
            sum(np.linalg.norm(t.layers[2 * i - 1].data.astype(np.float64)
                               - s.layers[i - 1].data.astype(np.float64)) for i in (1, 2, 3)) / 3
            for t, s in zip(t_outs, s_outs)])
        got = layerwise_loss(t_outs, s_outs, 3).item()
        assert abs(got - want) <= 1e-5 * want

    def test_errors(self):
        t = outs([np.zeros((2, 2))] * 12)
        with pytest.raises(ValueError):
            layerwise_loss(t, outs([np.zeros((2, 2))] * 6), 7)
        with pytest.raises(ValueError):
            layerwise_loss(t, outs([np.zeros((2, 3))] * 6), 1)
        with pytest.raises(ValueError):
            layerwise_loss(t, outs([np.zeros((2, 2))] * 5), 1)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_unmatched_layers_get_zero_gradient(self, k):
        tcfg, scfg = tiny_pair()
        tp = init_params(tcfg, Rng(1))
        sp = init_params(scfg, Rng(2), requires_grad=True)
        vol = synthetic_volume(8, Rng(3))
        t_out = encode(vol, tcfg, tp)
        with Tape() as tape:
            s_out = encode(vol, scfg, sp)
            loss = layerwise_loss(t_out, s_out, k)
        grads = backward(tape, loss)
        for j in range(k + 1, 7):
            assert not grads.of(s_out.layers[j - 1]).any()
            for name, p in sp.items():
                if name.startswith(f"blocks.{j - 1}."):
                    assert not grads.of(p).any(), name
        assert grads.of(s_out.layers[k - 1]).any()
        assert not grads.of(sp["norm.gamma"]).any()


class TestLogitLoss:
    def test_equal_is_zero(self):
        x = Tensor(Rng(0).normal((4, 3)))
        assert logit_loss(x, Tensor(x.data)).item() == 0.0

    def test_single_offset(self):
        x = Rng(0).normal((4, 3))
        y = x.copy()
        y[2, 1] += 0.75
        assert logit_loss(Tensor(x), Tensor(y)).item() == pytest.approx(0.75, rel=1e-5)

    def test_float64_oracle(self):
        r = Rng(5)
        t = [r.normal((6, 4)) for _ in range(3)]
        s = [r.normal((6, 4)) for _ in range(3)]
        want = np.mean([np.linalg.norm(a.astype(np.float64) - b) for a, b in zip(t, s)])
        got = logit_loss([Tensor(a) for a in t], [Tensor(b) for b in s]).item()
        assert abs(got - want) <= 1e-5 * want

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            logit_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))


class TestAdam:
    def test_zero_gradient_fresh_state(self):
        p = {"w": Tensor(Rng(0).normal((3,)))}
        before = p["w"].data.copy()
        adam_step(p, {"w": np.zeros(3, np.float32)}, AdamState(), DistillConfig())
        np.testing.assert_array_equal(p["w"].data, before)

    def test_first_step_moves_by_lr(self):
        cfg = DistillConfig()
        p = {"w": Tensor(np.zeros(4))}
        adam_step(p, {"w": np.full(4, 0.3, np.float32)}, AdamState(), cfg)
        np.testing.assert_allclose(p["w"].data, -cfg.learning_rate, rtol=1e-5)

    def test_three_step_reference(self):
        cfg = DistillConfig(learning_rate=0.1)
        p = {"x": Tensor([1.5], dtype=np.float64)}
        state = AdamState()
        x, m, v = 1.5, 0.0, 0.0
        b1, b2 = cfg.betas
        for t, g in enumerate([0.4, -1.2, 2.0], 1):
            adam_step(p, {"x": np.array([g])}, state, cfg)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= cfg.learning_rate * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + cfg.eps)
            assert abs(p["x"].data[0] - x) <= 1e-7
        assert state.step == 3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": Tensor(np.ones(3))}, {"w": np.ones(4)}, AdamState(), DistillConfig())


def test_projection_only_for_unequal_widths():
    tcfg, scfg = tiny_pair()
    assert init_projections(scfg, tcfg, Rng(0)) == {}
    narrow = ViTConfig(8, 4, 8, 6, 2, ffn_only_prefix=2)
    proj = init_projections(narrow, tcfg, Rng(0))
    assert proj["distill.proj.1"].shape == (8, 16) and "distill.proj.final" in proj


class TestTraining:
    @staticmethod
    def run(seed=0, iters=12, logit=2, **kw):
        tcfg, scfg = tiny_pair(**kw)
        tp, sp = init_params(tcfg, Rng(seed).fork("t")), init_params(scfg, Rng(seed).fork("s"))
        cfg = DistillConfig(total_iterations=iters, batch_size=2, logit_phase_iterations=logit,
                            seed=seed)
        return tp, distill_train(tcfg, tp, scfg, sp, cfg)

    def test_history_shape_and_teacher_frozen(self):
        tp, res = self.run()
        h = res.history
        assert h.k_trace == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6]
        assert [r.phase for r in h.records] == ["layerwise"] * 12 + ["logit"] * 2
        assert all(r.k is None for r in h.phase("logit"))
        assert param_checksum(tp) == res.teacher_checksum

    def test_deterministic(self):
        a = self.run(seed=3)[1].history.to_jsonl(timing=False)
        b = self.run(seed=3)[1].history.to_jsonl(timing=False)
        assert a == b
        assert a != self.run(seed=4)[1].history.to_jsonl(timing=False)

    def test_history_file_roundtrip(self, tmp_path):
        h = self.run(iters=6, logit=1)[1].history
        h.write(tmp_path / "h.jsonl")
        back = TrainHistory.read(tmp_path / "h.jsonl")
        assert back.records == h.records

    def test_incompatible_configs(self):
        tcfg, scfg = tiny_pair()
        bad = ViTConfig(8, 4, 16, 4, 2)
        with pytest.raises(ValueError):
            distill_train(tcfg, init_params(tcfg, Rng(0)), bad, init_params(bad, Rng(0)),
                          DistillConfig(total_iterations=6, batch_size=1))

    def test_non_finite_loss_aborts(self):
        tcfg, scfg = tiny_pair()
        tp = init_params(tcfg, Rng(0))
        tp["norm.beta"] = Tensor(np.full(16, np.inf))
        tp["blocks.1.ffn.b2"] = Tensor(np.full(16, np.nan))
        with pytest.raises(FloatingPointError, match="iteration 1"):
            distill_train(tcfg, tp, scfg, init_params(scfg, Rng(1)),
                          DistillConfig(total_iterations=6, batch_size=1))
