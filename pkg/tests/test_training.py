import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiertask import autodiff as ad
from hiertask.autodiff import Tape, Tensor
from hiertask.config import ExperimentConfig
from hiertask.data import DatasetSplit, SyntheticSpec, as_arrays, generate_synthetic, split
from hiertask.encoders import EncoderSpec
from hiertask.errors import ContractError, DataError, DivergenceError
from hiertask.mtl import ForwardOutput, build_network
from hiertask.training import (
    AdamState,
    LossWeights,
    OneCycleSchedule,
    adam_step,
    joint_loss,
    lr_at,
    predict_logits,
    train,
)

from _oracles import cross_entropy_reference

SMALL = SyntheticSpec(num_makes=3, models_per_make=2, dim=8, n_per_model=10, seed=4)


def _setup(mode, spec=SMALL, seed=0, dropout=0.0):
    tax, samples = generate_synthetic(spec)
    parts = split(samples, seed=0)
    net = build_network(EncoderSpec("mlp", (spec.dim,), feature_dim=8), tax, mode, dropout, seed)
    return net, parts


class TestJointLoss:
    def test_weighted_sum(self):
        rng = np.random.default_rng(0)
        zm, zk = rng.normal(size=(5, 7)), rng.normal(size=(5, 3))
        ym, yk = rng.integers(0, 7, 5), rng.integers(0, 3, 5)
        out = ForwardOutput(Tensor(zm), Tensor(zk))
        got = joint_loss(out, ym, yk, LossWeights(0.9, 0.1)).item()
        want = 0.9 * cross_entropy_reference(zm, ym) + 0.1 * cross_entropy_reference(zk, yk)
        assert abs(got - want) < 1e-12

    def test_single_task_ignores_make_term(self):
        z = np.zeros((2, 196))
        loss = joint_loss(ForwardOutput(Tensor(z)), [0, 5], None, LossWeights(1.0, 0.5))
        assert abs(loss.item() - math.log(196)) < 1e-9

    def test_zero_weights_rejected(self):
        with pytest.raises(ContractError):
            LossWeights(0.0, 0.0)
        with pytest.raises(ContractError):
            LossWeights(-1.0, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 5), st.floats(0, 5), st.integers(0, 2**31))
    def test_linearity(self, l1, l2, seed):
        if l1 == 0 and l2 == 0:
            return
        rng = np.random.default_rng(seed)
        zm, zk = rng.normal(size=(4, 6)), rng.normal(size=(4, 2))
        ym, yk = rng.integers(0, 6, 4), rng.integers(0, 2, 4)
        out = ForwardOutput(Tensor(zm), Tensor(zk))
        ce_m = ad.cross_entropy(Tensor(zm), ym).item()
        ce_k = ad.cross_entropy(Tensor(zk), yk).item()
        assert abs(joint_loss(out, ym, yk, LossWeights(l1, l2)).item() - (l1 * ce_m + l2 * ce_k)) < 1e-12


class TestSchedule:
    def test_endpoints(self):
        s = OneCycleSchedule(3e-4, 100)
        assert lr_at(s, 0) == 3e-4 / 25
        assert lr_at(s, s.peak_step) == 3e-4
        assert lr_at(s, 100) == 3e-4 / (25 * 1e4)
        assert lr_at(s, 100) < lr_at(s, 0)

    def test_out_of_range(self):
        s = OneCycleSchedule(1.0, 10)
        with pytest.raises(ContractError):
            lr_at(s, 11)
        with pytest.raises(ContractError):
            lr_at(s, -1)

    @given(st.integers(2, 400), st.floats(0.05, 0.95))
    def test_piecewise_monotone(self, total, pct):
        s = OneCycleSchedule(1e-2, total, pct_up=pct)
        values = [lr_at(s, t) for t in range(total + 1)]
        peak = s.peak_step
        assert all(a < b for a, b in zip(values[:peak], values[1:peak + 1]))
        assert all(a > b for a, b in zip(values[peak:], values[peak + 1:]))
        assert max(values) == 1e-2


class TestAdam:
    def test_zero_gradient_leaves_parameter(self):
        p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        adam_step(AdamState.for_params([p]), [p], [np.zeros(2)], 0.1)
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([0.0, 3.0]), requires_grad=True)
        adam_step(AdamState.for_params([p]), [p], [np.array([1.0, -4.0])], 0.01)
        np.testing.assert_allclose(p.data, [-0.01, 3.01], rtol=0, atol=1e-9)

    def test_none_gradient_is_zero(self):
        p = Tensor(np.ones(3), requires_grad=True)
        adam_step(AdamState.for_params([p]), [p], [None], 0.1)
        np.testing.assert_array_equal(p.data, np.ones(3))

    def test_descends_quadratic(self):
        p = Tensor(np.array([4.0, -3.0]), requires_grad=True)
        state = AdamState.for_params([p])
        for _ in range(500):
            p.zero_grad()
            with Tape() as tape:
                loss = ad.sum(ad.mul(p, p))
            tape.backward(loss)
            adam_step(state, [p], [p.grad], 0.05)
        assert np.linalg.norm(p.data) < 1e-2

    def test_shape_mismatch(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            adam_step(AdamState.for_params([p]), [p], [np.ones(2)], 0.1)


class TestTrain:
    def test_zero_epochs_returns_initial_state(self):
        net, parts = _setup("parallel")
        before = [p.data.copy() for p in net.parameters()]
        run = train(net, parts, ExperimentConfig(epochs=0))
        assert run.history == [] and run.best_epoch is None
        assert all(np.array_equal(a, p.data) for a, p in zip(before, net.parameters()))

    @pytest.mark.parametrize("mode", ["single_task", "parallel", "cascaded"])
    def test_runs_are_bitwise_reproducible(self, mode):
        cfg = ExperimentConfig(mode=mode, epochs=3, batch_size=8, dropout=0.25, seed=7)

        def once():
            net, parts = _setup(mode, seed=7, dropout=0.25)
            run = train(net, parts, cfg)
            return [p.data.tobytes() for p in net.parameters()], [r.to_json() for r in run.history]

        assert once() == once()

    def test_empty_split(self):
        net, parts = _setup("parallel")
        with pytest.raises(DataError):
            train(net, DatasetSplit(parts.train, [], parts.test, parts.ratios, 0), ExperimentConfig(epochs=1))
        with pytest.raises(DataError):
            train(net, DatasetSplit([], parts.val, parts.test, parts.ratios, 0), ExperimentConfig(epochs=1))

    def test_divergence_reports_epoch(self):
        net, parts = _setup("parallel")
        net.model_head.bias.data[0] = np.nan
        with pytest.raises(DivergenceError) as err:
            train(net, parts, ExperimentConfig(epochs=2))
        assert err.value.epoch == 1

    @pytest.mark.parametrize("mode", ["single_task", "parallel", "cascaded"])
    def test_learns_separable_clusters(self, mode):
        net, parts = _setup(mode)
        train(net, parts, ExperimentConfig(mode=mode, epochs=30, batch_size=8, base_lr=1e-2))
        x, y, _ = as_arrays(parts.test)
        logits, _ = predict_logits(net, x)
        assert np.mean(logits.argmax(axis=1) == y) >= 0.95

    def test_history_and_best_epoch(self):
        net, parts = _setup("cascaded")
        run = train(net, parts, ExperimentConfig(mode="cascaded", epochs=5, batch_size=8))
        assert [r.epoch for r in run.history] == [1, 2, 3, 4, 5]
        best = max(r.val_model_acc for r in run.history)
        assert run.history[run.best_epoch - 1].val_model_acc == best
        assert all(r.val_model_acc < best for r in run.history[:run.best_epoch - 1])
        assert all(np.array_equal(a, p.data) for a, p in zip(run.best_state, net.parameters()))

    def test_zero_make_weight_matches_single_task_every_epoch(self):
        heads = {}
        for mode in ("single_task", "parallel"):
            net, parts = _setup(mode, seed=3, dropout=0.25)
            cfg = ExperimentConfig(mode=mode, lambda1=1.0, lambda2=0.0, epochs=4, batch_size=8, dropout=0.25, seed=3)
            snaps = []
            train(net, parts, cfg, on_epoch_end=lambda rec, n: snaps.append(
                [p.data.tobytes() for p in (*n.encoder.parameters(), *n.model_head.parameters())]))
            heads[mode] = snaps
        assert heads["single_task"] == heads["parallel"]
