import io
import math

import numpy as np
import pytest

from shape_adaptor.data import Dataset, batch_iterator, synth_dataset
from shape_adaptor.network import build_network, conv_spec, current_final_dim
from shape_adaptor.optim import ParamGroup, cosine_annealing_lr, sgd_momentum_step
from shape_adaptor.tensor import Tensor, softmax_cross_entropy
from shape_adaptor.trainer import (ShapeTrace, TraceRecord, TrainConfig, TrainingDiverged, evaluate,
                                   load_checkpoint, parse_shape_trace, record_shape_trace,
                                   save_checkpoint, total_iterations, train)

SPEC = conv_spec((4, 8, 8), 3, input_dim=16)


def small_setup(seed=0, **overrides):
    cfg = dict(n_adaptors=2, d_out=8, epochs=1, batch_size=8, seed=seed)
    cfg.update(overrides)
    config = TrainConfig(**cfg)
    model = build_network(SPEC, config, seed=seed)
    return model, config


def data(per_class=8, seed=0):
    return synth_dataset(3, per_class, dim=16, seed=seed)


def raws(model):
    return [float(a.raw.data) for a in model.alpha_params]


class FixedLogits:
    """Stand-in model whose logits are supplied per sample."""

    def __init__(self, fn):
        self.fn = fn

    def eval(self):
        pass

    def train(self, mode=True):
        pass

    def plan(self):
        return None

    def forward(self, x, plan=None):
        return Tensor(self.fn(x))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.alpha_lr, c.alpha_update_interval, c.d_last, c.d_out, c.momentum) == (0.1, 20, 2, 8, 0.9)

    def test_round_trip_and_unknown_keys(self):
        c = TrainConfig(alpha_update_interval=3, d_limit=5)
        assert TrainConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValueError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    def test_interval_must_be_positive(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha_update_interval=0)

    def test_total_iterations(self):
        assert total_iterations(10, TrainConfig(batch_size=3, epochs=2)) == 8
        assert total_iterations(10, TrainConfig(batch_size=3, epochs=2, max_iterations=5)) == 5


class TestOptim:
    def test_cosine_endpoints(self):
        assert cosine_annealing_lr(0.1, 0, 10) == 0.1
        assert cosine_annealing_lr(0.1, 5, 10) == pytest.approx(0.05)
        assert cosine_annealing_lr(0.1, 10, 10) == pytest.approx(0.0)
        with pytest.raises(ValueError):
            cosine_annealing_lr(0.1, 11, 10)

    def test_momentum_recurrence(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        group = ParamGroup("weights", [p], 0.1, momentum=0.9, weight_decay=0.5)
        v = 0.0
        expected = 1.0
        for g in (2.0, -1.0, 0.5):
            p.grad = np.array([g])
            v = 0.9 * v + g + 0.5 * expected
            expected -= 0.1 * v
            sgd_momentum_step(group)
            assert p.data[0] == pytest.approx(expected, abs=1e-15)
            assert p.grad is None

    def test_missing_grad_is_skipped(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        sgd_momentum_step(ParamGroup("shape", [p], 0.1))
        assert p.data[0] == 1.0


class TestTrain:
    def test_zero_iterations_changes_nothing(self):
        model, config = small_setup(epochs=0)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        _, trace = train(model, data(), config)
        assert len(trace) == 0
        for k, v in model.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_max_iterations_zero(self):
        model, config = small_setup(max_iterations=0)
        _, trace = train(model, data(), config)
        assert len(trace) == 0

    @pytest.mark.parametrize("interval,changes", [(1, True), (2, False)])
    def test_interval_semantics(self, interval, changes):
        model, config = small_setup(alpha_update_interval=interval, max_iterations=1)
        before = raws(model)
        train(model, data(), config)
        assert (raws(model) != before) == changes

    def test_alpha_updates_exactly_at_multiples(self):
        model, config = small_setup(alpha_update_interval=3, epochs=2)
        _, trace = train(model, data(per_class=10), config)
        updates = [r.iteration for r in trace if r.event == "alpha_update"]
        total = total_iterations(30, config)
        assert updates == [i for i in range(1, total + 1) if i % 3 == 0]
        assert sum(r.event == "epoch_end" for r in trace) == 2

    def test_weights_step_every_iteration(self):
        model, config = small_setup(alpha_update_interval=None, max_iterations=1)
        w = model.head.weight.data.copy()
        before = raws(model)
        train(model, data(), config)
        assert not np.array_equal(w, model.head.weight.data)
        assert raws(model) == before

    def test_limit_one_below_current(self):
        model, config = small_setup(alpha_update_interval=1)
        d_cout = current_final_dim(model)
        config.d_limit = d_cout - 1
        config.max_iterations = 1
        _, trace = train(model, data(), config)
        assert model.plan().final_dim <= config.d_limit
        assert all(r.dims[-1] <= config.d_limit for r in trace)
        assert trace.records[0].rho < 1

    @pytest.mark.parametrize("rule_limit", [2, 3, 5])
    def test_limit_holds_at_every_record(self, rule_limit):
        model, config = small_setup(alpha_update_interval=1, d_limit=rule_limit, epochs=2,
                                    alpha_lr=0.5)
        _, trace = train(model, data(), config)
        assert len(trace) > 0 and all(r.dims[-1] <= rule_limit for r in trace)

    def test_deterministic_under_seed(self):
        results = []
        for _ in range(2):
            model, config = small_setup(alpha_update_interval=2, epochs=2, augment=True)
            _, trace = train(model, data(), config)
            results.append((model.state_dict(), trace))
        (a, ta), (b, tb) = results
        assert ta == tb
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts_with_snapshot(self):
        model, config = small_setup(weight_lr=1e30, epochs=3)
        with pytest.raises(TrainingDiverged) as info:
            train(model, data(), config)
        snap = info.value.snapshot
        assert snap["iteration"] > 1 and not math.isfinite(snap["loss"])
        assert len(snap["factors"]) == 2

    def test_empty_dataset_rejected(self):
        model, config = small_setup()
        empty = Dataset(np.zeros((0, 3, 16, 16)), np.zeros(0), 3)
        with pytest.raises(ValueError):
            train(model, empty, config)

    def test_loss_decreases_on_fixed_batch(self):
        model, config = small_setup(alpha_update_interval=None)
        xb, yb = next(batch_iterator(data(), 12))
        group = ParamGroup("weights", model.weight_parameters(), 0.05, 0.9)
        losses = []
        for _ in range(50):
            loss = softmax_cross_entropy(model.forward(xb), yb)
            losses.append(float(loss.data))
            loss.backward()
            sgd_momentum_step(group)
        assert losses[-1] < losses[0]
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_sink_receives_lines(self):
        model, config = small_setup(alpha_update_interval=1, max_iterations=3)
        sink = io.StringIO()
        _, trace = train(model, data(), config, sink=sink)
        assert parse_shape_trace(sink.getvalue().splitlines()) == trace


class TestEvaluate:
    def test_chance_level(self):
        ds = synth_dataset(10, 20, dim=8, seed=0)
        model = FixedLogits(lambda x: np.zeros((len(x), 10)))
        assert evaluate(model, ds) == pytest.approx(0.1)

    def test_labels_as_predictions(self):
        ds = synth_dataset(4, 5, dim=8, seed=0)
        lookup = {ds.images[i].tobytes(): ds.labels[i] for i in range(len(ds))}
        model = FixedLogits(lambda x: np.eye(4)[[lookup[img.tobytes()] for img in x]])
        assert evaluate(model, ds, batch_size=7) == 1.0

    def test_deterministic(self):
        model, _ = small_setup()
        ds = data()
        assert evaluate(model, ds) == evaluate(model, ds)

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(FixedLogits(None), Dataset(np.zeros((0, 3, 4, 4)), np.zeros(0), 2))


class TestTraceIO:
    def record(self, i=1):
        return TraceRecord(i, 0, "alpha_update", [0.7, 0.8], [-0.3, 0.4], 0.95, [16, 11, 8],
                           1.25, 0.1, 0.05, [16, 16, 11, 8])

    def test_empty_trace_writes_nothing(self):
        sink = io.StringIO()
        record_shape_trace(ShapeTrace(), sink)
        assert sink.getvalue() == ""

    def test_one_record_one_line(self):
        sink = io.StringIO()
        record_shape_trace(ShapeTrace([self.record()]), sink)
        lines = sink.getvalue().splitlines()
        assert len(lines) == 1
        for name in ("iteration", "factors", "rho", "dims", "loss", "alpha_lr", "weight_lr"):
            assert f'"{name}"' in lines[0]

    def test_round_trip(self):
        trace = ShapeTrace([self.record(i) for i in range(1, 4)])
        sink = io.StringIO()
        record_shape_trace(trace, sink)
        assert parse_shape_trace(io.StringIO(sink.getvalue())) == trace

    def test_write_failure(self):
        sink = io.StringIO()
        sink.close()
        with pytest.raises(ValueError):
            record_shape_trace(ShapeTrace([self.record()]), sink)

    def test_factor_series(self):
        its, factors = ShapeTrace([self.record(2), self.record(4)]).factor_series()
        assert list(its) == [2, 4] and factors.shape == (2, 2)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model, config = small_setup(alpha_update_interval=1, max_iterations=2)
        train(model, data(), config)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, model, config, iteration=2, groups=model.optim_groups)
        again, cfg, iteration, buffers = load_checkpoint(path)
        assert cfg == config and iteration == 2
        for k, v in model.state_dict().items():
            np.testing.assert_array_equal(v, again.state_dict()[k])
        assert any(k.startswith("weights/") for k in buffers)
        assert any(k.startswith("shape/") for k in buffers)
        x = next(batch_iterator(data(), 4))[0]
        model.eval(); again.eval()
        np.testing.assert_array_equal(model.forward(x).data, again.forward(x).data)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "other.npz"
        np.savez(path, __meta__=np.array('{"format": "x"}'))
        with pytest.raises(ValueError):
            load_checkpoint(path)
