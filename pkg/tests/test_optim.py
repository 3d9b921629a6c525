"""Optimizer update rules, the training loop, lr search, and the sweep."""
import io
import math
import types

import numpy as np
import pytest

from embfuse.errors import (
    AllDivergedError,
    EmptyDatasetError,
    NonFiniteGradientError,
    ShapeMismatchError,
    ValidationError,
)
from embfuse.model import ModelConfig
from embfuse.optim import (
    DEFAULT_LR,
    DEFAULT_LR_GRID,
    OPTIMIZER_KINDS,
    OptimizerSpec,
    SplitDataset,
    lr_range_search,
    make_optimizer,
    optimizer_sweep,
    parse_lr_grid,
    read_history_csv,
    thread_count,
    train,
    write_history_csv,
    write_lr_table,
)
from embfuse.seeding import derive_rng

from conftest import random_embedding, synthetic_dataset


class TestOptimizerSpec:
    def test_accepts_every_known_kind(self):
        for kind in OPTIMIZER_KINDS:
            assert OptimizerSpec(kind=kind, learning_rate=0.1).kind == kind

    @pytest.mark.parametrize("kwargs", [
        dict(kind="lbfgs", learning_rate=0.1),
        dict(kind="sgd", learning_rate=0.0),
        dict(kind="sgd", learning_rate=-1.0),
        dict(kind="sgd", learning_rate=float("inf")),
        dict(kind="sgd", learning_rate=float("nan")),
        dict(kind="sgd_momentum", learning_rate=0.1, momentum=1.0),
        dict(kind="sgd_momentum", learning_rate=0.1, momentum=-0.1),
        dict(kind="adam", learning_rate=0.1, adam_beta1=0.0),
        dict(kind="adam", learning_rate=0.1, adam_beta2=1.0),
        dict(kind="adam", learning_rate=0.1, adam_eps=0.0),
        dict(kind="adadelta", learning_rate=0.1, adadelta_rho=1.0),
        dict(kind="adagrad", learning_rate=0.1, adagrad_eps=-1e-9),
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValidationError):
            OptimizerSpec(**kwargs)


class TestStepRules:
    def test_sgd_step(self):
        opt = make_optimizer(OptimizerSpec(kind="sgd", learning_rate=0.1), 2)
        w = np.array([1.0, 2.0])
        g = np.array([0.5, -1.0])
        assert np.array_equal(opt.step(w, g), w - 0.1 * g)

    def test_sgd_scale_equivariance(self):
        w = derive_rng(1, "w").normal(size=6)
        g = derive_rng(1, "g").normal(size=6)
        a = make_optimizer(OptimizerSpec(kind="sgd", learning_rate=0.3), 6).step(w, g)
        b = make_optimizer(OptimizerSpec(kind="sgd", learning_rate=0.15), 6).step(w, 2.0 * g)
        assert np.array_equal(a, b)

    def test_momentum_two_step_displacement(self):
        # Unit gradient twice at lr=1, momentum 0.9: steps 1 and 1.9.
        opt = make_optimizer(OptimizerSpec(kind="sgd_momentum", learning_rate=1.0), 1)
        w = np.array([0.0])
        w = opt.step(w, np.array([1.0]))
        w = opt.step(w, np.array([1.0]))
        assert w[0] == pytest.approx(-2.9, abs=1e-12)

    def test_adagrad_first_step_closed_form(self):
        lr, g, eps = 0.01, 3.0, 1e-10
        opt = make_optimizer(OptimizerSpec(kind="adagrad", learning_rate=lr), 1)
        w = opt.step(np.array([0.0]), np.array([g]))
        expected = -lr * g / math.sqrt(g * g + eps)
        assert w[0] == expected
        assert abs(abs(w[0]) - lr) < 1e-9

    def test_adagrad_steps_shrink_under_constant_gradient(self):
        opt = make_optimizer(OptimizerSpec(kind="adagrad", learning_rate=0.5), 1)
        w = np.array([0.0])
        sizes = []
        for _ in range(4):
            w_next = opt.step(w, np.array([2.0]))
            sizes.append(abs(w_next[0] - w[0]))
            w = w_next
        assert sizes == sorted(sizes, reverse=True)
        assert sizes[0] == pytest.approx(0.5, abs=1e-9)

    def test_adadelta_first_step_closed_form(self):
        rho, eps, g = 0.95, 1e-6, 1.0
        opt = make_optimizer(OptimizerSpec(kind="adadelta", learning_rate=1.0), 1)
        w = opt.step(np.array([0.0]), np.array([g]))
        expected = -math.sqrt(eps) / math.sqrt((1.0 - rho) * g * g + eps) * g
        assert w[0] == pytest.approx(expected, rel=1e-12)

    def test_adadelta_learning_rate_scales_the_update(self):
        g = np.array([1.0, -2.0])
        a = make_optimizer(OptimizerSpec(kind="adadelta", learning_rate=1.0), 2)
        b = make_optimizer(OptimizerSpec(kind="adadelta", learning_rate=0.5), 2)
        da = a.step(np.zeros(2), g)
        db = b.step(np.zeros(2), g)
        assert np.allclose(db, 0.5 * da, rtol=0, atol=1e-18)

    def test_adam_first_step_magnitude_is_learning_rate(self):
        for g0 in (1.0, -0.5, 0.1, 7.3):
            opt = make_optimizer(OptimizerSpec(kind="adam", learning_rate=0.1), 1)
            w = opt.step(np.array([0.0]), np.array([g0]))
            assert abs(abs(w[0]) - 0.1) / 0.1 < 1e-6
            assert math.copysign(1.0, -w[0]) == math.copysign(1.0, g0)

    def test_adam_example_first_value(self):
        opt = make_optimizer(OptimizerSpec(kind="adam", learning_rate=0.1), 1)
        w = opt.step(np.array([0.0]), np.array([1.0]))
        assert w[0] == pytest.approx(-0.0999999990, abs=1e-9)

    def test_step_shape_and_finiteness_guards(self):
        opt = make_optimizer(OptimizerSpec(kind="sgd", learning_rate=0.1), 3)
        with pytest.raises(ShapeMismatchError):
            opt.step(np.zeros(4), np.zeros(4))
        with pytest.raises(ShapeMismatchError):
            opt.step(np.zeros(3), np.zeros(2))
        with pytest.raises(NonFiniteGradientError):
            opt.step(np.zeros(3), np.array([1.0, np.nan, 0.0]))
        with pytest.raises(NonFiniteGradientError):
            opt.step(np.zeros(3), np.array([1.0, np.inf, 0.0]))


class TestConvexConvergence:
    """Quadratic bowl: every optimizer must find the minimum."""

    @pytest.mark.parametrize("kind", OPTIMIZER_KINDS)
    def test_reaches_target_within_budget(self, kind):
        rng = derive_rng(17, "bowl", kind)
        target = rng.uniform(-1.0, 1.0, size=10)
        opt = make_optimizer(OptimizerSpec(kind=kind, learning_rate=DEFAULT_LR[kind]), 10)
        w = np.zeros(10)
        for step in range(10_000):
            if np.linalg.norm(w - target) < 1e-3:
                break
            w = opt.step(w, w - target)
        assert np.linalg.norm(w - target) < 1e-3, f"{kind} did not converge"


class TestParseLrGrid:
    def test_default_grid(self):
        rates = parse_lr_grid(DEFAULT_LR_GRID)
        assert len(rates) == 7
        assert rates[0] == pytest.approx(1e-8, rel=1e-12)
        assert rates[-1] == pytest.approx(1e-2, rel=1e-12)
        assert rates == sorted(rates)
        ratios = [rates[i + 1] / rates[i] for i in range(6)]
        assert all(r == pytest.approx(10.0, rel=1e-9) for r in ratios)

    @pytest.mark.parametrize("text", [
        "1e-8:1e-2", "1e-8:1e-2:lin7", "1e-2:1e-8:log7", "0:1e-2:log7",
        "1e-8:1e-2:log1", "x:1e-2:log7", "1e-8:y:log7", "1e-8:1e-2:logz",
    ])
    def test_rejects_malformed(self, text):
        with pytest.raises(ValidationError):
            parse_lr_grid(text)


def small_config(seed=3, **kw):
    base = dict(max_len=12, emb_dim=10, lstm_units=4, gru_units=3,
                spatial_dropout_rate=0.0, dropout_rate=0.0, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


class TestTrain:
    def test_history_shape_and_progress(self, tiny_dataset, tiny_embedding):
        spec = OptimizerSpec(kind="adam", learning_rate=0.01)
        _, hist = train(tiny_dataset, tiny_embedding, small_config(), spec,
                        epochs=3, batch_size=16, seed=5)
        assert hist.epochs == [1, 2, 3]
        assert len(hist.train_loss) == len(hist.test_loss) == 3
        assert len(hist.epoch_seconds) == 3
        assert not hist.diverged
        assert hist.train_loss[-1] < hist.train_loss[0]
        assert hist.optimizer == "adam" and hist.learning_rate == 0.01

    def test_same_seed_reproduces_history(self, tiny_dataset, tiny_embedding):
        spec = OptimizerSpec(kind="sgd", learning_rate=0.1)
        _, a = train(tiny_dataset, tiny_embedding, small_config(), spec,
                     epochs=2, batch_size=16, seed=9)
        _, b = train(tiny_dataset, tiny_embedding, small_config(), spec,
                     epochs=2, batch_size=16, seed=9)
        assert a.train_loss == b.train_loss
        assert a.test_loss == b.test_loss
        assert a.train_accuracy == b.train_accuracy

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_huge_learning_rate_flags_divergence(self, tiny_dataset, tiny_embedding):
        spec = OptimizerSpec(kind="sgd", learning_rate=1e307)
        _, hist = train(tiny_dataset, tiny_embedding, small_config(), spec,
                        epochs=3, batch_size=16, seed=5)
        assert hist.diverged
        assert hist.diverged_epoch is not None
        assert len(hist.train_loss) < 3

    def test_empty_train_split_rejected(self, tiny_embedding):
        empty = SplitDataset(np.zeros((0, 12)), np.zeros(0), np.zeros((0, 12)), np.zeros(0))
        with pytest.raises(EmptyDatasetError):
            train(empty, tiny_embedding, small_config(),
                  OptimizerSpec(kind="sgd", learning_rate=0.1))

    def test_bad_loop_arguments_rejected(self, tiny_dataset, tiny_embedding):
        spec = OptimizerSpec(kind="sgd", learning_rate=0.1)
        with pytest.raises(ValidationError):
            train(tiny_dataset, tiny_embedding, small_config(), spec, epochs=0)
        with pytest.raises(ValidationError):
            train(tiny_dataset, tiny_embedding, small_config(), spec, batch_size=0)

    def test_empty_test_split_records_nan_metrics(self, tiny_dataset, tiny_embedding):
        data = SplitDataset(tiny_dataset.train_x, tiny_dataset.train_y,
                            np.zeros((0, 12)), np.zeros(0))
        spec = OptimizerSpec(kind="sgd", learning_rate=0.1)
        _, hist = train(data, tiny_embedding, small_config(), spec,
                        epochs=1, batch_size=16, seed=5)
        assert math.isnan(hist.test_loss[0]) and math.isnan(hist.test_accuracy[0])


class TestSplitDataset:
    def test_from_examples_builds_arrays(self):
        train_ex = [types.SimpleNamespace(indices=[0, 2, 3], label=1),
                    types.SimpleNamespace(indices=[4, 5, 6], label=2)]
        test_ex = [types.SimpleNamespace(indices=[7, 8, 9], label=0)]
        data = SplitDataset.from_examples(train_ex, test_ex)
        assert data.train_x.tolist() == [[0, 2, 3], [4, 5, 6]]
        assert data.train_y.tolist() == [1, 2]
        assert data.test_x.tolist() == [[7, 8, 9]]
        assert data.test_y.dtype == np.int64

    def test_from_examples_empty_side(self):
        data = SplitDataset.from_examples([], [])
        assert data.train_x.shape[0] == 0 and data.test_y.shape[0] == 0


class TestLrRangeSearch:
    def test_returns_argmin_of_table(self, tiny_dataset, tiny_embedding):
        grid = [1e-6, 1e-3, 1e-1]
        best, probes = lr_range_search(tiny_dataset, tiny_embedding, small_config(),
                                       "sgd", grid=grid, epochs=2, batch_size=16, seed=5)
        finals = [p.final_loss for p in probes]
        assert [p.learning_rate for p in probes] == grid
        assert best == grid[int(np.argmin(finals))]
        assert all(len(p.epoch_losses) == 2 for p in probes)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverged_probe_kept_but_not_chosen(self, tiny_dataset, tiny_embedding):
        best, probes = lr_range_search(tiny_dataset, tiny_embedding, small_config(),
                                       "sgd", grid=[1e-3, 1e307], epochs=2,
                                       batch_size=16, seed=5)
        assert best == 1e-3
        assert probes[1].diverged and probes[1].final_loss == math.inf
        assert not probes[0].diverged

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_all_diverged_raises(self, tiny_dataset, tiny_embedding):
        with pytest.raises(AllDivergedError):
            lr_range_search(tiny_dataset, tiny_embedding, small_config(),
                            "sgd", grid=[1e307, 1e308], epochs=1, batch_size=16, seed=5)

    def test_empty_grid_rejected(self, tiny_dataset, tiny_embedding):
        with pytest.raises(ValidationError):
            lr_range_search(tiny_dataset, tiny_embedding, small_config(),
                            "sgd", grid=[], epochs=1)

    def test_lr_table_format(self):
        from embfuse.optim import LrProbe
        probes = [LrProbe(1e-3, [1.0, 0.5], 0.5, False),
                  LrProbe(1e300, [], math.inf, True)]
        fh = io.StringIO()
        write_lr_table(probes, fh)
        lines = fh.getvalue().splitlines()
        assert lines[0] == "learning_rate,final_train_loss,diverged,epochs_completed"
        assert lines[1] == "0.001,0.5,0,2"
        assert lines[2] == "1e+300,,1,0"


class TestHistoryCsv:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_round_trip_exact(self, tiny_dataset, tiny_embedding):
        config = small_config()
        _, ok = train(tiny_dataset, tiny_embedding, config,
                      OptimizerSpec(kind="adam", learning_rate=0.01),
                      epochs=2, batch_size=16, seed=5, pair_id="pair-a")
        _, bad = train(tiny_dataset, tiny_embedding, config,
                       OptimizerSpec(kind="sgd", learning_rate=1e307),
                       epochs=2, batch_size=16, seed=5, pair_id="pair-b")
        fh = io.StringIO()
        write_history_csv([ok, bad], fh)
        back = read_history_csv(io.StringIO(fh.getvalue()))
        assert len(back) == 2
        assert back[0].pair == "pair-a" and back[0].optimizer == "adam"
        assert back[0].train_loss == ok.train_loss
        assert back[0].test_accuracy == ok.test_accuracy
        assert back[0].learning_rate == 0.01 and back[0].seed == 5
        assert not back[0].diverged
        assert back[1].diverged
        assert back[1].train_loss == bad.train_loss

    def test_zero_epoch_diverged_row(self):
        from embfuse.optim import TrainingHistory
        hist = TrainingHistory(pair="p", optimizer="sgd", learning_rate=1e300,
                               seed=1, diverged=True, diverged_epoch=1)
        fh = io.StringIO()
        write_history_csv([hist], fh)
        lines = fh.getvalue().splitlines()
        assert len(lines) == 2
        assert lines[1] == "p,sgd,1e+300,1,0,,,,,1"
        back = read_history_csv(io.StringIO(fh.getvalue()))
        assert back[0].diverged and back[0].train_loss == []

    def test_header_validated(self):
        with pytest.raises(ValidationError):
            read_history_csv(io.StringIO("nope,nope\n1,2\n"))


class TestThreadCount:
    def test_default_is_serial(self, monkeypatch):
        monkeypatch.delenv("EMBFUSE_THREADS", raising=False)
        monkeypatch.delenv("EMBFUSE_DETERMINISTIC", raising=False)
        assert thread_count() == 1

    def test_env_sets_workers(self, monkeypatch):
        monkeypatch.setenv("EMBFUSE_THREADS", "4")
        monkeypatch.delenv("EMBFUSE_DETERMINISTIC", raising=False)
        assert thread_count() == 4

    def test_deterministic_forces_serial(self, monkeypatch):
        monkeypatch.setenv("EMBFUSE_THREADS", "8")
        monkeypatch.setenv("EMBFUSE_DETERMINISTIC", "1")
        assert thread_count() == 1

    def test_nonpositive_clamped(self, monkeypatch):
        monkeypatch.setenv("EMBFUSE_THREADS", "0")
        monkeypatch.delenv("EMBFUSE_DETERMINISTIC", raising=False)
        assert thread_count() == 1

    def test_garbage_rejected(self, monkeypatch):
        monkeypatch.setenv("EMBFUSE_THREADS", "many")
        monkeypatch.delenv("EMBFUSE_DETERMINISTIC", raising=False)
        with pytest.raises(ValidationError):
            thread_count()


class TestOptimizerSweep:
    def test_cells_are_pair_major_with_shared_lr(self, tiny_dataset):
        pairs = [("alpha", random_embedding(seed=1)), ("beta", random_embedding(seed=2))]
        hists = optimizer_sweep(tiny_dataset, small_config(), pairs,
                                learning_rate=0.05, kinds=("sgd", "adam"),
                                epochs=2, batch_size=16, seed=5)
        assert [(h.pair, h.optimizer) for h in hists] == [
            ("alpha", "sgd"), ("alpha", "adam"), ("beta", "sgd"), ("beta", "adam")]
        assert all(h.learning_rate == 0.05 for h in hists)
        assert all(len(h.train_loss) == 2 for h in hists)

    def test_default_lr_comes_from_sgd_search(self, tiny_dataset, tiny_embedding):
        grid_best, _ = lr_range_search(tiny_dataset, tiny_embedding, small_config(),
                                       "sgd", epochs=1, batch_size=32, seed=5)
        hists = optimizer_sweep(tiny_dataset, small_config(),
                                [("only", tiny_embedding)], kinds=("sgd",),
                                epochs=1, batch_size=32, seed=5, lr_search_epochs=1)
        assert hists[0].learning_rate == grid_best

    def test_no_pairs_rejected(self, tiny_dataset):
        with pytest.raises(ValidationError):
            optimizer_sweep(tiny_dataset, small_config(), [], learning_rate=0.1)

    def test_rerun_is_identical(self, tiny_dataset, tiny_embedding):
        kwargs = dict(learning_rate=0.05, kinds=("sgd", "adagrad"),
                      epochs=2, batch_size=16, seed=6)
        a = optimizer_sweep(tiny_dataset, small_config(), [("p", tiny_embedding)], **kwargs)
        b = optimizer_sweep(tiny_dataset, small_config(), [("p", tiny_embedding)], **kwargs)
        assert [h.train_loss for h in a] == [h.train_loss for h in b]
        assert [h.test_loss for h in a] == [h.test_loss for h in b]

    def test_threaded_matches_serial(self, tiny_dataset, tiny_embedding, monkeypatch):
        kwargs = dict(learning_rate=0.05, kinds=("sgd", "adam"),
                      epochs=1, batch_size=16, seed=6)
        monkeypatch.delenv("EMBFUSE_THREADS", raising=False)
        monkeypatch.delenv("EMBFUSE_DETERMINISTIC", raising=False)
        serial = optimizer_sweep(tiny_dataset, small_config(), [("p", tiny_embedding)], **kwargs)
        monkeypatch.setenv("EMBFUSE_THREADS", "3")
        threaded = optimizer_sweep(tiny_dataset, small_config(), [("p", tiny_embedding)], **kwargs)
        assert [h.train_loss for h in serial] == [h.train_loss for h in threaded]
        assert [(h.pair, h.optimizer) for h in serial] == [(h.pair, h.optimizer) for h in threaded]


class TestSyntheticGenerator:
    def test_labels_follow_signal_tokens(self):
        data = synthetic_dataset(n=90, seed=2)
        for x, y in zip(data.train_x, data.train_y):
            present = [t for t in (2, 3, 4) if t in x]
            assert present == [2 + int(y)]
