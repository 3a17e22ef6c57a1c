import numpy as np
import pytest

from regimenrl import qnet, toy_mdp
from regimenrl import trainer as tr
from regimenrl.errors import ConfigError, EmptyDatasetError


def tiny_cfg(**kw):
    base = dict(hidden_sizes=(8,), minibatch_size=16, max_iterations=50, early_stop_patience=None,
                learning_rate=1e-3, target_sync_period=10, validation_eval_period=10)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def toy_set():
    return toy_mdp.logged_dataset(toy_mdp.chain_mdp(), n=2000, seed=3)


class TestSplit:
    def test_disjoint_cover_and_rounding(self):
        ids = [f"p{i}" for i in range(7)]
        a, b = tr.split_patients(ids, (0.6, 0.4), seed=1)
        assert len(a) == 5 and len(b) == 2
        assert sorted(a + b) == sorted(ids)
        assert tr.split_patients(ids, (0.6, 0.4), seed=1) == (a, b)

    def test_degenerate(self):
        with pytest.raises(EmptyDatasetError):
            tr.split_patients([])
        with pytest.warns(UserWarning):
            tr.split_patients(["only"], (0.6, 0.4))


def test_recommend_breaks_ties_low():
    p = qnet.QNetworkParams([np.zeros((2, 3))], [np.array([1.0, 1.0, 0.5])])
    assert tr.recommend(p, np.zeros(2)) == 0
    assert tr.recommend(p, np.zeros((4, 2))).tolist() == [0, 0, 0, 0]


def test_config_validation():
    for bad in (dict(gamma=1.0), dict(minibatch_size=0), dict(dropout=1.0), dict(early_stop_patience=0)):
        with pytest.raises(ConfigError):
            tiny_cfg(**bad).validate()


def test_zero_iterations_returns_initial_network(toy_set):
    p, report = tr.train_dqn(toy_set, None, tiny_cfg(max_iterations=0))
    assert report.iterations_run == 0 and report.curve == []
    fresh = qnet.init(5, 3, int(np.random.SeedSequence(0).spawn(3)[0].generate_state(1)[0]), (8,))
    for a, b in zip(p.arrays(), fresh.arrays()):
        np.testing.assert_array_equal(a, b)


def test_seeded_runs_are_bit_identical(toy_set):
    a, ra = tr.train_dqn(toy_set, None, tiny_cfg(dropout=0.5, seed=4))
    b, rb = tr.train_dqn(toy_set, None, tiny_cfg(dropout=0.5, seed=4))
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert ra.to_dict() == rb.to_dict()
    c, _ = tr.train_dqn(toy_set, None, tiny_cfg(dropout=0.5, seed=5))
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_target_network_lags_by_sync_period(toy_set):
    seen = []

    def watch(k, params, target):
        seen.append((k, [w.copy() for w in params.weights], [w.copy() for w in target.weights]))

    tr.train_dqn(toy_set, None, tiny_cfg(max_iterations=25, target_sync_period=10), on_iteration=watch)
    by_k = {k: (p, t) for k, p, t in seen}
    for k, _, target in seen:
        synced_at = (k // 10) * 10
        expected = by_k[synced_at][0] if synced_at else None
        if expected is None:
            # before the first sync the target is the initial network, never updated
            assert all(np.array_equal(a, b) for a, b in zip(target, seen[0][2]))
        else:
            assert all(np.array_equal(a, b) for a, b in zip(target, expected))


class TestEarlyStopping:
    def stalling_loss(self, best_at):
        def fn(params, k):
            return 1.0 - k / 1e4 if k <= best_at else 2.0
        return fn

    @pytest.mark.parametrize("best_at,patience,period", [(300, 200, 100), (150, 500, 50), (70, 30, 10)])
    def test_halts_within_patience_plus_period(self, toy_set, best_at, patience, period):
        cfg = tiny_cfg(max_iterations=10_000, early_stop_patience=patience, validation_eval_period=period)
        _, report = tr.train_dqn(toy_set, None, cfg, val_loss_fn=self.stalling_loss(best_at))
        assert report.stop_reason == "early_stop"
        best = max(k for k in range(0, best_at + 1, period))
        assert report.best_iteration == best
        assert best + patience <= report.iterations_run <= best + patience + period

    def test_min_delta_ignores_tiny_gains(self, toy_set):
        cfg = tiny_cfg(max_iterations=2000, early_stop_patience=100, min_delta=0.01)
        _, report = tr.train_dqn(toy_set, None, cfg, val_loss_fn=lambda p, k: 1.0 - k * 1e-6)
        assert report.best_iteration == 10 and report.iterations_run == 110

    def test_requires_validation_data(self, toy_set):
        with pytest.raises(EmptyDatasetError):
            tr.train_dqn(toy_set, None, tiny_cfg(early_stop_patience=10))


class TestFullScheme:
    def test_step_b_runs_exactly_l(self, toy_set):
        cfg = tiny_cfg(max_iterations=5000, early_stop_patience=40)

        def fn(params, k):
            return 1.0 - k / 1e4 if k <= 120 else 2.0

        params, rb, ra = tr.train_full_scheme(toy_set, cfg, val_loss_fn=fn)
        assert ra.stop_reason == "early_stop" and ra.iterations_run == 160
        assert rb.iterations_run == ra.iterations_run == params.metadata["L"]
        assert rb.stop_reason == "fixed_L"
        assert params.metadata["iterations"] == 160

    def test_holds_out_whole_patients(self, toy_set):
        with pytest.raises(EmptyDatasetError):
            tr.train_full_scheme(toy_set.for_patients(["toy000"]), tiny_cfg())
