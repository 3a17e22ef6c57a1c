import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regimenrl import qnet
from regimenrl.errors import (
    ModelFormatError,
    ModelShapeError,
    ModelTruncatedError,
    ModelVersionError,
    ShapeError,
)
from regimenrl.preprocess import TransitionSet


def make_batch(rng, n, d, n_actions, terminal_p=0.2):
    return TransitionSet(
        states=rng.normal(size=(n, d)),
        actions=rng.integers(0, n_actions, size=n),
        rewards=rng.normal(size=n),
        next_states=rng.normal(size=(n, d)),
        terminal=rng.random(n) < terminal_p,
        patient_ids=np.array(["p"] * n, dtype=object),
        encounter_index=np.arange(n),
    )


def numeric_grad(params, batch, targets, masks, h=1e-5):
    grads = []
    for arr in params.arrays():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            up = qnet.loss_and_grad(params, batch.states, batch.actions, targets, masks)[1]
            arr[i] = old - h
            down = qnet.loss_and_grad(params, batch.states, batch.actions, targets, masks)[1]
            arr[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b):
    a = np.concatenate([x.ravel() for x in a])
    b = np.concatenate([x.ravel() for x in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def gradient_check(n_batches=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_batches):
        params = qnet.init(4, 3, seed=k, hidden=(8, 8))
        # Zero init biases put fully-dropped rows exactly on a ReLU kink.
        params.biases = [rng.normal(scale=0.1, size=b.shape) for b in params.biases]
        target = qnet.init(4, 3, seed=1000 + k, hidden=(8, 8))
        batch = make_batch(rng, 16, 4, 3)
        targets = qnet.td_targets(target, batch.rewards, batch.next_states, batch.terminal, 0.9)
        masks = qnet.dropout_masks(params, 16, rng) if k % 2 else None
        analytic = qnet.backward(params, batch, targets, masks)
        worst = max(worst, relative_error(analytic, numeric_grad(params, batch, targets, masks)))
    return worst


def test_gradient_matches_finite_differences():
    assert gradient_check() < 1e-4


def adam_two_step_oracle():
    """Scalar parameter 1.0, gradients 0.5 then -0.2, alpha 0.1, traced by hand."""
    a, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    m1, v1 = 0.1 * 0.5, 0.001 * 0.25
    th1 = 1.0 - a * (m1 / 0.1) / ((v1 / 0.001) ** 0.5 + eps)
    m2 = b1 * m1 + 0.1 * -0.2
    v2 = b2 * v1 + 0.001 * 0.04
    th2 = th1 - a * (m2 / (1 - b1 ** 2)) / ((v2 / (1 - b2 ** 2)) ** 0.5 + eps)
    return th1, th2


def test_adam_two_steps():
    th1, th2 = adam_two_step_oracle()
    assert th1 == pytest.approx(0.900000002, abs=1e-12)
    p = qnet.QNetworkParams([np.array([[1.0]])], [np.array([0.0])])
    state = qnet.AdamState.zeros_like(p, alpha=0.1)
    qnet.adam_step(p, [np.array([[0.5]]), np.array([0.0])], state)
    assert abs(p.weights[0][0, 0] - th1) < 1e-12
    qnet.adam_step(p, [np.array([[-0.2]]), np.array([0.0])], state)
    assert abs(p.weights[0][0, 0] - th2) < 1e-12
    assert state.t == 2 and p.biases[0][0] == 0.0
    with pytest.raises(ShapeError):
        qnet.adam_step(p, [np.zeros((2, 2)), np.zeros(1)], state)


def test_td_worked_example():
    # Q(s) = [0, 0] at s = 0; Q(s') = [2, 1] at s' = 1.
    p = qnet.QNetworkParams([np.array([[2.0, 1.0]])], [np.zeros(2)])
    batch = TransitionSet(np.array([[0.0]]), np.array([0]), np.array([1.0]), np.array([[1.0]]),
                          np.array([False]), np.array(["x"], dtype=object), np.array([0]))
    loss, targets = qnet.td_loss(p, p, batch, 0.9)
    assert targets[0] == pytest.approx(2.8)
    assert loss == pytest.approx(7.84)
    batch.terminal[:] = True
    loss, targets = qnet.td_loss(p, p, batch, 0.9)
    assert targets[0] == 1.0 and loss == pytest.approx(1.0)


class TestForward:
    def test_shapes_and_modes(self):
        p = qnet.init(5, 4, seed=1)
        assert p.layer_sizes == [5, 256, 512, 256, 4]
        x = np.ones((3, 5))
        assert qnet.forward(p, x).shape == (3, 4)
        assert qnet.forward(p, x[0]).shape == (4,)
        np.testing.assert_array_equal(qnet.forward(p, x), qnet.forward(p, x))
        a = qnet.forward(p, x, mode="train", mask_seed=7)
        np.testing.assert_array_equal(a, qnet.forward(p, x, mode="train", mask_seed=7))
        assert not np.allclose(a, qnet.forward(p, x))
        with pytest.raises(ShapeError):
            qnet.forward(p, np.ones((3, 6)))
        with pytest.raises(ValueError):
            qnet.forward(p, x, mode="other")

    def test_init_is_glorot_and_seeded(self):
        p = qnet.init(54, 10, seed=3)
        q = qnet.init(54, 10, seed=3)
        for w, v in zip(p.weights, q.weights):
            np.testing.assert_array_equal(w, v)
        limit = np.sqrt(6 / (54 + 256))
        assert np.abs(p.weights[0]).max() <= limit
        assert all((b == 0).all() for b in p.biases)

    def test_dropout_masks_are_inverted(self, rng):
        p = qnet.init(3, 2, hidden=(2000,))
        (m,) = qnet.dropout_masks(p, 50, rng)
        assert set(np.unique(m)) <= {0.0, 2.0}
        assert abs(m.mean() - 1.0) < 0.02


class TestModelFile:
    def test_roundtrip_is_exact(self, tmp_path):
        p = qnet.init(6, 3, seed=2, hidden=(5, 4))
        p.feature_stats = {"mean": [0.0] * 6, "sd": [1.0] * 6}
        p.vocabulary = {"target": "glycemia", "regimens": [[], ["BIG"], ["GLP1"]], "frequency": [1, 2, 3]}
        p.metadata = {"L": 7}
        qnet.save(p, tmp_path / "m.rxqn")
        back = qnet.load(tmp_path / "m.rxqn")
        for a, b in zip(p.arrays(), back.arrays()):
            np.testing.assert_array_equal(a, b)
        assert back.vocabulary == p.vocabulary and back.metadata == {"L": 7}
        qnet.save(back, tmp_path / "m2.rxqn")
        assert (tmp_path / "m.rxqn").read_bytes() == (tmp_path / "m2.rxqn").read_bytes()

    def test_corruptions_are_distinguished(self, tmp_path):
        p = qnet.init(2, 2, seed=0, hidden=(3,))
        path = tmp_path / "m.rxqn"
        qnet.save(p, path)
        data = path.read_bytes()
        cases = {
            ModelFormatError: b"XXXX" + data[4:],
            ModelVersionError: data[:4] + struct.pack("<H", 99) + data[6:],
            ModelTruncatedError: data[:-5],
        }
        for exc, blob in cases.items():
            path.write_bytes(blob)
            with pytest.raises(exc):
                qnet.load(path)
        path.write_bytes(data + b"\0")
        with pytest.raises(ModelFormatError, match="trailing"):
            qnet.load(path)
        meta_len = struct.unpack("<I", data[6:10])[0]
        shape_at = 10 + meta_len + 4
        bad = bytearray(data)
        bad[shape_at:shape_at + 8] = struct.pack("<II", 3, 2)
        path.write_bytes(bytes(bad))
        with pytest.raises(ModelShapeError):
            qnet.load(path)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 100.0), st.integers(0, 10_000))
def test_argmax_invariant_to_output_rescaling(scale, seed):
    rng = np.random.default_rng(seed)
    p = qnet.init(4, 5, seed=seed, hidden=(6,))
    x = rng.normal(size=(10, 4))
    q = p.copy()
    q.weights[-1] = q.weights[-1] * scale
    q.biases[-1] = q.biases[-1] * scale
    np.testing.assert_array_equal(qnet.forward(p, x).argmax(1), qnet.forward(q, x).argmax(1))
