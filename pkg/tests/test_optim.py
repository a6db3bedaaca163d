"""Adam optimizer: first-step magnitude, convergence, bit-exact resumption.

With zero-initialized moments the bias correction makes the first update
exactly lr * g / (|g| + eps), close to a signed step of size lr.  A resumed
optimizer must continue bit-identically, which training relies on for
restartable runs.
"""

from __future__ import annotations

import numpy as np

from lineplace import nn
from lineplace.nn.optim import Adam, adam_step


def test_first_step_is_signed_lr():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([10.0, -3.0, 0.2])
    adam_step([p], [g], {}, lr=0.01)
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expected, atol=1e-12)
    np.testing.assert_allclose(p, [0.99, -1.99, 0.49], atol=1e-8)


def test_none_grad_skips_param():
    p1, p2 = np.array([1.0]), np.array([2.0])
    adam_step([p1, p2], [np.array([1.0]), None], {}, lr=0.1)
    assert p1[0] != 1.0
    assert p2[0] == 2.0


def test_quadratic_convergence():
    x = nn.Tensor(np.array([10.0]), requires_grad=True, dtype=np.float64)
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        with nn.Tape() as tape:
            loss = nn.tensor_sum((x - 3.0) * (x - 3.0))
            tape.backward(loss)
        opt.step()
    assert abs(x.data[0] - 3.0) < 1e-3


def _make_problem(seed):
    # realizable least squares: the target comes from a hidden linear map
    rng = np.random.default_rng(seed)
    w = nn.Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64)
    b = nn.Tensor(rng.normal(size=(3,)), requires_grad=True, dtype=np.float64)
    data = rng.normal(size=(20, 4))
    target = data @ rng.normal(size=(4, 3)) + rng.normal(size=(3,))
    return w, b, data, target


def _train_steps(w, b, data, target, opt, n_steps):
    losses = []
    for _ in range(n_steps):
        opt.zero_grad()
        with nn.Tape() as tape:
            err = nn.Tensor(data) @ w + b - nn.Tensor(target)
            loss = nn.tensor_mean(err * err)
            tape.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    return losses


def test_resume_is_bit_exact():
    w, b, data, target = _make_problem(0)
    opt = Adam({"w": w, "b": b}, lr=1e-2)
    _train_steps(w, b, data, target, opt, 7)
    snap_w, snap_b = w.data.copy(), b.data.copy()
    snap_state = {k: np.asarray(v).copy() for k, v in opt.state_dict().items()}

    cont = _train_steps(w, b, data, target, opt, 5)
    final_direct = w.data.copy(), b.data.copy()

    w2, b2, _, _ = _make_problem(0)
    w2.data, b2.data = snap_w.copy(), snap_b.copy()
    opt2 = Adam({"w": w2, "b": b2}, lr=1e-2)
    opt2.load_state_dict(snap_state)
    resumed = _train_steps(w2, b2, data, target, opt2, 5)

    assert cont == resumed
    np.testing.assert_array_equal(final_direct[0], w2.data)
    np.testing.assert_array_equal(final_direct[1], b2.data)


def test_state_dict_before_any_step_is_fresh():
    w = nn.Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    state = opt.state_dict()
    assert int(state["t"]) == 0
    opt2 = Adam({"w": nn.Tensor(np.ones(2), requires_grad=True)}, lr=0.1)
    opt2.load_state_dict(state)  # no-op, must not raise
    assert opt2.state == {}


def test_loss_decreases_on_least_squares():
    w, b, data, target = _make_problem(1)
    opt = Adam({"w": w, "b": b}, lr=1e-2)
    losses = _train_steps(w, b, data, target, opt, 200)
    assert losses[-1] < 0.1 * losses[0]
