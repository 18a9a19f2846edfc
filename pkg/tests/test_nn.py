import numpy as np
import pytest

from oracles import naive_forward
from pinact import nn
from pinact.linalg import SeededRng


def small_conv_spec():
    return nn.NetworkSpec(
        [
            nn.Conv2d(1, 3, 3, 2, 1),
            nn.PReLU(3),
            nn.Conv2d(3, 4, 3, 2, 1),
            nn.PReLU(4),
            nn.Flatten(),
            nn.Affine(4 * 4 * 4, 5),
            nn.Sigmoid(),
        ],
        (1, 16, 16),
    )


def test_sigmoid_at_zero():
    spec = nn.NetworkSpec([nn.Sigmoid()], (4,))
    out = nn.predict(spec, [{}], np.zeros(4))
    assert np.allclose(out, 0.5)


def test_affine_identity():
    spec = nn.NetworkSpec([nn.Affine(3, 3)], (3,))
    params = [{"w": np.eye(3), "b": np.zeros(3)}]
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(nn.predict(spec, params, x), x)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_straight_line_oracle(seed):
    spec = small_conv_spec()
    params = nn.init_params(spec, SeededRng(seed, 0))
    x = SeededRng(seed, 1).standard_normal(256).reshape(1, 16, 16)
    ours = nn.predict(spec, params, x)
    ref = naive_forward(spec, params, x)
    assert np.max(np.abs(ours - ref)) < 1e-12


def test_forward_deterministic():
    spec = small_conv_spec()
    params = nn.init_params(spec, SeededRng(0, 0))
    x = SeededRng(0, 1).standard_normal(256).reshape(1, 16, 16)
    a = nn.predict(spec, params, x)
    b = nn.predict(spec, params, x)
    assert np.array_equal(a, b)


def test_linear_input_gradient_is_weight_row():
    spec = nn.NetworkSpec([nn.Affine(4, 3)], (4,))
    params = nn.init_params(spec, SeededRng(1, 0))
    x = np.array([0.5, -1.0, 2.0, 0.0])
    _, tape = nn.forward(spec, params, x)
    upstream = np.zeros(3)
    upstream[1] = 1.0
    res = nn.backward(tape, upstream)
    assert np.allclose(res.input_grad, params[0]["w"][1])


def test_sigmoid_gradient_at_zero():
    spec = nn.NetworkSpec([nn.Sigmoid()], (1,))
    _, tape = nn.forward(spec, [{}], np.zeros(1))
    res = nn.backward(tape, np.ones(1))
    assert np.allclose(res.input_grad, 0.25)


def test_tape_single_use():
    spec = nn.NetworkSpec([nn.Sigmoid()], (2,))
    _, tape = nn.forward(spec, [{}], np.zeros(2))
    nn.backward(tape, np.ones(2))
    with pytest.raises(RuntimeError, match="consumed"):
        nn.backward(tape, np.ones(2))


def test_upstream_shape_checked():
    spec = nn.NetworkSpec([nn.Affine(2, 3)], (2,))
    params = nn.init_params(spec, SeededRng(0, 0))
    _, tape = nn.forward(spec, params, np.zeros(2))
    with pytest.raises(ValueError, match="upstream"):
        nn.backward(tape, np.ones(4))


LAYER_STACKS = [
    ([nn.Affine(6, 4)], (6,)),
    ([nn.Affine(6, 4), nn.Sigmoid()], (6,)),
    ([nn.Affine(6, 4), nn.PReLU(1)], (6,)),
    ([nn.Affine(6, 4), nn.PReLU(4)], (6,)),
    ([nn.Affine(6, 4), nn.L2Normalize()], (6,)),
    ([nn.Conv2d(2, 3, 3, 1, 1), nn.Flatten()], (2, 5, 5)),
    ([nn.Conv2d(2, 3, 3, 2, 1), nn.PReLU(3), nn.Flatten()], (2, 6, 6)),
    ([nn.Conv2d(1, 2, 3, 2, 0), nn.Sigmoid(), nn.Flatten()], (1, 7, 7)),
    (
        [nn.Conv2d(1, 3, 3, 2, 1), nn.PReLU(3), nn.Flatten(),
         nn.Affine(3 * 4 * 4, 6), nn.L2Normalize()],
        (1, 8, 8),
    ),
]


@pytest.mark.parametrize("layers,shape", LAYER_STACKS)
@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(layers, shape, seed):
    spec = nn.NetworkSpec(layers, shape)
    params = nn.init_params(spec, SeededRng(seed, 2))
    x = SeededRng(seed, 3).standard_normal(int(np.prod(shape))).reshape(shape)
    rep = nn.grad_check(spec, params, x, rng=SeededRng(seed, 4), n_coords=200)
    assert rep["passed"], rep


def test_grad_check_identity_net_exact():
    spec = nn.NetworkSpec([nn.Affine(3, 3)], (3,))
    params = [{"w": np.eye(3), "b": np.zeros(3)}]
    x = np.array([0.3, -0.7, 1.1])
    _, tape = nn.forward(spec, params, x)
    upstream = np.array([1.0, 2.0, -1.0])
    res = nn.backward(tape, upstream)
    assert np.array_equal(res.input_grad, upstream)


def test_prelu_slopes_at_origin():
    spec = nn.NetworkSpec([nn.PReLU(1)], (1,))
    params = [{"slope": np.array([0.17])}]
    for x, expected in [(1e-12, 1.0), (-1e-12, 0.17), (0.0, 0.17)]:
        _, tape = nn.forward(spec, params, np.array([x]))
        res = nn.backward(tape, np.ones(1))
        assert res.input_grad[0] == pytest.approx(expected)


def test_empty_conv_rejected_at_validation():
    with pytest.raises(ValueError, match="channel"):
        nn.NetworkSpec([nn.Conv2d(1, 0, 3, 1, 1)], (1, 8, 8))


def test_shape_mismatch_rejected():
    spec = nn.NetworkSpec([nn.Affine(4, 2)], (4,))
    params = nn.init_params(spec, SeededRng(0, 0))
    with pytest.raises(ValueError, match="shape"):
        nn.forward(spec, params, np.zeros(5))


def test_incompatible_stack_rejected():
    with pytest.raises(ValueError):
        nn.NetworkSpec([nn.Affine(4, 2), nn.Affine(3, 2)], (4,))
    with pytest.raises(ValueError):
        nn.NetworkSpec([], (4,))


def test_sgd_without_momentum_is_plain_step():
    params = [{"w": np.array([1.0, 2.0])}]
    grads = [{"w": np.array([0.5, -0.5])}]
    state = nn.init_optimizer(params, lr=0.1, momentum=0.0)
    nn.sgd_momentum_step(params, grads, state)
    assert np.allclose(params[0]["w"], [0.95, 2.05])


def test_momentum_velocity_geometric_limit():
    params = [{"w": np.zeros(1)}]
    grads = [{"w": np.ones(1)}]
    state = nn.init_optimizer(params, lr=0.0, momentum=0.9)
    for _ in range(300):
        nn.sgd_momentum_step(params, grads, state)
    assert state.velocity[0]["w"][0] == pytest.approx(10.0, rel=1e-6)


def test_learning_rate_halves_on_schedule():
    state = nn.init_optimizer([{"w": np.zeros(1)}], lr=0.01, decay_epochs=20)
    rates = {}
    for epoch in (0, 19, 20, 39, 40):
        state.epoch = epoch
        rates[epoch] = state.current_lr()
    assert rates[0] == rates[19] == 0.01
    assert rates[20] == rates[39] == 0.005
    assert rates[40] == 0.0025


def test_non_finite_gradient_skips_step():
    params = [{"w": np.array([1.0])}]
    grads = [{"w": np.array([np.nan])}]
    state = nn.init_optimizer(params, lr=0.1)
    with pytest.warns(UserWarning, match="skipped"):
        nn.sgd_momentum_step(params, grads, state)
    assert params[0]["w"][0] == 1.0
    assert state.skipped_steps == 1


def test_grad_clip():
    grads = [{"w": np.array([3.0, 4.0])}]
    total = nn.clip_grad_norm(grads, 1.0)
    assert total == pytest.approx(5.0)
    assert np.linalg.norm(grads[0]["w"]) == pytest.approx(1.0)


def test_softmax_cross_entropy_gradient():
    logits = np.array([0.2, -1.0, 0.5])
    loss, grad = nn.softmax_cross_entropy(logits, 2)
    h = 1e-6
    for j in range(3):
        bumped = logits.copy()
        bumped[j] += h
        loss2, _ = nn.softmax_cross_entropy(bumped, 2)
        assert (loss2 - loss) / h == pytest.approx(grad[j], abs=1e-4)


def test_checkpoint_round_trip(tmp_path):
    spec = small_conv_spec()
    params = nn.init_params(spec, SeededRng(5, 0))
    path = tmp_path / "net.imnn"
    nn.save_params(path, spec, params)
    back = nn.load_params(path, spec)
    for mine, theirs in zip(params, back):
        for key in mine:
            assert np.array_equal(mine[key], theirs[key])


def test_checkpoint_spec_mismatch(tmp_path):
    spec = small_conv_spec()
    params = nn.init_params(spec, SeededRng(5, 0))
    path = tmp_path / "net.imnn"
    nn.save_params(path, spec, params)
    other = nn.NetworkSpec([nn.Affine(4, 4)], (4,))
    with pytest.raises(ValueError, match="spec"):
        nn.load_params(path, other)
