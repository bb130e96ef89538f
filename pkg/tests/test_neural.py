import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from secprompt import neural as nn
from secprompt.neural import GraphBatch, Mat

SEEDS = range(5)
TOL = 1e-4


def _probe(rng, shape):
    """Random fixed projection that turns any matrix output into a scalar."""
    return Mat(rng.normal(size=shape))


def _scalar(out, rng):
    return nn.sum_all(nn.mul(out, _probe(rng, out.shape)))


def _path_batch(rng, n, dim):
    nbrs = [[u for u in (v - 1, v + 1) if 0 <= u < n] for v in range(n)]
    return GraphBatch(Mat(rng.normal(size=(n, dim))), nbrs, [(0, n)])


UNARY = {
    "relu": (nn.relu, lambda r: r.normal(size=(3, 4))),
    "identity": (nn.identity, lambda r: r.normal(size=(3, 4))),
    "sigmoid": (nn.sigmoid, lambda r: r.normal(size=(3, 4))),
    "log": (nn.log, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "exp": (nn.exp, lambda r: r.normal(size=(3, 4))),
    "sqrt": (nn.sqrt, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "transpose": (nn.transpose, lambda r: r.normal(size=(3, 4))),
    "sum_all": (nn.sum_all, lambda r: r.normal(size=(3, 4))),
    "mean_all": (nn.mean_all, lambda r: r.normal(size=(3, 4))),
    "sum_rows": (nn.sum_rows, lambda r: r.normal(size=(3, 4))),
    "scale": (lambda a: nn.scale(a, -1.7), lambda r: r.normal(size=(3, 4))),
    "take": (lambda a: nn.take(a, np.array([0, 2, 2]), np.array([1, 3, 3])), lambda r: r.normal(size=(3, 4))),
    "segment_softmax": (lambda a: nn.segment_softmax(a, np.array([0, 0, 1, 1, 1, 2])),
                        lambda r: r.normal(size=(6, 1))),
    "adv_loss": (nn.adv_loss, lambda r: r.uniform(0.1, 0.9, size=(5, 1))),
    "contrastive": (lambda a: nn.contrastive_loss(nn.take(a, [0], [0]), nn.take(a, [1, 2, 3], [0, 0, 0])),
                    lambda r: r.normal(size=(4, 1))),
}

BINARY = {
    "matmul": (nn.matmul, (3, 4), (4, 2)),
    "add": (nn.add, (3, 4), (3, 4)),
    "add_broadcast": (nn.add, (3, 4), (1, 4)),
    "sub": (nn.sub, (3, 4), (3, 4)),
    "mul": (nn.mul, (3, 4), (3, 4)),
    "div": (nn.div, (3, 4), (3, 4)),
    "concat_cols": (lambda a, b: nn.concat_cols([a, b]), (3, 4), (3, 2)),
    "concat_rows": (lambda a, b: nn.concat_rows([a, b]), (3, 4), (2, 4)),
    "cosine": (nn.cosine, (1, 6), (1, 6)),
    "disc_loss": (nn.disc_loss, (4, 1), (4, 1)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_gradients(name, seed):
    op, init = UNARY[name]
    rng = np.random.default_rng(seed)
    a = Mat.param(init(rng))
    probe = _probe(rng, op(a).shape)
    assert nn.grad_check(lambda: nn.sum_all(nn.mul(op(a), probe)), [a]) < TOL


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_binary_gradients(name, seed):
    op, sa, sb = BINARY[name]
    rng = np.random.default_rng(seed)
    if name in ("disc_loss",):
        a, b = Mat.param(rng.uniform(0.1, 0.9, sa)), Mat.param(rng.uniform(0.1, 0.9, sb))
    elif name == "div":
        a, b = Mat.param(rng.normal(size=sa)), Mat.param(rng.uniform(0.5, 2.0, sb))
    else:
        a, b = Mat.param(rng.normal(size=sa)), Mat.param(rng.normal(size=sb))
    probe = _probe(rng, op(a, b).shape)
    assert nn.grad_check(lambda: nn.sum_all(nn.mul(op(a, b), probe)), [a, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_graph_conv_and_pool_gradients(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    batch = _path_batch(rng, n, 5)
    w_s, w_n = Mat.param(rng.normal(size=(5, 3))), Mat.param(rng.normal(size=(5, 3)))
    w = Mat.param(rng.uniform(0.5, 1.5, size=(n, 1)))
    probe = _probe(rng, (1, 3))

    def loss():
        h = nn.graph_conv(w_s, w_n, batch, act=nn.sigmoid)
        pooled = nn.add(nn.mean_pool(h, batch.boundaries), nn.weighted_mean_pool(h, w))
        return nn.sum_all(nn.mul(pooled, probe))

    assert nn.grad_check(loss, [w_s, w_n, w]) < TOL


def test_const_matmul_gradient():
    rng = np.random.default_rng(0)
    x = Mat.param(rng.normal(size=(4, 3)))
    m = rng.normal(size=(2, 4))
    probe = _probe(rng, (2, 3))
    assert nn.grad_check(lambda: nn.sum_all(nn.mul(nn.const_matmul(m, x), probe)), [x]) < TOL


# -- graph_conv / pooling values --------------------------------------------------

def test_graph_conv_without_edges_is_self_term():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(3, 4))
    w_s, w_n = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    out = nn.graph_conv(Mat(w_s), Mat(w_n), GraphBatch.single(h, [[], [], []]))
    assert np.allclose(out.value, np.maximum(h @ w_s, 0))


def test_graph_conv_identity_weights_sum_neighbours():
    h = np.array([[1.0, 2.0], [3.0, -5.0]])
    eye = Mat(np.eye(2))
    out = nn.graph_conv(eye, eye, GraphBatch.single(h, [[1], [0]]), act=nn.identity)
    assert np.allclose(out.value[0], h[0] + h[1])


def test_graph_conv_shape_mismatch():
    with pytest.raises(nn.ShapeMismatch):
        nn.graph_conv(Mat(np.eye(3)), Mat(np.eye(3)), GraphBatch.single(np.ones((2, 2)), [[], []]))


def test_batch_rejects_cross_graph_neighbours():
    with pytest.raises(nn.ShapeMismatch):
        GraphBatch(Mat(np.ones((3, 2))), [[2], [], [0]], [(0, 2), (2, 3)])


def test_mean_pool_values():
    rows = np.array([[1.0, 2.0], [1.0, 2.0], [4.0, 0.0]])
    out = nn.mean_pool(Mat(rows), [(0, 2), (2, 3)]).value
    assert np.allclose(out, [[1.0, 2.0], [4.0, 0.0]])
    with pytest.raises(nn.EmptyGraph):
        nn.mean_pool(Mat(rows), [(0, 3), (3, 3)])


def test_cosine_values():
    a = Mat([[1.0, 2.0, -3.0]])
    assert nn.cosine(a, a).item() == pytest.approx(1.0)
    assert nn.cosine(a, nn.scale(a, -1.0)).item() == pytest.approx(-1.0)
    assert nn.cosine(Mat([[1.0, 0.0]]), Mat([[0.0, 1.0]])).item() == 0.0
    with pytest.raises(nn.ZeroVector):
        nn.cosine(a, Mat([[0.0, 0.0, 0.0]]))


# -- losses -----------------------------------------------------------------------------

def test_loss_unit_values():
    assert nn.contrastive_loss(Mat(3.0)).item() == 0.0
    assert nn.contrastive_loss(Mat(0.4), Mat([[0.4]])).item() == pytest.approx(math.log(2), abs=1e-9)
    assert nn.disc_loss(Mat(1.0), Mat(0.0)).item() == pytest.approx(0.0, abs=1e-6)
    assert nn.disc_loss(Mat(0.5), Mat(0.5)).item() == pytest.approx(2 * math.log(2))
    assert nn.adv_loss(Mat([[0.5], [0.5]])).item() == pytest.approx(math.log(2), abs=1e-9)
    assert nn.adv_loss(Mat([[1.0], [1.0]])).item() == 0.0


def test_contrastive_against_direct_evaluation():
    expected = -math.log(math.exp(2) / (math.exp(2) + 2))
    got = nn.contrastive_loss(Mat(2.0), Mat([[0.0, 0.0]])).item()
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.2395447662, abs=1e-9)


def test_contrastive_reversed_sign_variant():
    got = nn.contrastive_loss(Mat(2.0), Mat([[0.0, 0.0]]), sign=-1.0).item()
    assert got == pytest.approx(-math.log(math.exp(-2) / (math.exp(-2) + 2)))


@given(st.floats(-30, 30), st.lists(st.floats(-30, 30), min_size=1, max_size=6), st.floats(-50, 50))
def test_contrastive_shift_invariance(pos, negs, c):
    base = nn.contrastive_loss(Mat(pos), Mat([negs])).item()
    shifted = nn.contrastive_loss(Mat(pos + c), Mat([[x + c for x in negs]])).item()
    assert shifted == pytest.approx(base, abs=1e-9)


def test_contrastive_is_stable_for_large_scores():
    assert math.isfinite(nn.contrastive_loss(Mat(1e4), Mat([[-1e4, 1e4]])).item())


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_gan_losses_non_negative(real, fake):
    assert nn.adv_loss(Mat([fake])).item() >= 0
    assert nn.disc_loss(Mat([real]), Mat([fake])).item() >= 0


def test_disc_loss_zero_only_at_perfect_scores():
    assert nn.disc_loss(Mat([[1.0, 1.0]]), Mat([[0.0, 0.0]])).item() < 1e-6
    assert nn.disc_loss(Mat([[1.0, 0.99]]), Mat([[0.0, 0.0]])).item() > 1e-3


# -- sgd / grad_check ------------------------------------------------------------------

def test_sgd_zero_grad_keeps_params():
    p = Mat.param([[1.0, 2.0]])
    nn.sgd_step([p], 0.5)
    assert np.array_equal(p.value, [[1.0, 2.0]])


def test_sgd_scalar_step():
    p = Mat.param(1.0)
    p.grad = np.array([[2.0]])
    nn.sgd_step([p], 0.1)
    assert p.item() == pytest.approx(0.8)
    assert p.grad.item() == 0.0


def test_sgd_quadratic_descends_monotonically():
    p = Mat.param(3.0)
    values = []
    for _ in range(10):
        loss = nn.mul(p, p)
        values.append(loss.item())
        loss.backward()
        nn.sgd_step([p], 0.1)
    # closed form: theta_t = 3 * 0.8**t
    assert p.item() == pytest.approx(3 * 0.8 ** 10)
    assert all(b < a for a, b in zip(values, values[1:]))


def test_sgd_rejects_non_finite_gradients():
    p = Mat.param(1.0)
    p.grad = np.array([[np.nan]])
    with pytest.raises(nn.NonFiniteGradient):
        nn.sgd_step([p], 0.1)


def test_grad_check_linear_and_constant():
    p = Mat.param([[1.0, -2.0, 0.5]])
    c = Mat([[3.0, 1.0, -1.0]])
    assert nn.grad_check(lambda: nn.sum_all(nn.mul(p, c)), [p]) < 1e-9
    assert nn.grad_check(lambda: nn.sum_all(c), [p]) == 0.0
    with pytest.raises(ValueError):
        nn.grad_check(lambda: nn.sum_all(c), [p], eps=1e-1)


# -- config / checkpoints -------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"lr": 0}, {"lam": -1}, {"batch_size": 1}, {"loss_sign": 0.5}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        nn.TrainConfig(**kw)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    arrays = [rng.normal(size=(3, 4)), rng.normal(size=(1, 1)), rng.normal(size=(4, 2))]
    path = tmp_path / "p.spgn"
    nn.save_params(arrays, path)
    back = nn.load_params(path)
    assert all(np.array_equal(a, b) for a, b in zip(arrays, back))
    assert path.read_bytes()[:4] == b"SPGN"


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "p.spgn"
    nn.save_params([np.ones((2, 2))], path)
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(nn.CorruptCheckpoint):
        nn.load_params(path)
    path.write_bytes(data[:4] + (9).to_bytes(4, "little") + data[8:])
    with pytest.raises(nn.VersionMismatch):
        nn.load_params(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(nn.CorruptCheckpoint):
        nn.load_params(path)
