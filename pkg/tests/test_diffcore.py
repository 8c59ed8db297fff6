import math

import numpy as np
import pytest

from dunet import diffcore as dc
from dunet.diffcore import Tensor
from gradcheck import numeric_grad, rel_error


def check_grads(build, arrays, seed=0, tol=1e-6):
    """Compare reverse-mode gradients of sum(R * build(*tensors)) with finite differences."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    r = rng.normal(size=out.shape)
    dc.weighted_sum(out, r).backward()
    worst = 0.0
    for t, a in zip(tensors, arrays):
        def f(x, t=t):
            saved = t.data
            t.data = x
            val = float((build(*tensors).data * r).sum())
            t.data = saved
            return val
        num = numeric_grad(f, a.copy())
        worst = max(worst, rel_error(t.grad, num))
    assert worst < tol, worst
    return worst


def test_linear_examples():
    y = dc.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([0.0]))
    assert y.data.tolist() == [[3.0]]
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(dc.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    with pytest.raises(ValueError):
        dc.linear(Tensor(x), Tensor(np.eye(2)))


@pytest.mark.parametrize("seed", range(5))
def test_linear_gradient(seed):
    rng = np.random.default_rng(seed)
    n, din, dout = rng.integers(1, 6, size=3)
    check_grads(dc.linear, [rng.normal(size=(n, din)), rng.normal(size=(din, dout)),
                            rng.normal(size=dout)], seed)


def test_relu():
    assert dc.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    x = np.array([0.5, 1.0, 3.0])
    np.testing.assert_array_equal(dc.relu(Tensor(x)).data, x)
    t = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    dc.weighted_sum(dc.relu(t), np.ones(3)).backward()
    # subgradient 1 at the kink
    assert t.grad.tolist() == [0.0, 1.0, 1.0]
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4))
    x[np.abs(x) < 1e-2] = 0.5
    check_grads(dc.relu, [x])


def test_batch_norm_zero_variance_gives_beta():
    st = dc.BatchNormState(2)
    x = np.tile([[3.0, -1.0]], (6, 1))
    y = dc.batch_norm(Tensor(x), Tensor([2.0, 0.5]), Tensor([0.3, -0.7]), True, st)
    np.testing.assert_array_equal(y.data, np.tile([[0.3, -0.7]], (6, 1)))


def test_batch_norm_standardized_input():
    x = np.array([[-1.0], [1.0], [-1.0], [1.0]])
    y = dc.batch_norm(Tensor(x), Tensor([1.0]), Tensor([0.0]), True, dc.BatchNormState(1))
    np.testing.assert_allclose(y.data, x / math.sqrt(1 + 1e-5), rtol=0, atol=1e-15)


def test_batch_norm_running_stats_and_eval():
    st = dc.BatchNormState(1)
    x = np.array([[1.0], [3.0]])
    dc.batch_norm(Tensor(x), Tensor([1.0]), Tensor([0.0]), True, st)
    assert st.running_mean[0] == pytest.approx(0.2)
    assert st.running_var[0] == pytest.approx(0.9 + 0.1 * 2.0)
    y = dc.batch_norm(Tensor([[0.2]]), Tensor([1.0]), Tensor([0.0]), False, st)
    assert y.data[0, 0] == pytest.approx(0.0)
    with pytest.raises(ValueError):
        dc.batch_norm(Tensor(np.zeros((3, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)), True,
                      dc.BatchNormState(0))


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradient(training):
    rng = np.random.default_rng(4)
    st = dc.BatchNormState(3)
    st.running_mean = rng.normal(size=3)
    st.running_var = rng.uniform(0.5, 2, size=3)

    def build(x, g, b):
        s = dc.BatchNormState(3)
        s.running_mean, s.running_var = st.running_mean, st.running_var
        return dc.batch_norm(x, g, b, training, s)

    check_grads(build, [rng.normal(size=(7, 3)), rng.normal(size=3), rng.normal(size=3)],
                tol=1e-5)


def test_gather_ops():
    u = Tensor([[0.0], [1.0]])
    assert dc.gather_diff(u, np.array([[1], [0]])).data[0].tolist() == [[1.0]]
    assert dc.gather_feat(Tensor([[2.0], [5.0]]), np.array([[1], [0]])).data[0].tolist() == [[5.0]]
    const = Tensor(np.full((4, 2), 3.3))
    idx = np.array([[1, 2], [0, 3], [3, 1], [2, 0]])
    assert not dc.gather_diff(const, idx).data.any()
    x = np.random.default_rng(0).normal(size=(4, 2))
    np.testing.assert_array_equal(dc.gather_feat(Tensor(x), np.arange(4)[:, None]).data[:, 0], x)
    with pytest.raises(IndexError):
        dc.gather_diff(const, np.array([[4]] * 4))


@pytest.mark.parametrize("op", [dc.gather_diff, dc.gather_feat])
def test_gather_gradients(op):
    rng = np.random.default_rng(2)
    idx = rng.integers(0, 6, size=(6, 4))
    check_grads(lambda u: op(u, idx), [rng.normal(size=(6, 3))])


def test_mean_over_neighbors():
    x = Tensor(np.array([[[-0.5], [1.5]]]))
    assert dc.mean_over_neighbors(x).data.tolist() == [[0.5]]
    y = np.random.default_rng(0).normal(size=(3, 1, 2))
    np.testing.assert_array_equal(dc.mean_over_neighbors(Tensor(y)).data, y[:, 0])
    z = np.random.default_rng(1).normal(size=(5, 9, 4)) * 1e3
    base = dc.mean_over_neighbors(Tensor(z)).data
    for s in range(10):
        perm = np.random.default_rng(s).permutation(9)
        assert np.array_equal(dc.mean_over_neighbors(Tensor(z[:, perm])).data, base)
    with pytest.raises(ValueError):
        dc.mean_over_neighbors(Tensor(np.zeros((2, 0, 3))))
    check_grads(dc.mean_over_neighbors, [z / 1e3])


def test_other_kernels_gradients():
    rng = np.random.default_rng(9)
    x3 = rng.normal(size=(5, 4, 3))
    check_grads(dc.sum_over_neighbors, [x3])
    check_grads(dc.max_over_neighbors, [x3])
    check_grads(lambda a, b: dc.concat([a, b]), [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))])
    check_grads(dc.add, [rng.normal(size=(3, 2)), rng.normal(size=(3, 2))])
    check_grads(lambda a: dc.take_rows(a, [2, 0, 2]), [rng.normal(size=(4, 2))])
    idx = rng.integers(0, 6, size=(8, 3))
    w = rng.uniform(size=(8, 3))
    check_grads(lambda a: dc.interpolate(a, idx, w), [rng.normal(size=(6, 2))])


def test_cross_entropy_values():
    for c in (2, 5):
        loss = dc.cross_entropy_label_smoothing(Tensor(np.zeros((3, c))), [0, 1, 1], 0.0)
        assert loss.item() == pytest.approx(math.log(c), abs=1e-15)
    loss = dc.cross_entropy_label_smoothing(Tensor([[0.0, 0.0]]), [0], 0.2)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)
    assert dc.cross_entropy_label_smoothing(Tensor([[4.0]]), [0], 0.0).item() == 0.0
    # hand evaluation: logits (1, 0), label 0, alpha 0.2, C=2
    lse = math.log(math.e + 1)
    expected = -(0.9 * (1 - lse) + 0.1 * (0 - lse))
    assert dc.cross_entropy_label_smoothing(Tensor([[1.0, 0.0]]), [0], 0.2).item() == pytest.approx(expected, abs=1e-14)
    with pytest.raises(ValueError):
        dc.cross_entropy_label_smoothing(Tensor([[0.0, 0.0]]), [2])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 4, size=6)
    logits = rng.normal(size=(6, 4)) * 3
    t = Tensor(logits, requires_grad=True)
    dc.cross_entropy_label_smoothing(t, labels, 0.2).backward()
    num = numeric_grad(lambda x: dc.cross_entropy_label_smoothing(Tensor(x), labels, 0.2).item(), logits.copy())
    assert rel_error(t.grad, num) < 1e-6


def test_shared_input_accumulates():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))
    w1, w2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    r = rng.normal(size=(4, 2))
    t = Tensor(x, requires_grad=True)
    dc.weighted_sum(dc.add(dc.linear(t, Tensor(w1)), dc.relu(dc.linear(t, Tensor(w2)))), r).backward()
    both = t.grad
    t1 = Tensor(x, requires_grad=True)
    dc.weighted_sum(dc.linear(t1, Tensor(w1)), r).backward()
    t2 = Tensor(x, requires_grad=True)
    dc.weighted_sum(dc.relu(dc.linear(t2, Tensor(w2))), r).backward()
    np.testing.assert_allclose(both, t1.grad + t2.grad, rtol=0, atol=1e-14)


def test_non_finite_detection_names_op():
    with pytest.raises(dc.NonFiniteError, match="linear"):
        dc.linear(Tensor([[1e308, 1e308]]), Tensor([[10.0], [10.0]]))


def test_deterministic_forward():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(50, 8)), rng.normal(size=(8, 8))
    a = dc.relu(dc.linear(Tensor(x), Tensor(w))).data
    b = dc.relu(dc.linear(Tensor(x), Tensor(w))).data
    assert np.array_equal(a, b)


def test_sgd():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.zeros(2)
    opt = dc.SGD([p], lr=0.1, momentum=0.0)
    opt.step()
    assert p.data.tolist() == [1.0, -2.0]
    q = Tensor([0.5], requires_grad=True)
    q.grad = np.array([1.0])
    dc.SGD([q], lr=0.1, momentum=0.0).step()
    assert q.data[0] == pytest.approx(0.4)
    with pytest.raises(ValueError):
        dc.SGD([q], lr=0.0)


def test_adamw_single_step_hand_evaluated():
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.05
    p0, g = 0.7, -0.3
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat, vhat = m / (1 - b1), v / (1 - b2)
    expected = p0 - lr * (mhat / (math.sqrt(vhat) + eps) + wd * p0)
    p = Tensor([p0], requires_grad=True)
    p.grad = np.array([g])
    dc.AdamW([p], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd).step()
    assert p.data[0] == pytest.approx(expected, abs=1e-15)
    with pytest.raises(ValueError):
        dc.AdamW([p], lr=-1.0)


def test_cosine_lr():
    assert dc.cosine_lr(0, 10, 0.3) == 0.3
    assert dc.cosine_lr(10, 10, 0.3) == pytest.approx(0.0, abs=1e-17)
    assert dc.cosine_lr(5, 10, 0.3) == pytest.approx(0.15)
    with pytest.raises(ValueError):
        dc.cosine_lr(0, 0, 0.1)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rec = {"a.weight": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "scalar": np.array(2.5)}
    path = tmp_path / "p.bin"
    dc.save_params(path, rec)
    back = dc.load_params(path)
    assert list(back) == list(rec)
    for k in rec:
        assert back[k].shape == rec[k].shape
        assert np.array_equal(back[k], rec[k])
    raw = path.read_bytes()
    assert raw[:8] == b"DUPARAM1"
    assert int.from_bytes(raw[8:12], "little") == 3
    path.write_bytes(raw[:-3])
    with pytest.raises(dc.CheckpointError):
        dc.load_params(path)


def test_module_state_dict_round_trip():
    rng = np.random.default_rng(0)
    mlp = dc.MLP([3, 4, 2], rng)
    bn = dc.BatchNorm(2)
    bn.state.running_mean = np.array([0.3, 0.1])

    class Both(dc.Module):
        def __init__(self):
            self.mlp, self.bn = mlp, bn

    m = Both()
    state = m.state_dict()
    assert "bn.running_mean" in state and "mlp.layers.0.weight" in state
    m2 = Both.__new__(Both)
    m2.mlp, m2.bn = dc.MLP([3, 4, 2], np.random.default_rng(1)), dc.BatchNorm(2)
    m2.load_state_dict(state)
    assert np.array_equal(m2.mlp.layers[1].weight.data, mlp.layers[1].weight.data)
    assert np.array_equal(m2.bn.state.running_mean, [0.3, 0.1])
