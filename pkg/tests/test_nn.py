"""Autodiff core: op gradients, softmax invariances, optimizers, checkpoints."""

import numpy as np
import pytest

from meshrl import nn


def fd_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_op(build, *arrays, tol=1e-6):
    """Backprop vs finite differences for a scalar-valued op graph.

    The Tensors share storage with the input arrays, so perturbing an array
    entry and rebuilding the graph yields the perturbed loss.
    """
    tensors = [nn.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    nn.backward(loss)
    for t, a in zip(tensors, arrays):
        fd = fd_grad(lambda: build(*tensors).item(), a)
        assert np.allclose(t.grad, fd, atol=tol), f"grad mismatch: {t.grad} vs {fd}"


rng = np.random.default_rng(0)


def test_add_mul_broadcast():
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    check_op(lambda x, y: nn.tsum(nn.mul(nn.add(x, y), nn.add(x, y))), a, b)


def test_matmul_shapes():
    a = rng.normal(size=(3, 5))
    b = rng.normal(size=(5, 2))
    check_op(lambda x, y: nn.tsum(nn.matmul(x, y)), a, b)
    v = rng.normal(size=(5,))
    check_op(lambda x, y: nn.tsum(nn.matmul(x, y)), v, b)


def test_reduction_and_shape_ops():
    a = rng.normal(size=(4, 3))
    check_op(lambda x: nn.tmean(nn.square(x)), a)
    check_op(lambda x: nn.tsum(nn.reshape(x, (12,))), a)
    check_op(lambda x: nn.tsum(nn.narrow(x, 1, 2)), a)
    check_op(lambda x: nn.tsum(nn.gather(x, [2, 0, 2])), a)
    check_op(lambda x: nn.tsum(nn.tsum(x, axis=0)), a)


def test_exp_log():
    a = rng.uniform(0.5, 2.0, size=(6,))
    check_op(lambda x: nn.tsum(nn.exp(x)), a)
    check_op(lambda x: nn.tsum(nn.log(x)), a)


def test_concat_segment_sum():
    a = rng.normal(size=(3, 2))
    b = rng.normal(size=(2, 2))
    check_op(lambda x, y: nn.tsum(nn.square(nn.concat([x, y], axis=0))), a, b)
    seg = np.array([0, 2, 0, 1])
    c = rng.normal(size=(4, 3))
    check_op(lambda x: nn.tsum(nn.square(nn.segment_sum(x, seg, 3))), c)


def test_piecewise_ops_away_from_kinks():
    a = rng.normal(size=(8,)) + np.where(rng.normal(size=8) > 0, 0.5, -0.5)
    check_op(lambda x: nn.tsum(nn.relu(x)), a)
    b = a + 0.05
    check_op(lambda x, y: nn.tsum(nn.minimum(x, y)), a, b)
    check_op(lambda x, y: nn.tsum(nn.maximum(x, y)), a, b)
    c = rng.uniform(-2, 2, size=(9,))
    c = c[np.abs(np.abs(c) - 1.0) > 0.05]      # keep clear of the clip edges
    check_op(lambda x: nn.tsum(nn.square(nn.clip(x, -1.0, 1.0))), c)


def test_stop_grad_blocks():
    a = nn.Tensor(rng.normal(size=(3,)), requires_grad=True)
    loss = nn.tsum(nn.mul(a, nn.stop_grad(a)))
    nn.backward(loss)
    assert np.allclose(a.grad, a.value)        # only the live branch counts


def test_conv2d_gradients():
    x = rng.normal(size=(2, 6, 6, 2))
    W = rng.normal(size=(3, 3, 2, 2)) * 0.3
    b = rng.normal(size=(2,)) * 0.1
    check_op(lambda xx, ww, bb: nn.tmean(nn.square(nn.conv2d(xx, ww, bb, stride=2))),
             x, W, b, tol=1e-5)
    out = nn.conv2d(nn.Tensor(x), nn.Tensor(W), nn.Tensor(b), stride=2)
    assert out.shape == (2, 2, 2, 2)
    # hand-check one output entry
    patch = x[1, 2:5, 2:5, :]
    want = np.einsum("hwc,hwcf->f", patch, W) + b
    assert np.allclose(out.value[1, 1, 1], want, atol=1e-12)


def test_masked_log_softmax_basics():
    logits = nn.Tensor(np.array([1.0, 2.0, -1.0, 0.5]), requires_grad=True)
    mask = np.array([True, True, False, True])
    lp = nn.masked_log_softmax(logits, mask)
    assert lp.value[2] == -np.inf
    p = np.exp(lp.value[mask])
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    ref = np.array([1.0, 2.0, 0.5])
    ref = ref - (ref.max() + np.log(np.sort(np.exp(ref - ref.max())).sum()))
    assert np.allclose(lp.value[mask], ref, atol=1e-15)
    nn.backward(nn.tsum(nn.gather(lp, [1])))
    g = logits.grad
    assert g[2] == 0.0
    assert g.sum() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        nn.masked_log_softmax(nn.Tensor(np.ones(3)), np.zeros(3, dtype=bool))


def test_masked_log_softmax_permutation_bitwise():
    """Sorted-sum normalization makes the result permutation-equivariant at
    the bit level, not merely within floating-point tolerance."""
    r = np.random.default_rng(5)
    for _ in range(20):
        n = int(r.integers(3, 40))
        x = r.normal(size=n) * 3
        mask = r.random(n) < 0.8
        mask[int(r.integers(n))] = True
        perm = r.permutation(n)
        a = nn.masked_log_softmax(nn.Tensor(x), mask).value
        b = nn.masked_log_softmax(nn.Tensor(x[perm]), mask[perm]).value
        assert (a[perm] == b).all()


def test_plogp_entropy_terms():
    lp = nn.Tensor(np.log(np.array([0.5, 0.25, 0.25])), requires_grad=True)
    e = nn.tsum(nn.plogp(lp))
    assert e.item() == pytest.approx(0.5 * np.log(0.5) + 0.5 * np.log(0.25))
    lp2 = nn.Tensor(np.array([-np.inf, 0.0]))
    assert nn.plogp(lp2).value[0] == 0.0       # 0 log 0 = 0


def test_truncated_normal_band():
    r = np.random.default_rng(9)
    v = nn.truncated_normal(r, (4000,), std=0.05)
    assert np.abs(v).max() <= 0.1
    assert v.std() == pytest.approx(0.05, rel=0.15)


def test_sgd_and_adam_steps():
    p = nn.Parameter(np.array([1.0, -2.0]))
    opt = nn.SGD({"p": p}, lr=0.1)
    p.grad = np.array([0.5, 1.0])
    opt.step()
    assert np.allclose(p.value, [0.95, -2.1])

    p = nn.Parameter(np.array([1.0]))
    opt = nn.Adam({"p": p}, lr=0.1)
    p.grad = np.array([2.0])
    opt.step()
    # first Adam step moves by ~lr regardless of gradient scale
    assert p.value[0] == pytest.approx(1.0 - 0.1, abs=1e-6)


def test_adam_converges_on_quadratic():
    p = nn.Parameter(np.array([3.0, -4.0]))
    opt = nn.Adam({"p": p}, lr=0.05)
    for _ in range(400):
        opt.zero_grad()
        loss = nn.tsum(nn.square(p))
        nn.backward(loss)
        opt.step()
    assert np.abs(p.value).max() < 1e-3


def test_module_naming_and_state_dict():
    class Net(nn.Module):
        def __init__(self):
            ss = np.random.SeedSequence(0)
            s1, s2 = ss.spawn(2)
            self.fc1 = nn.Dense(3, 4, s1)
            self.fc2 = nn.Dense(4, 2, s2)

    net = Net()
    names = sorted(net.named_parameters())
    assert names == ["fc1/W", "fc1/b", "fc2/W", "fc2/b"]
    state = net.state_dict()
    state["fc1/W"][:] = 7.0
    assert not np.any(net.named_parameters()["fc1/W"].value == 7.0)  # copies
    net.load_state_dict(state)
    assert (net.named_parameters()["fc1/W"].value == 7.0).all()
    bad = dict(state)
    del bad["fc2/b"]
    with pytest.raises(KeyError):
        net.load_state_dict(bad)


def test_checkpoint_roundtrip(tmp_path):
    class Net(nn.Module):
        def __init__(self, seed):
            self.fc = nn.Dense(3, 3, np.random.SeedSequence(seed))

    a = Net(1)
    opt = nn.Adam(a.named_parameters(), lr=0.01)
    for p in opt.params.values():
        p.grad = np.ones_like(p.value)
    opt.step()
    path = nn.save_checkpoint(str(tmp_path / "ck"), a, {"note": "hi"}, opt)
    assert path.endswith(".npz")

    b = Net(2)
    opt_b = nn.Adam(b.named_parameters(), lr=0.5)
    meta = nn.load_checkpoint(path, b, opt_b)
    assert meta["note"] == "hi"
    assert (b.fc.W.value == a.fc.W.value).all()
    assert opt_b.lr == 0.01 and opt_b.t == opt.t
    for k in opt.m:
        assert (opt_b.m[k] == opt.m[k]).all()


def test_gradient_check_skips_kink_probes():
    ss = np.random.SeedSequence(3)
    fc1 = nn.Dense(4, 8, ss.spawn(1)[0])
    fc2 = nn.Dense(8, 1, ss.spawn(2)[1])
    x = np.random.default_rng(2).normal(size=(5, 4))

    def loss_fn():
        h = nn.relu(fc1(nn.Tensor(x)))
        return nn.tmean(nn.square(fc2(h)))

    params = {**fc1.named_parameters("fc1"), **fc2.named_parameters("fc2")}
    max_rel, n_checked, n_skipped = nn.gradient_check(
        loss_fn, params, np.random.default_rng(0), per_param=5)
    assert n_checked >= 15
    assert max_rel <= 1e-4


def test_backward_requires_scalar():
    t = nn.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        nn.backward(t)
