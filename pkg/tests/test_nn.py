import numpy as np
import pytest

from demoforge.errors import NonScalarLoss, NumericalError, ShapeMismatch
from demoforge.nn import (AdamWState, Attention, Block, Checkpoint, F, LayerNorm, Linear, MLP, Tensor,
                          adamw_step, collect_grads, load_checkpoint, no_grad, save_checkpoint)
from demoforge.nn.layers import param

from oracles import finite_difference_check

TOL = 1e-4


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_matmul_identity(rng):
    X = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(F.matmul(Tensor(np.eye(4)), Tensor(X)).data, X)
    with pytest.raises(ShapeMismatch):
        F.matmul(Tensor(np.eye(4)), Tensor(np.ones((3, 3))))


def test_softmax_rows_sum_to_one(rng):
    s = F.softmax(Tensor(rng.normal(size=(5, 7)) * 10)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)


def test_layer_norm_moments(rng):
    x = Tensor(rng.normal(3, 5, size=(6, 16)))
    y = F.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=0.0).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-9)


def test_sigmoid_and_embedding(rng):
    assert F.sigmoid(Tensor(0.0)).item() == 0.5
    table = Tensor(rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(F.embedding_lookup(table, [4, 0]).data, table.data[[4, 0]])
    with pytest.raises(ShapeMismatch):
        F.embedding_lookup(table, [5])


def test_nonfinite_surfaces_at_op_boundary():
    with pytest.raises(NumericalError):
        F.log(Tensor(np.array([-1.0])))


def test_non_scalar_loss(rng):
    with pytest.raises(NonScalarLoss):
        (leaf(rng, 3) * 2.0).backward()


def test_linear_case_gradient(rng):
    W = leaf(rng, 3, 2)
    x = rng.normal(size=(3,))
    F.matmul(Tensor(x[None, :]), W).sum().backward()
    np.testing.assert_allclose(W.grad, np.repeat(x[:, None], 2, axis=1))


def test_zero_weighted_loss_zero_grads(rng):
    lin = Linear(4, 4, rng)
    y = lin(Tensor(rng.normal(size=(2, 4))))
    ((y * y).mean() * 0.0).backward()
    for p in lin.parameters():
        assert not np.any(p.grad)


@pytest.mark.parametrize("op", ["add", "mul", "pow", "exp", "log", "tanh", "sigmoid", "gelu", "softmax",
                                "sum_axis", "reshape_transpose", "getitem", "concat", "clip"])
def test_elementwise_gradients(op, rng):
    a = leaf(rng, 3, 4)
    b = leaf(rng, 1, 4)
    a.data = np.abs(a.data) + 0.5 if op in ("log", "pow") else a.data
    w = Tensor(rng.normal(size=(3, 4)))
    fns = {
        "add": lambda: ((a + b) * w).sum(),
        "mul": lambda: ((a * b) * w).sum(),
        "pow": lambda: ((a ** 1.5) * w).sum(),
        "exp": lambda: (F.exp(a) * w).sum(),
        "log": lambda: (F.log(a) * w).sum(),
        "tanh": lambda: (F.tanh(a) * w).sum(),
        "sigmoid": lambda: (F.sigmoid(a) * w).sum(),
        "gelu": lambda: (F.gelu(a) * w).sum(),
        "softmax": lambda: (F.softmax(a, -1) * w).sum(),
        "sum_axis": lambda: (a.sum(axis=0) * b.reshape(4)).sum(),
        "reshape_transpose": lambda: (a.reshape(4, 3).transpose(1, 0) * w).sum(),
        "getitem": lambda: (a[1:, ::2] * w[1:, ::2]).sum() + (a[[0, 0, 2]] * 1.0).sum(),
        "concat": lambda: (F.concat([a, b], axis=0) * Tensor(rng.normal(size=(4, 4)) * 0 + 1.3)).sum(),
        "clip": lambda: (F.clip(a, -0.3, 0.3) * w).sum(),
    }
    params = [a, b] if op in ("add", "mul", "sum_axis", "concat") else [a]
    assert finite_difference_check(fns[op], params) < TOL


def _loss_through(module_fn, out_shape, rng):
    w = Tensor(rng.normal(size=out_shape))
    return lambda: (module_fn() * w).sum()


def test_layer_gradients(rng):
    x = leaf(rng, 2, 5, 8)
    mem = leaf(rng, 2, 3, 8)
    modules = {
        "linear": (Linear(8, 6, rng), lambda m: m(x), (2, 5, 6)),
        "layernorm": (LayerNorm(8), lambda m: m(x), (2, 5, 8)),
        "mlp": (MLP(8, 16, rng), lambda m: m(x), (2, 5, 8)),
        "self_attention": (Attention(8, 2, rng), lambda m: m(x), (2, 5, 8)),
        "cross_attention": (Attention(8, 2, rng), lambda m: m(x, mem), (2, 5, 8)),
    }
    for name, (mod, call, shape) in modules.items():
        for p in mod.parameters():
            p.data = p.data + rng.normal(scale=0.3, size=p.data.shape)
        fn = _loss_through(lambda: call(mod), shape, rng)
        err = finite_difference_check(fn, mod.parameters() + [x, mem] if "cross" in name else mod.parameters() + [x])
        assert err < TOL, name


def test_block_end_to_end_gradient(rng):
    x = leaf(rng, 2, 4, 8)
    mem = leaf(rng, 2, 2, 8)
    blocks = [Block(8, 2, rng, cross=False), Block(8, 2, rng, cross=True)]
    for b in blocks:
        for p in b.parameters():
            p.data = p.data + rng.normal(scale=0.2, size=p.data.shape)
    w = Tensor(rng.normal(size=(2, 4, 8)))
    fn = lambda: (blocks[1](blocks[0](x), mem) * w).sum()
    params = blocks[0].parameters() + blocks[1].parameters() + [x, mem]
    assert finite_difference_check(fn, params, max_entries=6) < TOL


def test_attention_is_non_causal(rng):
    att = Attention(8, 2, rng)
    x = rng.normal(size=(1, 4, 8))
    y0 = att(Tensor(x)).data
    x2 = x.copy()
    x2[0, -1] += 1.0
    y1 = att(Tensor(x2)).data
    assert np.abs(y1[0, 0] - y0[0, 0]).max() > 0  # early tokens see later ones


def test_no_grad_blocks_graph(rng):
    lin = Linear(3, 3, rng)
    with no_grad():
        y = lin(Tensor(rng.normal(size=(1, 3))))
    assert not y.requires_grad


def test_adamw_zero_grad_no_decay():
    p = {"w": param(np.array([1.0, -2.0]))}
    st = AdamWState(lr=0.1, weight_decay=0.0)
    adamw_step(p, {"w": np.zeros(2)}, st)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_decay_closed_form():
    p = {"w": param(np.array([1.0, -2.0]))}
    st = AdamWState(lr=0.01, weight_decay=0.1)
    for k in range(1, 6):
        adamw_step(p, {"w": np.zeros(2)}, st)
        np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.01 * 0.1) ** k, rtol=1e-14)


def test_adamw_quadratic_bowl():
    p = {"x": param(np.array([1.0]))}
    st = AdamWState(lr=0.01, weight_decay=0.0)
    for _ in range(500):
        p["x"].grad = None
        (p["x"] * p["x"]).sum().backward()
        adamw_step(p, collect_grads(p), st)
    assert abs(p["x"].data[0]) < 1e-3


def test_adamw_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adamw_step({"w": param(np.zeros(2))}, {"w": np.zeros(3)}, AdamWState())


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    blk = Block(8, 2, rng, cross=True)
    params = blk.named_parameters()
    st = AdamWState(lr=3e-4)
    for p in params.values():
        p.grad = rng.normal(size=p.data.shape)
    adamw_step(params, collect_grads(params), st)
    gen = np.random.default_rng(5)
    gen.normal(size=3)
    ck = Checkpoint({"kind": "block", "hidden": 8}, blk.state_dict(), st, gen.bit_generator.state, {"note": 1})
    path = save_checkpoint(ck, tmp_path / "c.npz")
    back = load_checkpoint(path)
    assert back.descriptor == ck.descriptor and back.extra == {"note": 1}
    for k, v in ck.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    for k in st.m:
        assert back.optimizer.m[k].tobytes() == st.m[k].tobytes()
        assert back.optimizer.v[k].tobytes() == st.v[k].tobytes()
    assert back.optimizer.step == 1
    g2 = np.random.default_rng()
    g2.bit_generator.state = back.rng_state
    assert g2.normal() == gen.normal()


def test_determinism_fixed_seed():
    def run():
        rng = np.random.default_rng(42)
        blk = Block(8, 2, rng)
        x = Tensor(rng.normal(size=(2, 3, 8)))
        loss = (blk(x) ** 2).mean()
        loss.backward()
        return loss.item(), [p.grad.tobytes() for p in blk.parameters()]

    assert run() == run()
