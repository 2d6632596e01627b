import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from riserl.errors import ConfigError, NumericFault, UsageError
from riserl.nnsub import (
    Adam,
    Conv2d,
    Dense,
    LSTMCell,
    ParamGroup,
    backward,
    clip_global_norm,
    global_norm,
    huber,
    layer_checks,
    load_checkpoint,
    lstm_unroll,
    save_checkpoint,
)

from fdcheck import CASES, fd_check


@pytest.mark.parametrize("name", sorted(CASES))
def test_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(5):
        fn, tensors = CASES[name](rng)
        assert fd_check(fn, tensors, rng) < 1e-4


def test_dense_gradient_pattern():
    layer = Dense(2, 1, bias=False)
    x = torch.tensor([1.0, 0.0])
    layer(x).sum().backward()
    assert torch.equal(layer.weight.grad, torch.tensor([[1.0, 0.0]]))


def test_conv_matches_nested_loops(rng):
    conv = Conv2d(2, 3, 3, 2).double()
    x = torch.tensor(rng.standard_normal((1, 2, 9, 8)))
    out = conv(x).detach().numpy()
    W, b = conv.weight.detach().numpy(), conv.bias.detach().numpy()
    xn = x.numpy()
    oh, ow = conv.output_hw(9, 8)
    ref = np.zeros((1, 3, oh, ow))
    for co in range(3):
        for i in range(oh):
            for j in range(ow):
                acc = b[co]
                for ci in range(2):
                    for u in range(3):
                        for v in range(3):
                            acc += W[co, ci, u, v] * xn[0, ci, 2 * i + u, 2 * j + v]
                ref[0, co, i, j] = acc
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_too_small_input():
    with pytest.raises(ConfigError):
        Conv2d(1, 1, 5).output_hw(4, 4)


def test_dense_shape_mismatch():
    with pytest.raises(ConfigError):
        Dense(3, 2)(torch.zeros(4, 5))


def test_lstm_forget_bias_and_gate_order():
    cell = LSTMCell(3, 4)
    assert torch.all(cell.bias[4:8] == 1.0)
    with torch.no_grad():
        cell.weight_ih.zero_()
        cell.weight_hh.zero_()
        cell.bias.zero_()
        cell.bias[8:12] = 100.0     # g saturates to 1
        cell.bias[0:4] = 100.0      # input gate open
        cell.bias[12:16] = 100.0    # output gate open
    h, c = cell(torch.zeros(1, 3), torch.zeros(1, 4), torch.zeros(1, 4))
    assert torch.allclose(c, torch.ones(1, 4))
    assert torch.allclose(h, torch.tanh(torch.ones(1, 4)))


def test_lstm_masked_inputs_do_not_leak(rng):
    cell = LSTMCell(3, 5)
    x = torch.tensor(rng.standard_normal((2, 6, 3)), dtype=torch.float32)
    mask = torch.ones(2, 6, dtype=torch.bool)
    mask[:, :2] = False
    out1, _ = lstm_unroll(cell, x, mask=mask)
    x2 = x.clone()
    x2[:, :2] = 1e3
    out2, _ = lstm_unroll(cell, x2, mask=mask)
    assert torch.equal(out1, out2)
    assert torch.equal(out1[:, :2], torch.zeros(2, 2, 5))
    # after the padding the state starts fresh, same as running the valid suffix alone
    out3, _ = lstm_unroll(cell, x[:, 2:])
    assert torch.allclose(out1[:, 2:], out3)


@settings(max_examples=25, deadline=None)
@given(T=st.integers(2, 7), cut=st.integers(0, 7), seed=st.integers(0, 2**16))
def test_lstm_mask_invariance_property(T, cut, seed):
    cut = min(cut, T - 1)
    g = torch.Generator().manual_seed(seed)
    cell = LSTMCell(2, 3, generator=g)
    x = torch.randn(1, T, 2, generator=g)
    mask = torch.ones(1, T, dtype=torch.bool)
    mask[0, cut] = False
    y = x.clone()
    y[0, :cut + 1] = torch.randn(cut + 1, 2, generator=g)
    a, _ = lstm_unroll(cell, x, mask=mask)
    b, _ = lstm_unroll(cell, y, mask=mask)
    assert torch.equal(a[0, cut:], b[0, cut:])


def test_no_grad_burn_in():
    cell = LSTMCell(2, 3)
    x = torch.randn(1, 5, 2, requires_grad=True)
    out, _ = lstm_unroll(cell, x, grad_enabled_from=3)
    out[:, -1].sum().backward()
    assert torch.all(x.grad[:, :3] == 0)
    assert torch.any(x.grad[:, 3:] != 0)


def test_huber_values():
    x = torch.tensor([-3.0, -0.5, 0.0, 0.5, 3.0])
    assert torch.allclose(huber(x), torch.tensor([2.5, 0.125, 0.0, 0.125, 2.5]))


def test_backward_requires_forward():
    with pytest.raises(UsageError):
        backward(torch.tensor(1.0))
    with pytest.raises(UsageError):
        backward(torch.ones(2, requires_grad=True) * 2)


def test_backward_rejects_nonfinite():
    x = torch.tensor(1.0, requires_grad=True)
    with pytest.raises(NumericFault):
        backward(x * float("inf"))


def test_layer_checks_name_the_layer():
    layer = Dense(2, 2, name="probe")
    x = torch.tensor([[float("nan"), 0.0]])
    layer(x)  # unchecked by default
    with layer_checks():
        with pytest.raises(NumericFault) as exc:
            layer(x)
    assert exc.value.where == "probe"


def test_clip_global_norm():
    g = [torch.tensor([3.0]), torch.tensor([4.0]), None]
    clipped, norm = clip_global_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert global_norm(clipped) == pytest.approx(1.0)
    assert clipped[2] is None
    same, n2 = clip_global_norm(g, 10.0)
    assert n2 == pytest.approx(5.0) and same[0] is g[0]
    with pytest.raises(ConfigError):
        clip_global_norm(g, 0.0)


def test_adam_first_step_is_lr_sign():
    p = torch.nn.Parameter(torch.tensor([2.0]))
    opt = Adam([p], lr=0.1, eps=1e-8)
    p.grad = torch.tensor([1.0])
    opt.step()
    assert p.item() == pytest.approx(1.9, abs=1e-6)


def _reference_adam(x0, grad_fn, steps, lr, b1, b2, eps):
    x = np.array(x0, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (np.sqrt(vh) + eps)
    return x


def test_adam_matches_reference_on_quadratic():
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    x0 = np.array([1.0, -2.0])
    p = torch.nn.Parameter(torch.tensor(x0))
    opt = Adam([p], lr=0.05, betas=(0.9, 0.999), eps=1e-3)
    for _ in range(10):
        p.grad = None
        (0.5 * p @ torch.tensor(A) @ p).backward()
        opt.step()
    ref = _reference_adam(x0, lambda x: A @ x, 10, 0.05, 0.9, 0.999, 1e-3)
    assert np.max(np.abs(p.detach().numpy() - ref)) <= 1e-6


def test_adam_aborts_on_nonfinite_gradient():
    p = torch.nn.Parameter(torch.tensor([1.0]))
    opt = Adam([p], lr=0.1)
    p.grad = torch.tensor([float("nan")])
    with pytest.raises(NumericFault):
        opt.step()
    assert p.item() == 1.0 and opt.step_count == 0


def test_frozen_group_never_changes():
    class Net(ParamGroup):
        def __init__(self):
            super().__init__()
            self.a = Dense(3, 3)
            self.b = ParamGroup()
            self.b.d = Dense(3, 1)
            self.b.freeze()

    net = Net()
    before = net.b.d.weight.detach().clone()
    opt = Adam([p for p in net.parameters()], lr=0.1)
    for _ in range(5):
        opt.zero_grad()
        net.b.d(net.a(torch.randn(4, 3))).sum().backward()
        opt.step()
    assert net.b.d.weight.grad is None
    assert torch.equal(before, net.b.d.weight)
    assert not net.b.trainable


def test_checkpoint_round_trip(tmp_path):
    tensors = {"w": torch.randn(3, 4), "scalar": torch.tensor(2.5), "name/ü": torch.arange(6.0).view(1, 2, 3)}
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert torch.equal(back[k], tensors[k].float())
    raw = path.read_bytes()
    assert raw[:8] == b"RISEckpt"
    (tmp_path / "bad").write_bytes(b"nope" * 4)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "bad")


def test_adam_state_round_trip(tmp_path):
    p = torch.nn.Parameter(torch.randn(3))
    opt = Adam([p], lr=0.01)
    for _ in range(3):
        p.grad = torch.randn(3)
        opt.step()
    save_checkpoint(tmp_path / "a.ckpt", opt.state_tensors())
    q = torch.nn.Parameter(p.detach().clone())
    opt2 = Adam([q], lr=0.01)
    opt2.load_state_tensors(load_checkpoint(tmp_path / "a.ckpt"))
    g = torch.randn(3)
    p.grad, q.grad = g, g.clone()
    opt.step()
    opt2.step()
    assert opt2.step_count == 4
    assert torch.equal(p, q)
