import numpy as np
import pytest

from mpfgvc.errors import ConfigError, ContractError, FormatError
from mpfgvc.nn import Linear, MultiHeadSelfAttention, TransformerLayer, causal_mask, zero_module
from mpfgvc.optim import SGD, LrSchedule, clip_grad_norm, sgd_step
from mpfgvc.tensor import Parameter, Tensor


def test_sgd_step_updates_trainable():
    p = Parameter([1.0], "p")
    p.grad = np.array([0.5], dtype=np.float32)
    sgd_step([p], 0.1)
    assert p.data[0] == pytest.approx(0.95)
    assert p.grad is None


def test_sgd_step_leaves_frozen_untouched():
    p = Parameter([1.0], "p", frozen=True)
    p.grad = np.array([0.5], dtype=np.float32)
    before = p.data.copy()
    for _ in range(5):
        sgd_step([p], 0.1)
    assert p.data.tobytes() == before.tobytes()


def test_sgd_step_without_grad_is_contract_error():
    p = Parameter([1.0], "orphan")
    with pytest.raises(ContractError, match="orphan"):
        sgd_step([p], 0.1)


def test_momentum_uses_raw_gradient_first():
    p = Parameter([0.0], "p")
    opt = SGD([p], momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0], dtype=np.float32)
        opt.step(1.0)
    # -1, then -(0.9 + 1)
    assert p.data[0] == pytest.approx(-2.9)


def test_schedule_endpoints_and_monotone():
    sched = LrSchedule(lr_max=0.03, total_steps=50)
    assert sched(0) == pytest.approx(0.03)
    assert sched(50) == pytest.approx(0.0, abs=1e-15)
    values = [sched(t) for t in range(51)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert sched(25) == pytest.approx(0.015)


def test_schedule_warmup_ramps_then_anneals():
    sched = LrSchedule(lr_max=0.01, total_steps=40, warmup_steps=4)
    ramp = [sched(t) for t in range(4)]
    assert ramp == pytest.approx([0.002, 0.004, 0.006, 0.008])
    assert sched(4) == pytest.approx(0.01)
    assert sched(22) == pytest.approx(0.005)
    assert sched(40) == pytest.approx(0.0, abs=1e-15)
    tail = [sched(t) for t in range(4, 41)]
    assert all(a >= b for a, b in zip(tail, tail[1:]))


def test_schedule_end_means_no_update():
    sched = LrSchedule(lr_max=0.1, total_steps=4)
    p = Parameter([2.0], "p")
    p.grad = np.array([3.0], dtype=np.float32)
    sgd_step([p], sched(4))
    assert p.data[0] == 2.0


def test_schedule_rejects_bad_config():
    with pytest.raises(ConfigError):
        LrSchedule(lr_max=0.1, total_steps=0)
    with pytest.raises(ConfigError):
        LrSchedule(lr_max=0.1, total_steps=3, warmup_steps=3)
    with pytest.raises(ConfigError):
        LrSchedule(lr_max=0.1, total_steps=3, warmup_steps=-1)


def test_clip_grad_norm_scales_down():
    a, b = Parameter([0.0], "a"), Parameter([0.0], "b")
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.hypot(a.grad[0], b.grad[0]) == pytest.approx(1.0, rel=1e-5)


def test_clip_grad_norm_ignores_small_and_frozen():
    a = Parameter([0.0], "a")
    f = Parameter([0.0], "f", frozen=True)
    a.grad, f.grad = np.array([0.5]), np.array([100.0])
    assert clip_grad_norm([a, f], 1.0) == pytest.approx(0.5)
    assert a.grad[0] == 0.5


def test_linear_shapes_and_bias(float64):
    rng = np.random.default_rng(0)
    layer = Linear(3, 2, rng)
    zero_module(layer)
    layer.bias.data = np.array([1.0, -1.0])
    out = layer(Tensor(np.ones((4, 3))))
    assert out.shape == (4, 2)
    np.testing.assert_array_equal(out.data[0], [1.0, -1.0])
    assert layer(Tensor(np.ones(3))).shape == (2,)


def test_state_dict_round_trip_and_strict():
    rng = np.random.default_rng(0)
    a = TransformerLayer(8, 2, 2, rng)
    b = TransformerLayer(8, 2, 2, np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)
    state = a.state_dict()
    state.pop("attn.wq.weight")
    with pytest.raises(FormatError):
        b.load_state_dict(state)


def test_freeze_marks_every_parameter():
    layer = TransformerLayer(8, 2, 2, np.random.default_rng(0)).freeze()
    assert layer.trainable_parameters() == []
    layer.unfreeze()
    assert len(layer.trainable_parameters()) == len(layer.parameters())


def test_causal_attention_hides_future(float64):
    attn = MultiHeadSelfAttention(8, 2, np.random.default_rng(0), causal=True)
    _, probs = attn(Tensor(np.random.default_rng(1).standard_normal((2, 5, 8))))
    assert probs.shape == (2, 2, 5, 5)
    upper = np.triu(np.ones((5, 5), dtype=bool), k=1)
    assert np.all(probs[..., upper] < 1e-12)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-9)
    assert causal_mask(3)[0, 2] < -1e8 and causal_mask(3)[2, 0] == 0


def test_heads_must_divide_dim():
    with pytest.raises(ConfigError):
        MultiHeadSelfAttention(10, 3, np.random.default_rng(0))


def test_transformer_layer_is_deterministic():
    x = Tensor(np.random.default_rng(5).standard_normal((1, 4, 8)))
    a = TransformerLayer(8, 2, 2, np.random.default_rng(3))
    b = TransformerLayer(8, 2, 2, np.random.default_rng(3))
    assert a(x)[0].data.tobytes() == b(x)[0].data.tobytes()
