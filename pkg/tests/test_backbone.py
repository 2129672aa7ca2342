import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from attentive_de.backbone import (CHECKPOINT_VERSION, CheckpointError, NonFiniteError, ParameterStore, adam_step,
                                   cosine, evaluate_with_gradients, finite_difference_check, load_store,
                                   load_tensors, masked_softmax, max_first, save_store)


def _store(**tensors):
    s = ParameterStore(torch.float64)
    for k, v in tensors.items():
        s.add(k, torch.as_tensor(v, dtype=torch.float64))
    return s


def test_sum_of_squares_gradient():
    s = _store(p=[1.0, -2.0, 3.5])
    value = evaluate_with_gradients(lambda st: (st["p"] ** 2).sum(), s)
    assert value == pytest.approx(1 + 4 + 12.25)
    torch.testing.assert_close(s.grad("p"), 2 * s["p"].detach())


def test_constant_objective_has_zero_gradient():
    s = _store(p=[1.0, 2.0], q=[3.0])
    evaluate_with_gradients(lambda st: (st["q"] * 2).sum(), s)
    assert torch.equal(s.grad("p"), torch.zeros(2, dtype=torch.float64))


def test_non_finite_objective_is_named():
    s = _store(p=[0.0])
    with pytest.raises(NonFiniteError, match="objective"):
        evaluate_with_gradients(lambda st: torch.log(st["p"]).sum(), s)


def test_store_rejects_nan():
    with pytest.raises(NonFiniteError):
        _store(p=[float("nan")])


def test_adam_first_step():
    s = _store(p=[0.0])
    s["p"].grad = torch.ones(1, dtype=torch.float64)
    adam_step(s, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert float(s["p"].detach()) == pytest.approx(-0.1, abs=1e-6)
    assert s.steps["p"] == 1
    assert s.grad("p") is None


def test_adam_zero_gradient_leaves_params():
    s = _store(p=[0.5, -1.5])
    before = s["p"].detach().clone()
    s["p"].grad = torch.zeros(2, dtype=torch.float64)
    adam_step(s, lr=0.1)
    assert torch.equal(s["p"].detach(), before)
    assert s.steps["p"] == 1


def test_adam_bias_correction_second_step():
    # grads 1 then 0.5, hand evaluated:
    # m2 = 0.9*0.1 + 0.1*0.5 = 0.14,   m_hat = 0.14 / 0.19
    # v2 = 0.999*0.001 + 0.001*0.25 = 0.001249,   v_hat = 0.001249 / 0.001999
    s = _store(p=[0.0])
    for g in (1.0, 0.5):
        s["p"].grad = torch.tensor([g], dtype=torch.float64)
        adam_step(s, lr=0.1)
    m_hat, v_hat = 0.14 / 0.19, 0.001249 / 0.001999
    expected = -0.1 / (1 + 1e-8) - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert float(s["p"].detach()) == pytest.approx(expected, abs=1e-12)
    one = _store(p=[0.0])
    one["p"].grad = torch.tensor([1.5], dtype=torch.float64)
    adam_step(one, lr=0.2)
    assert float(one["p"].detach()) != pytest.approx(float(s["p"].detach()), abs=1e-6)


def test_adam_constant_gradient_moves_lr_per_step():
    # with a constant gradient every bias-corrected step has size lr
    s = _store(p=[0.0])
    for _ in range(2):
        s["p"].grad = torch.ones(1, dtype=torch.float64)
        adam_step(s, lr=0.1)
    assert float(s["p"].detach()) == pytest.approx(-0.2, abs=1e-8)


def test_adam_only_touches_named():
    s = _store(a=[1.0], b=[2.0])
    s["a"].grad = torch.ones(1, dtype=torch.float64)
    s["b"].grad = torch.ones(1, dtype=torch.float64)
    adam_step(s, lr=0.1, names=["a"])
    assert float(s["b"].detach()) == 2.0 and s.steps["b"] == 0


def test_fd_quadratic():
    A = torch.tensor([[2.0, 0.5], [0.5, 1.0]], dtype=torch.float64)
    s = _store(x=[0.3, -0.7])
    err = finite_difference_check(lambda st: st["x"] @ A @ st["x"] + st["x"].sum(), s)
    assert err < 1e-8


def test_fd_softmax_cross_entropy(gen):
    W = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    X = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 2, 1, 1, 0])
    s = _store(W=W)
    err = finite_difference_check(lambda st: torch.nn.functional.cross_entropy(X @ st["W"], y), s)
    assert err < 1e-6


def test_fd_max_pool_off_ties(gen):
    s = _store(x=torch.randn(4, 6, generator=gen, dtype=torch.float64))
    err = finite_difference_check(lambda st: (max_first(torch.tanh(st["x"]), 1) ** 2).sum(), s)
    assert err < 1e-6


def test_max_first_routes_ties_to_first():
    x = torch.tensor([[1.0, 3.0, 3.0, 2.0]], dtype=torch.float64, requires_grad=True)
    max_first(x, 1).sum().backward()
    assert x.grad.tolist() == [[0.0, 1.0, 0.0, 0.0]]


def test_cosine_norm_floor():
    z = torch.zeros(3, dtype=torch.float64)
    assert float(cosine(z, torch.ones(3, dtype=torch.float64))) == 0.0


PRIMITIVES = {
    "matmul": lambda a, b: (a @ b.T).sum(),
    "add": lambda a, b: ((a + b) ** 2).sum(),
    "tanh": lambda a, b: torch.tanh(a * b).sum(),
    "relu": lambda a, b: (torch.relu(a) * b).sum(),
    "softmax": lambda a, b: (torch.softmax(a, -1) * b).sum(),
    "cosine": lambda a, b: cosine(a, b).sum(),
    "max": lambda a, b: (max_first(a, 1) * b[:, 0]).sum(),
    "log": lambda a, b: torch.log(a ** 2 + 1).sum(),
    "exp": lambda a, b: (torch.exp(a) * b).sum(),
    "mean": lambda a, b: (a.mean(0) * b.mean(0)).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_primitive_gradients(name, seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(3, 4, generator=g, dtype=torch.float64)
    b = torch.randn(3, 4, generator=g, dtype=torch.float64)
    # keep max pooling away from near ties, where central differences straddle a kink
    top2 = torch.topk(a, 2, dim=1).values
    if name == "max" and bool(((top2[:, 0] - top2[:, 1]) < 1e-3).any()):
        return
    s = _store(a=a, b=b)
    assert finite_difference_check(lambda st: PRIMITIVES[name](st["a"], st["b"]), s) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12), st.integers(1, 12))
def test_masked_softmax_is_distribution(values, n_valid):
    x = torch.tensor(values, dtype=torch.float64)
    n_valid = min(n_valid, len(values))
    mask = torch.arange(len(values)) < n_valid
    p = masked_softmax(x, mask)
    assert abs(float(p.sum()) - 1) < 1e-12
    assert bool((p[mask] > 0).all()) and bool((p[~mask] == 0).all())


def test_masked_softmax_fully_masked_slice_has_no_nan():
    x = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
    mask = torch.tensor([[True, True, False], [False, False, False]])
    p = masked_softmax(x, mask)
    p.sum().backward()
    assert torch.isfinite(p).all() and torch.isfinite(x.grad).all()
    assert p[1].tolist() == [0.0, 0.0, 0.0]


def test_evaluation_is_deterministic(gen):
    W = torch.randn(6, 6, generator=gen, dtype=torch.float64)
    s = _store(W=W)
    f = lambda st: torch.logsumexp(st["W"] @ st["W"].T, 1).sum()
    v1 = evaluate_with_gradients(f, s)
    g1 = s.grad("W").clone()
    v2 = evaluate_with_gradients(f, s)
    assert v1 == v2 and torch.equal(g1, s.grad("W"))


# -- checkpoint container --

def _random_store(gen):
    s = ParameterStore(torch.float32)
    s.add("emb.table", torch.randn(7, 3, generator=gen))
    s.add("ctx.proj.b", torch.randn(5, generator=gen))
    s.add("critic.x.b", torch.randn((), generator=gen))
    s.add("名前", torch.randn(2, 2, 2, generator=gen))
    return s


def test_checkpoint_round_trip(tmp_path, gen):
    s = _random_store(gen)
    save_store(s, tmp_path / "m.ckpt")
    back = load_store(tmp_path / "m.ckpt")
    assert list(back) == list(s)
    for n in s:
        assert torch.equal(back[n].detach(), s[n].detach())


def test_checkpoint_layout(tmp_path, gen):
    s = ParameterStore(torch.float32)
    s.add("w", torch.tensor([[1.0, 2.0, 3.0]]))
    save_store(s, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    expected = (struct.pack("<IQ", CHECKPOINT_VERSION, 1) + struct.pack("<I", 1) + b"w"
                + struct.pack("<I", 2) + struct.pack("<2Q", 1, 3) + struct.pack("<3f", 1.0, 2.0, 3.0))
    assert raw == expected


def test_checkpoint_truncated(tmp_path, gen):
    save_store(_random_store(gen), tmp_path / "m.ckpt")
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[:-5])
    with pytest.raises(CheckpointError, match="offset"):
        load_tensors(tmp_path / "cut.ckpt")


def test_checkpoint_version_mismatch(tmp_path, gen):
    save_store(_random_store(gen), tmp_path / "m.ckpt")
    data = bytearray((tmp_path / "m.ckpt").read_bytes())
    data[0:4] = struct.pack("<I", 99)
    (tmp_path / "v.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="unsupported version"):
        load_tensors(tmp_path / "v.ckpt")


def test_checkpoint_float64_store_rounds_to_float32(tmp_path):
    s = _store(p=[1 / 3, 2 / 3])
    save_store(s, tmp_path / "m.ckpt")
    back = load_tensors(tmp_path / "m.ckpt")["p"]
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, np.array([1 / 3, 2 / 3], dtype=np.float32))
