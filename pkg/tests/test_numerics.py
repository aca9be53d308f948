import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deltanerf import numerics as nx
from deltanerf.numerics import OPS, RngStream


def fd_relative_error(f, inputs, h=1e-4):
    """Max over inputs of ||analytic - central FD|| / max(||analytic||, ||FD||)."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = f(*inputs)
    grads = torch.autograd.grad(out, inputs)
    worst = 0.0
    for k, x in enumerate(inputs):
        num = torch.zeros_like(x)
        flat = x.detach().reshape(-1)
        for j in range(flat.numel()):
            args_p = [y.detach().clone() for y in inputs]
            args_m = [y.detach().clone() for y in inputs]
            args_p[k].reshape(-1)[j] += h
            args_m[k].reshape(-1)[j] -= h
            num.reshape(-1)[j] = (f(*args_p) - f(*args_m)) / (2 * h)
        denom = max(float(grads[k].norm()), float(num.norm()), 1e-12)
        worst = max(worst, float((grads[k] - num).norm()) / denom)
    return worst


def _r(rng, *shape, away_from_zero=False):
    x = torch.from_numpy(rng.standard_normal(shape))
    if away_from_zero:
        x = x + torch.sign(x) * 0.1
    return x


# one scalar-valued probe per registered op: (builder of inputs, function)
def op_probes(rng):
    w = _r(rng, 5)
    return {
        "matmul": ([_r(rng, 3, 4), _r(rng, 4, 2)], lambda a, b: nx.matmul(a, b).pow(2).sum()),
        "conv2d": ([_r(rng, 1, 2, 5, 5), _r(rng, 3, 2, 3, 3), _r(rng, 3)],
                   lambda x, k, b: nx.conv2d(x, k, b, stride=2, padding=1).pow(2).sum()),
        "add": ([_r(rng, 4), _r(rng, 4)], lambda a, b: (nx.add(a, b) ** 2).sum()),
        "mul": ([_r(rng, 4), _r(rng, 4)], lambda a, b: (nx.mul(a, b) ** 2).sum()),
        "mean": ([_r(rng, 3, 4)], lambda a: (nx.mean(a, dim=0) ** 2).sum()),
        "sum": ([_r(rng, 3, 4)], lambda a: (nx.sum_(a, dim=1) ** 2).sum()),
        "relu": ([_r(rng, 6, away_from_zero=True)], lambda a: (nx.relu(a) * w[0]).pow(2).sum()),
        "silu": ([_r(rng, 6)], lambda a: nx.silu(a).pow(2).sum()),
        "sigmoid": ([_r(rng, 6)], lambda a: nx.sigmoid(a).pow(2).sum()),
        "softplus": ([_r(rng, 6)], lambda a: nx.softplus(a).pow(2).sum()),
        "concat": ([_r(rng, 2, 3), _r(rng, 2, 2)], lambda a, b: (nx.concat([a, b], dim=1) ** 2 @ w).sum()),
        "l1_norm": ([_r(rng, 3, 5, away_from_zero=True)], lambda a: nx.l1_norm(a).pow(2).sum()),
        "l2_norm": ([_r(rng, 3, 5)], lambda a: nx.l2_norm(a).pow(3).sum()),
        "cosine_similarity": ([_r(rng, 3, 5), _r(rng, 3, 5)], lambda a, b: nx.cosine_similarity(a, b).pow(2).sum()),
        "softmax": ([_r(rng, 2, 5)], lambda a: (nx.softmax(a) @ w).pow(2).sum()),
    }


def test_every_registered_op_has_a_probe():
    assert set(op_probes(np.random.default_rng(0))) == set(OPS)


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    for seed in range(3):
        inputs, f = op_probes(np.random.default_rng(seed))[name]
        tol = 1e-3 if name in ("relu", "l1_norm") else 1e-4
        assert fd_relative_error(f, inputs) < tol


def test_matmul_identity():
    a = torch.from_numpy(np.random.default_rng(1).standard_normal((3, 3)))
    assert torch.equal(nx.matmul(torch.eye(3, dtype=nx.DTYPE), a), a)


def test_1x1_conv_is_per_pixel_scaling():
    x = torch.from_numpy(np.random.default_rng(2).standard_normal((1, 1, 4, 4)))
    k = torch.full((1, 1, 1, 1), 2.5, dtype=nx.DTYPE)
    assert torch.allclose(nx.conv2d(x, k), 2.5 * x, atol=0, rtol=1e-15)


def test_3x3_conv_matches_nested_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 4))
    k = rng.standard_normal((3, 3))
    oracle = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for a in range(3):
                for b in range(3):
                    oracle[i, j] += x[i + a, j + b] * k[a, b]
    out = nx.conv2d(torch.from_numpy(x)[None, None], torch.from_numpy(k)[None, None])
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(out[0, 0].numpy(), oracle, rtol=0, atol=1e-12)


@pytest.mark.parametrize("op,args", [
    ("matmul", (torch.zeros(2, 3, dtype=nx.DTYPE), torch.zeros(2, 3, dtype=nx.DTYPE))),
    ("add", (torch.zeros(2, dtype=nx.DTYPE), torch.zeros(3, dtype=nx.DTYPE))),
    ("mul", (torch.zeros(2, 2, dtype=nx.DTYPE), torch.zeros(3, dtype=nx.DTYPE))),
    ("conv2d", (torch.zeros(1, 2, 4, 4, dtype=nx.DTYPE), torch.zeros(1, 3, 3, 3, dtype=nx.DTYPE))),
    ("cosine_similarity", (torch.zeros(2, 3, dtype=nx.DTYPE), torch.zeros(2, 4, dtype=nx.DTYPE))),
])
def test_shape_mismatch_names_op_and_shapes(op, args):
    with pytest.raises(nx.ShapeError) as err:
        OPS[op](*args)
    msg = str(err.value)
    assert op in msg
    assert str(tuple(args[0].shape)) in msg and str(tuple(args[1].shape)) in msg


def test_concat_mismatch_fails():
    with pytest.raises(nx.ShapeError, match="concat"):
        nx.concat([torch.zeros(2, 3), torch.zeros(3, 3)], dim=1)


def test_backward_square():
    x = nx.as_tensor(3.0, requires_grad=True)
    g = nx.backward(x * x, {"x": x})
    assert float(g["x"]) == 6.0


def test_backward_product():
    x = nx.as_tensor(2.0, requires_grad=True)
    y = nx.as_tensor(5.0, requires_grad=True)
    g = nx.backward(x * y, {"x": x, "y": y})
    assert (float(g["x"]), float(g["y"])) == (5.0, 2.0)


def test_backward_accumulates_without_reset():
    x = nx.as_tensor(3.0, requires_grad=True)
    nx.backward(x * x)
    nx.backward(x * x)
    assert float(x.grad) == 12.0


def test_backward_rejects_non_scalar():
    x = nx.as_tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(nx.ShapeError, match="scalar"):
        nx.backward(x * 2)


def test_mlp_64_params_matches_finite_differences():
    rng = np.random.default_rng(4)
    # 4 -> 8 -> 4 without biases on the second layer: 32 + 8 + 24 = 64 parameters
    w1, b1, w2 = _r(rng, 4, 8), _r(rng, 8), _r(rng, 8, 3)
    x = _r(rng, 5, 4)
    assert w1.numel() + b1.numel() + w2.numel() == 64

    def f(w1, b1, w2):
        return nx.mean(nx.matmul(nx.silu(nx.add(nx.matmul(x, w1), b1.expand(5, 8))), w2) ** 2)

    assert fd_relative_error(f, [w1, b1, w2]) < 1e-4


def test_gradient_shapes_match_parameters():
    net = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.SiLU(), torch.nn.Linear(4, 1))
    params = dict(net.named_parameters())
    grads = nx.backward(net(torch.ones(2, 3, dtype=nx.DTYPE)).sum(), params)
    assert all(grads[k].shape == p.shape for k, p in params.items())


def _scalar_adam(x, g, m, v, k, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    return x - lr * (m / (1 - b1 ** k)) / (np.sqrt(v / (1 - b2 ** k)) + eps), m, v


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": torch.tensor([1.0, -2.0], dtype=nx.DTYPE)}
    out, _ = nx.adam_step(p, {"w": torch.zeros(2, dtype=nx.DTYPE)}, {}, lr=0.1)
    assert torch.equal(out["w"], p["w"])


def test_adam_first_step_moves_by_lr():
    out, state = nx.adam_step({"w": torch.tensor(1.0, dtype=nx.DTYPE)},
                              {"w": torch.tensor(1.0, dtype=nx.DTYPE)}, {}, lr=0.1)
    assert float(out["w"]) == pytest.approx(0.9, abs=1e-6)
    assert state["step"] == 1


def test_adam_quadratic_matches_reference_and_decreases():
    x = {"x": torch.tensor(1.0, dtype=nx.DTYPE)}
    state = {}
    ref, m, v = 1.0, 0.0, 0.0
    trace = [1.0]
    for k in range(1, 11):
        g = 2 * x["x"]
        x, state = nx.adam_step(x, {"x": g}, state, lr=0.1)
        ref, m, v = _scalar_adam(ref, 2 * ref, m, v, k)
        assert float(x["x"]) == pytest.approx(ref, abs=1e-12)
        trace.append(abs(float(x["x"])))
    assert all(b < a for a, b in zip(trace, trace[1:]))


def test_adam_class_agrees_with_functional_step():
    w = torch.nn.Parameter(torch.tensor([0.5, -1.5], dtype=nx.DTYPE))
    opt = nx.Adam({"w": w}, lr=0.05)
    params, state = {"w": w.detach().clone()}, {}
    for _ in range(5):
        opt.zero_grad()
        nx.backward((w ** 2).sum())
        params, state = nx.adam_step(params, {"w": 2 * params["w"]}, state, lr=0.05)
        opt.step()
    assert torch.allclose(w.detach(), params["w"], atol=1e-12)


def test_nan_gradient_aborts_with_parameter_name():
    with pytest.raises(nx.NonFiniteError, match="layer.weight"):
        nx.adam_step({"layer.weight": torch.zeros(2)}, {"layer.weight": torch.tensor([0.0, float("nan")])}, {})
    w = torch.nn.Parameter(torch.zeros(2, dtype=nx.DTYPE))
    opt = nx.Adam({"enc.bias": w})
    w.grad = torch.tensor([float("nan"), 0.0], dtype=nx.DTYPE)
    with pytest.raises(nx.NonFiniteError, match="enc.bias"):
        opt.step()


def test_check_finite_reports_step():
    with pytest.raises(nx.NonFiniteError, match="step 7"):
        nx.check_finite(torch.tensor(float("inf")), "loss", 7)


# -- randomness ---------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**63), sid=st.integers(0, 2**63), start=st.integers(0, 1000),
       count=st.integers(1, 50))
def test_rng_draws_are_addressable_by_index(seed, sid, start, count):
    s = RngStream(seed, sid)
    full = s.uniform(start + count)
    np.testing.assert_array_equal(s.uniform(count, start), full[start:])
    n = s.normal(start + count)
    np.testing.assert_array_equal(s.normal(count, start), n[start:])


def test_rng_cursor_matches_absolute_offsets():
    s = RngStream(5, nx.stream_id("x"))
    cur = s.cursor()
    a, b = cur.uniform((3, 2)), cur.normal(4)
    np.testing.assert_array_equal(a.ravel(), s.uniform(6))
    np.testing.assert_array_equal(b, s.normal(4, 6))
    assert cur.position == 10


def test_rng_streams_differ_and_are_stable():
    a, b = RngStream(0, nx.stream_id("a")), RngStream(0, nx.stream_id("b"))
    assert not np.array_equal(a.uniform(8), b.uniform(8))
    assert nx.stream_id("a", 1) == nx.stream_id("a", 1) != nx.stream_id("a", 2)
    assert np.all(a.integers(7, 1000) < 7) and np.all(a.integers(7, 1000) >= 0)


def test_rng_normal_moments():
    x = RngStream(11, 3).normal(200_000)
    assert abs(x.mean()) < 0.01 and abs(x.var() - 1) < 0.01


def test_init_module_is_deterministic():
    def make():
        return nx.init_module(torch.nn.Linear(4, 3), RngStream(9, 1))
    a, b = make(), make()
    assert nx.module_checksum(a) == nx.module_checksum(b)
    assert nx.module_checksum(a) != nx.module_checksum(nx.init_module(torch.nn.Linear(4, 3), RngStream(10, 1)))


def test_identical_seeds_give_identical_gradients():
    def run():
        net = nx.init_module(torch.nn.Sequential(torch.nn.Linear(3, 5), torch.nn.SiLU(), torch.nn.Linear(5, 1)),
                             RngStream(2, 0))
        x = torch.from_numpy(RngStream(2, 1).normal(12).reshape(4, 3))
        g = nx.backward(net(x).pow(2).mean(), dict(net.named_parameters()))
        return {k: v.clone() for k, v in g.items()}
    a, b = run(), run()
    assert all(torch.equal(a[k], b[k]) for k in a)


# -- archives -------------------------------------------------------------------

def test_archive_round_trip(tmp_path):
    tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.array(3.5), "c.weight": np.ones((1, 2, 1, 1))}
    nx.save_archive(tmp_path / "x.dnar", tensors)
    back = nx.load_archive(tmp_path / "x.dnar")
    assert list(back) == sorted(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v)
    raw = (tmp_path / "x.dnar").read_bytes()
    assert raw[:4] == nx.ARCHIVE_MAGIC


def test_archive_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "x.dnar"
    nx.save_archive(p, {"w": np.ones(4)})
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(nx.ArchiveError, match="byte 0"):
        nx.load_archive(p)
    p.write_bytes(raw[:-5])
    with pytest.raises(nx.ArchiveError, match="byte"):
        nx.load_archive(p)


def test_module_save_load_and_checksum(tmp_path):
    a = nx.init_module(torch.nn.Linear(3, 2), RngStream(1, 1))
    b = nx.init_module(torch.nn.Linear(3, 2), RngStream(2, 1))
    nx.save_module(tmp_path / "m.dnar", a, extra={"note": np.array([1.0])})
    extra = nx.load_module(tmp_path / "m.dnar", b)
    assert nx.module_checksum(a) == nx.module_checksum(b)
    np.testing.assert_array_equal(extra["note"], [1.0])


def test_freeze_disables_gradients():
    m = nx.freeze(torch.nn.Linear(2, 2))
    assert not any(p.requires_grad for p in m.parameters())
