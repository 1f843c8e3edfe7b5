import numpy as np
import pytest

from twohand.nn import layers as L
from twohand.nn import tensor as T
from twohand.nn.optim import AdamState, adam_step
from twohand.nn.weights import WeightsError, dumps_weights, load_weights, loads_weights, save_weights

RNG = np.random.default_rng(0)
TOL = 1e-4


def rel_err(fd, g):
    """Relative error, with an absolute floor for gradients that vanish analytically
    (key biases cancel inside the softmax, for instance)."""
    if max(abs(fd), abs(g)) < 1e-8:
        return 0.0 if abs(fd - g) < 1e-8 else np.inf
    return abs(fd - g) / max(abs(fd), abs(g))


def gradcheck(fn, arrays, h=1e-6, max_coords=40):
    """Compare reverse-mode gradients of sum(w * fn(...)) with central differences."""
    ts = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out_shape = fn(*[T.Tensor(a) for a in arrays]).shape
    w = np.random.default_rng(1).normal(size=out_shape)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(fn(*ts), w))
    T.backward(tape, loss)
    worst = 0.0
    for k, a in enumerate(arrays):
        g = ts[k].grad if ts[k].grad is not None else np.zeros_like(a)
        for idx in list(np.ndindex(a.shape))[:max_coords]:
            up, dn = [x.copy() for x in arrays], [x.copy() for x in arrays]
            up[k][idx] += h
            dn[k][idx] -= h
            fd = (np.sum(w * fn(*map(T.Tensor, up)).data) - np.sum(w * fn(*map(T.Tensor, dn)).data)) / (2 * h)
            worst = max(worst, rel_err(fd, g[idx]))
    return worst


OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: T.mul(a, b), [(2, 3, 4), (1, 4)]),
    "gelu": (lambda a: T.gelu(a), [(5, 6)]),
    "silu": (lambda a: T.silu(a), [(5, 6)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "affine": (lambda x, W, b: T.affine(x, W, b), [(2, 3, 4), (4, 6), (6,)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [(3, 5, 8), (8,), (8,)]),
    "softmax": (lambda x: T.softmax(x, -1), [(3, 7)]),
    "reshape": (lambda x: T.reshape(x, (6, 4)), [(2, 3, 4)]),
    "transpose": (lambda x: T.transpose(x, (2, 0, 1)), [(2, 3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3, 4), (2, 2, 4)]),
    "getitem_basic": (lambda x: x[:, 1:3], [(2, 5, 3)]),
    "getitem_fancy": (lambda x: x[:, [0, 2, 2, 4]], [(2, 5, 3)]),
    "mean_all": (lambda x: T.mean_all(x), [(3, 4)]),
    "mse": (lambda a, b: T.mse(a, b), [(3, 4), (3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    fn, shapes = OPS[name]
    arrays = [RNG.normal(size=s) for s in shapes]
    if name == "layer_norm":
        arrays[1] += 1.0
    assert gradcheck(fn, arrays) < TOL


@pytest.mark.parametrize("kind", ["linear", "layernorm", "attention", "encoder_layer", "encoder"])
def test_layer_gradients(kind):
    rng = np.random.default_rng(5)
    d = 8
    mod = {"linear": lambda: L.Linear(d, 5, rng), "layernorm": lambda: L.LayerNorm(d),
           "attention": lambda: L.SelfAttention(d, 2, rng), "encoder_layer": lambda: L.EncoderLayer(d, 2, 16, rng),
           "encoder": lambda: L.TransformerEncoder(d, 2, 2, 16, rng)}[kind]()
    for p in mod.parameters():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    x = rng.normal(size=(2, 3, d))
    params = mod.parameters()
    w = rng.normal(size=mod(x).shape)

    def value():
        return float(np.sum(w * mod(x).data))

    T.zero_grad(params)
    xt = T.Tensor(x.copy(), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(mod(xt), w))
    T.backward(tape, loss)
    worst = 0.0
    targets = [(p.data, p.grad) for p in params] + [(x, xt.grad)]
    for arr, g in targets:
        for idx in list(np.ndindex(arr.shape))[:12]:
            old = arr[idx]
            arr[idx] = old + 1e-6
            up = value()
            arr[idx] = old - 1e-6
            dn = value()
            arr[idx] = old
            fd = (up - dn) / 2e-6
            worst = max(worst, rel_err(fd, g[idx]))
    assert worst < TOL


def test_affine_zero_weights_broadcast_bias():
    b = RNG.normal(size=4)
    out = T.affine(RNG.normal(size=(3, 5, 2)), np.zeros((2, 4)), b)
    assert np.array_equal(out.data, np.broadcast_to(b, (3, 5, 4)))


def test_softmax_rows_sum_to_one():
    s = T.softmax(RNG.normal(0, 10, (50, 17))).data
    assert np.abs(s.sum(-1) - 1).max() < 1e-12


def test_quadratic_gradient_exact():
    p = T.Tensor(RNG.normal(size=7), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(p, p))
    T.backward(tape, loss)
    assert np.array_equal(p.grad, 2 * p.data)


def test_single_adam_step_by_hand():
    p = T.Tensor(np.array([0.5]), requires_grad=True)
    st = AdamState(lr=0.01)
    g = np.array([-3.0])
    adam_step([p], [g], st)
    # m_hat = g, v_hat = g^2, so the step is -lr * g / (|g| + eps)
    assert p.data[0] == 0.5 - 0.01 * (-3.0 / (3.0 + 1e-8))


def train_run(seed):
    rng = np.random.default_rng(seed)
    enc = L.TransformerEncoder(8, 2, 2, 16, rng)
    x = rng.normal(size=(4, 3, 8))
    y = rng.normal(size=(4, 3, 8))
    st = AdamState(lr=1e-3)
    params = enc.parameters()
    for _ in range(100):
        T.zero_grad(params)
        with T.Tape() as tape:
            loss = T.mse(enc(x), y)
        T.backward(tape, loss)
        adam_step(params, T.grads(params), st)
    return dumps_weights(enc.state_dict())


def test_training_is_deterministic():
    assert train_run(3) == train_run(3)


def test_no_tape_no_graph():
    p = T.Tensor(np.ones(3), requires_grad=True)
    out = T.mul(p, p)
    assert not out.requires_grad


def test_identity_encoder_is_residual_only():
    enc = L.TransformerEncoder(8, 2, 2, 16, RNG, zero_out=True)
    x = RNG.normal(size=(2, 5, 8))
    assert np.array_equal(enc(x).data, x)


def test_weights_round_trip_and_corruption(tmp_path):
    enc = L.TransformerEncoder(8, 2, 1, 16, RNG)
    sd = enc.state_dict()
    save_weights(tmp_path / "w.bin", sd)
    back = load_weights(tmp_path / "w.bin")
    assert sorted(back) == sorted(sd) and all(np.array_equal(back[k], sd[k]) for k in sd)
    blob = dumps_weights(sd)
    with pytest.raises(WeightsError):
        loads_weights(blob[:-5])
    bad = bytearray(blob)
    bad[len(bad) // 2] ^= 1
    with pytest.raises(WeightsError):
        loads_weights(bytes(bad))
    other = L.TransformerEncoder(8, 2, 1, 16, np.random.default_rng(9))
    other.load_state_dict(back)
    assert dumps_weights(other.state_dict()) == blob


def test_load_state_dict_shape_mismatch():
    a = L.Linear(3, 4, RNG)
    with pytest.raises((ValueError, KeyError)):
        a.load_state_dict({"W": np.zeros((4, 3)), "b": np.zeros(4)})
