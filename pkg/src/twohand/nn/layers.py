"""Parameter containers: linear, layer norm, multi-head self-attention, encoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds parameters and submodules; names are dotted paths in registration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for k, m in self._children.items():
            out.update(m.named_parameters(prefix + k + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            if k in state:
                arr = np.asarray(state[k], dtype=np.float64)
                if arr.shape != p.shape:
                    raise ValueError(f"{k}: shape {arr.shape} does not match {p.shape}")
                p.data = arr.copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, zero: bool = False):
        super().__init__()
        if zero or rng is None:
            w = np.zeros((n_in, n_out))
        else:
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.W = self.param("W", w)
        self.b = self.param("b", np.zeros(n_out))

    def __call__(self, x):
        return T.affine(x, self.W, self.b)


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(n))
        self.beta = self.param("beta", np.zeros(n))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def self_attention(x, heads: int, Wqkv, bqkv, Wo, bo) -> Tensor:
    """Multi-head scaled dot-product self-attention over (B, L, D) input."""
    x = T.as_tensor(x)
    B, L, D = x.shape
    if D % heads:
        raise ValueError(f"model width {D} not divisible by {heads} heads")
    if T.as_tensor(Wqkv).shape != (D, 3 * D):
        raise ValueError(f"Wqkv must be ({D}, {3 * D})")
    dh = D // heads
    qkv = T.affine(x, Wqkv, bqkv)  # (B, L, 3D)
    qkv = T.transpose(T.reshape(qkv, (B, L, 3, heads, dh)), (2, 0, 3, 1, 4))  # (3, B, H, L, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)  # (B, H, L, dh)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, D))
    return T.affine(ctx, Wo, bo)


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator | None = None, zero_out: bool = False):
        super().__init__()
        self.heads = heads
        self.qkv = self.child("qkv", Linear(d, 3 * d, rng))
        self.out = self.child("out", Linear(d, d, rng, zero=zero_out))

    def __call__(self, x):
        return self_attention(x, self.heads, self.qkv.W, self.qkv.b, self.out.W, self.out.b)


class EncoderLayer(Module):
    """Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, d: int, heads: int, ff: int, rng: np.random.Generator | None = None,
                 zero_out: bool = False):
        super().__init__()
        self.ln1 = self.child("ln1", LayerNorm(d))
        self.attn = self.child("attn", SelfAttention(d, heads, rng, zero_out))
        self.ln2 = self.child("ln2", LayerNorm(d))
        self.fc1 = self.child("fc1", Linear(d, ff, rng))
        self.fc2 = self.child("fc2", Linear(ff, d, rng, zero=zero_out))

    def __call__(self, x):
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.fc2(T.gelu(self.fc1(self.ln2(x)))))


class TransformerEncoder(Module):
    """Stack of pre-norm encoder layers without a final norm, so zeroed output
    projections make it the identity map."""

    def __init__(self, d: int, heads: int, layers: int, ff: int | None = None,
                 rng: np.random.Generator | None = None, zero_out: bool = False):
        super().__init__()
        ff = ff or 4 * d
        self.layers = [self.child(f"layer{i}", EncoderLayer(d, heads, ff, rng, zero_out)) for i in range(layers)]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
