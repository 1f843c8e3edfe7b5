"""Feature-level fusion of the three 2D priors with image tokens.

Prior tokens F_k, F_s, F_d (keypoints, segmentation, depth) are averaged and
projected to the image width to give F_a; the image tokens F_i and F_a are run
through a transformer encoder together and only the first ``l`` outputs are
kept.  The prior tokens themselves come from a small patch encoder trained to
match a frozen, seeded teacher of the same architecture with an MSE loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hand import keypoints, skin
from .nn import tensor as T
from .nn.layers import LayerNorm, Linear, Module, TransformerEncoder
from .nn.optim import AdamState, adam_step
from .render import fit_camera, keypoint_heatmap, render_priors


@dataclass(frozen=True)
class FusionConfig:
    l: int = 49  # image tokens
    d: int = 128  # image token width
    l_p: int = 16  # tokens per prior
    d_p: int = 64  # prior token width
    heads: int = 4
    prior_layers: int = 2
    fusion_layers: int = 2
    resolution: int = 64

    def __post_init__(self):
        g = int(round(np.sqrt(self.l_p)))
        if g * g != self.l_p or self.resolution % g:
            raise ValueError("l_p must be a square whose side divides the raster resolution")


@dataclass
class FeatureBundle:
    F_i: np.ndarray
    F_k: np.ndarray
    F_s: np.ndarray
    F_d: np.ndarray
    F_a: np.ndarray | None = None
    F: np.ndarray | None = None

    @property
    def l(self) -> int:
        return self.F_i.shape[-2]


# ---------------------------------------------------------------------------
# fusion math


def _mean3(a, b, c) -> T.Tensor:
    """Elementwise mean of three tensors.  Values are sorted first, so any
    permutation of the arguments gives bit-identical results, and the mean is
    taken as an offset from the smallest, so three equal inputs return it exactly."""
    a, b, c = T.as_tensor(a), T.as_tensor(b), T.as_tensor(c)
    s = np.sort(np.stack([a.data, b.data, c.data]), axis=0)
    out = T.Tensor(s[0] + ((s[1] - s[0]) + (s[2] - s[0])) / 3.0)
    return T._record(out, (a, b, c), lambda g: [T._accum(t, g / 3.0, True) for t in (a, b, c)])


def fuse_priors(F_k, F_s, F_d, proj: Linear) -> T.Tensor:
    shapes = {T.as_tensor(F).shape for F in (F_k, F_s, F_d)}
    if len(shapes) != 1:
        raise ValueError(f"prior token shapes differ: {sorted(shapes)}")
    return proj(_mean3(F_k, F_s, F_d))


def integrate(F_i, F_a, encoder: TransformerEncoder) -> T.Tensor:
    F_i, F_a = T.as_tensor(F_i), T.as_tensor(F_a)
    squeeze = F_i.data.ndim == 2
    if squeeze:
        F_i, F_a = T.reshape(F_i, (1,) + F_i.shape), T.reshape(F_a, (1,) + F_a.shape)
    if F_i.shape[-1] != F_a.shape[-1]:
        raise ValueError("image and fused tokens must share a width")
    l = F_i.shape[1]
    out = encoder(T.concat([F_i, F_a], axis=1))[:, :l]
    return T.reshape(out, out.shape[1:]) if squeeze else out


class Fusion(Module):
    """Projection plus integration encoder."""

    def __init__(self, cfg: FusionConfig = FusionConfig(), rng=None, identity: bool = False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.proj = self.child("proj", Linear(cfg.d_p, cfg.d, rng))
        self.encoder = self.child("encoder", TransformerEncoder(cfg.d, cfg.heads, cfg.fusion_layers, 2 * cfg.d,
                                                                rng, zero_out=identity))

    def __call__(self, F_i, F_k, F_s, F_d):
        F_a = fuse_priors(F_k, F_s, F_d, self.proj)
        return F_a, integrate(F_i, F_a, self.encoder)


# ---------------------------------------------------------------------------
# prior encoders (teacher and student)


def prior_rasters(state, cfg: FusionConfig = FusionConfig(), tess=(8, 6)) -> np.ndarray:
    """(3, R, R) input grids for one two-hand state: keypoint heatmap, merged
    silhouette and normalised inverse depth."""
    meshes = [skin(state.left, *tess), skin(state.right, *tess)]
    kps = [keypoints(state.left), keypoints(state.right)]
    cam = fit_camera(np.concatenate([m.vertices for m in meshes]), cfg.resolution)
    pm = render_priors(meshes, kps, cam)
    heat = keypoint_heatmap(np.concatenate(pm.keypoints2d), cam.resolution)
    sil = (pm.silhouettes[0] | pm.silhouettes[1]).astype(np.float64)
    finite = np.isfinite(pm.depth)
    dep = np.zeros_like(pm.depth)
    dep[finite] = 1.0 - np.clip(pm.depth[finite] / 400.0, 0.0, 1.0)
    return np.stack([heat, sil, dep])


def patchify(grids: np.ndarray, side: int) -> np.ndarray:
    """(B, C, R, R) -> (B, C, side*side, (R/side)^2) row-major patches."""
    B, C, R, _ = grids.shape
    p = R // side
    x = grids.reshape(B, C, side, p, side, p).transpose(0, 1, 2, 4, 3, 5)
    return x.reshape(B, C, side * side, p * p)


class PriorEncoder(Module):
    """Patch embedding per prior channel, a shared encoder over all prior tokens,
    and one head per prior followed by a layer norm.  ``student=True`` starts the
    output norm with zero gain so the initial prediction is exactly zero."""

    def __init__(self, cfg: FusionConfig = FusionConfig(), rng=None, student: bool = False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.side = int(round(np.sqrt(cfg.l_p)))
        patch = (cfg.resolution // self.side) ** 2
        self.embed = [self.child(f"embed{c}", Linear(patch, cfg.d_p, rng)) for c in range(3)]
        self.pos = self.param("pos", rng.normal(0.0, 0.02, size=(3 * cfg.l_p, cfg.d_p)))
        self.encoder = self.child("encoder", TransformerEncoder(cfg.d_p, cfg.heads, cfg.prior_layers,
                                                                2 * cfg.d_p, rng))
        self.heads = [self.child(f"head{c}", Linear(cfg.d_p, cfg.d_p, rng)) for c in range(3)]
        self.norms = [self.child(f"norm{c}", LayerNorm(cfg.d_p)) for c in range(3)]
        if student:
            for n in self.norms:
                n.gamma.data = np.zeros(cfg.d_p)

    def __call__(self, grids) -> list[T.Tensor]:
        grids = np.asarray(grids, dtype=np.float64)
        if grids.ndim == 3:
            grids = grids[None]
        patches = patchify(grids, self.side)
        toks = T.concat([self.embed[c](patches[:, c]) for c in range(3)], axis=1)
        h = self.encoder(T.add(toks, self.pos))
        lp = self.cfg.l_p
        return [self.norms[c](self.heads[c](h[:, c * lp:(c + 1) * lp])) for c in range(3)]

    def bundle(self, grids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(t.data for t in self(grids))


def teacher(cfg: FusionConfig = FusionConfig(), seed: int = 1234) -> PriorEncoder:
    return PriorEncoder(cfg, np.random.default_rng(seed))


def student(cfg: FusionConfig = FusionConfig(), seed: int = 0) -> PriorEncoder:
    return PriorEncoder(cfg, np.random.default_rng(seed), student=True)


def distill_loss(grids, targets, net: PriorEncoder) -> T.Tensor:
    preds = net(grids)
    pred = T.concat(preds, axis=1)
    return T.mse(pred, np.concatenate(targets, axis=1))


def distill_step(grids, targets, net: PriorEncoder, adam: AdamState) -> float:
    """One MSE step of ``net`` toward the teacher tokens ``targets = (F_k, F_s, F_d)``."""
    params = net.parameters()
    T.zero_grad(params)
    with T.Tape() as tape:
        loss = distill_loss(grids, targets, net)
    T.backward(tape, loss)
    adam_step(params, T.grads(params), adam)
    return float(loss.data)


def image_tokens(grids: np.ndarray, cfg: FusionConfig = FusionConfig(), seed: int = 99) -> np.ndarray:
    """Stand-in image tokens: a frozen random linear embedding of square patches
    of the stacked raster (``l`` must be a square number; a border that does not
    fill a whole patch is dropped)."""
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim == 3:
        grids = grids[None]
    side = int(round(np.sqrt(cfg.l)))
    if side * side != cfg.l:
        raise ValueError("l must be a square number for the stand-in image tokens")
    p = cfg.resolution // side
    crop = grids[:, :, :side * p, :side * p]
    B, C = crop.shape[:2]
    x = crop.reshape(B, C, side, p, side, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, cfg.l, C * p * p)
    W = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(C * p * p), size=(C * p * p, cfg.d))
    return x @ W


def train_student(grids: np.ndarray, cfg: FusionConfig = FusionConfig(), steps: int = 2000, batch: int = 8,
                  lr: float = 1e-3, seed: int = 0, teacher_seed: int = 1234, log_every: int = 10):
    """Distil a student toward the frozen teacher on ``grids`` (n, 3, R, R).

    Returns (teacher, student, [(step, loss)]).
    """
    grids = np.asarray(grids, dtype=np.float64)
    if len(grids) == 0:
        raise ValueError("no rasters to distil on")
    t_net = teacher(cfg, teacher_seed)
    s_net = student(cfg, seed)
    targets = t_net.bundle(grids)
    rng = np.random.default_rng(seed)
    adam = AdamState(lr=lr)
    curve = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(grids), batch)
        loss = distill_step(grids[idx], [t[idx] for t in targets], s_net, adam)
        if not np.isfinite(loss):
            from .diffusion import NumericalError
            raise NumericalError("non-finite distillation loss")
        if step % log_every == 0 or step == steps:
            curve.append((step, loss))
    return t_net, s_net, curve
