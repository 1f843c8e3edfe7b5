"""Conditional two-hand diffusion: cosine schedule, clean-sample-prediction
training, and deterministic DDIM sampling with collision-gradient guidance."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import collision as col
from .hand import SHAPE_DIM
from .nn import tensor as T
from .nn.layers import LayerNorm, Linear, Module, TransformerEncoder
from .nn.optim import AdamState, adam_step
from .state import LEFT_POSE, LEFT_SHAPE, REL_TRANS, RIGHT_POSE, RIGHT_SHAPE, STATE_DIM, TwoHandState

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # (T + 1,), alpha_bar[0] = 1


def cosine_schedule(T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Squared-cosine cumulative signal level with per-step betas clipped at ``max_beta``."""
    if T < 2:
        raise ValueError("need at least 2 diffusion steps")

    def f(t):
        return np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2

    steps = np.arange(T + 1, dtype=np.float64)
    ratio = f(steps[1:]) / f(steps[:-1])
    betas = np.minimum(1.0 - ratio, max_beta)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    alpha_bar.flags.writeable = False
    return NoiseSchedule(T, alpha_bar)


def q_sample(x0, t: int, noise, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; ``t`` may be an int or a per-row array."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"timestep out of range [1, {schedule.T}]")
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ValueError("noise must match x0")
    ab = schedule.alpha_bar[t_arr]
    if t_arr.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def ddim_timesteps(T: int, steps: int) -> list[int]:
    stride = T // steps
    if stride < 1:
        raise ValueError("more DDIM steps than diffusion steps")
    return [T - k * stride for k in range(steps)]


def ddim_sample(denoise, x_T: np.ndarray, schedule: NoiseSchedule, steps: int, adjust=None) -> np.ndarray:
    """Deterministic DDIM (eta = 0) with a clean-sample predictor.

    ``denoise(x_t, t) -> x0_hat``; ``adjust(x0_hat, t) -> x0_hat`` runs after each
    prediction and before the transition.  The last transition lands on t = 0
    where alpha_bar = 1, so the output is the final adjusted prediction.
    """
    x = np.asarray(x_T, dtype=np.float64)
    ts = ddim_timesteps(schedule.T, steps)
    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0
        x0_hat = denoise(x, t)
        if not np.all(np.isfinite(x0_hat)):
            raise NumericalError(f"denoiser produced non-finite output at t={t}")
        if adjust is not None:
            x0_hat = adjust(x0_hat, t)
        ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
        eps = (x - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps
    return x


# ---------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray, min_std: float = 1e-3) -> "Normalizer":
        data = np.asarray(data, dtype=np.float64)
        return cls(data.mean(axis=0), np.maximum(data.std(axis=0), min_std))

    @classmethod
    def identity(cls, dim: int = STATE_DIM) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def encode(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def decode(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 128
    heads: int = 4
    layers: int = 4
    ff_mult: int = 2
    # also add each condition token's embedding to the matching state token
    cond_skip: bool = True


def _token_layout():
    """Indices into the flat state for each token, in token order.

    Tokens: 16 left pose joints, 16 right pose joints, left shape, right shape,
    relative translation.
    """
    pose_idx = np.concatenate([np.arange(LEFT_POSE.start, LEFT_POSE.stop),
                               np.arange(RIGHT_POSE.start, RIGHT_POSE.stop)]).reshape(32, 3)
    shape_idx = np.stack([np.arange(LEFT_SHAPE.start, LEFT_SHAPE.stop),
                          np.arange(RIGHT_SHAPE.start, RIGHT_SHAPE.stop)])
    trans_idx = np.arange(REL_TRANS.start, REL_TRANS.stop).reshape(1, 3)
    return pose_idx, shape_idx, trans_idx


POSE_IDX, SHAPE_IDX, TRANS_IDX = _token_layout()
N_STATE_TOKENS = 32 + 2 + 1
# position in the flat state of each value in the concatenated head outputs
_OUT_ORDER = np.concatenate([POSE_IDX.reshape(-1), SHAPE_IDX.reshape(-1), TRANS_IDX.reshape(-1)])
_OUT_INV = np.argsort(_OUT_ORDER)


def timestep_features(t, d: int) -> np.ndarray:
    """Sinusoidal timestep features, (B, d)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser(Module):
    """Transformer that predicts the clean state from (x_t, t, c).

    71 tokens: 35 state tokens, one timestep token, 35 condition tokens laid out
    like the state tokens.  Output heads are zero-initialised and read the
    residual stream directly, without a final norm, so the map from input
    embeddings to outputs can stay linear.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        d = cfg.d_model
        self.cfg = cfg
        self.pose_in = self.child("pose_in", Linear(3, d, rng))
        self.shape_in = self.child("shape_in", Linear(SHAPE_DIM, d, rng))
        self.trans_in = self.child("trans_in", Linear(3, d, rng))
        self.cond_pose_in = self.child("cond_pose_in", Linear(3, d, rng))
        self.cond_shape_in = self.child("cond_shape_in", Linear(SHAPE_DIM, d, rng))
        self.cond_trans_in = self.child("cond_trans_in", Linear(3, d, rng))
        self.time_fc1 = self.child("time_fc1", Linear(d, d, rng))
        self.time_fc2 = self.child("time_fc2", Linear(d, d, rng))
        self.pos = self.param("pos", rng.normal(0.0, 0.02, size=(2 * N_STATE_TOKENS + 1, d)))
        self.encoder = self.child("encoder", TransformerEncoder(d, cfg.heads, cfg.layers, cfg.ff_mult * d, rng))
        self.pose_out = self.child("pose_out", Linear(d, 3, zero=True))
        self.shape_out = self.child("shape_out", Linear(d, SHAPE_DIM, zero=True))
        self.trans_out = self.child("trans_out", Linear(d, 3, zero=True))

    def _embed_state(self, x: np.ndarray, pose_in, shape_in, trans_in):
        B = x.shape[0]
        pose = pose_in(x[:, POSE_IDX])  # (B, 32, d)
        shape = shape_in(x[:, SHAPE_IDX])  # (B, 2, d)
        trans = trans_in(x[:, TRANS_IDX])  # (B, 1, d)
        return T.concat([pose, shape, trans], axis=1), B

    def __call__(self, x_t, t, c):
        x_t = np.asarray(x_t, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        if x_t.shape[-1] != STATE_DIM or c.shape != x_t.shape:
            raise ValueError("x_t and c must be (B, 109)")
        B = x_t.shape[0]
        d = self.cfg.d_model
        xs, _ = self._embed_state(x_t, self.pose_in, self.shape_in, self.trans_in)
        cs, _ = self._embed_state(c, self.cond_pose_in, self.cond_shape_in, self.cond_trans_in)
        tf = timestep_features(np.broadcast_to(t, (B,)), d)
        temb = self.time_fc2(T.gelu(self.time_fc1(tf)))
        temb = T.reshape(temb, (B, 1, d))
        if self.cfg.cond_skip:
            xs = T.add(xs, cs)
        h = T.add(T.concat([xs, temb, cs], axis=1), self.pos)
        h = self.encoder(h)
        h = h[:, :N_STATE_TOKENS]
        pose = T.reshape(self.pose_out(h[:, :32]), (B, 96))
        shape = T.reshape(self.shape_out(h[:, 32:34]), (B, 10))
        trans = T.reshape(self.trans_out(h[:, 34:35]), (B, 3))
        flat = T.concat([pose, shape, trans], axis=1)
        return flat[:, _OUT_INV]

    def predict(self, x_t, t, c) -> np.ndarray:
        return self(x_t, t, c).data


def train_step(x0: np.ndarray, c: np.ndarray, t: np.ndarray, noise: np.ndarray, denoiser,
               schedule: NoiseSchedule, adam: AdamState) -> float:
    """One optimiser step on the clean-sample regression loss.

    Loss is the squared error between the prediction and x0, averaged over the
    batch and over the 109 dimensions.
    """
    x_t = q_sample(x0, t, noise, schedule)
    params = denoiser.parameters()
    T.zero_grad(params)
    with T.Tape() as tape:
        pred = denoiser(x_t, t, c)
        loss = T.mse(pred, x0)
    if not np.isfinite(loss.data):
        raise NumericalError("non-finite training loss")
    T.backward(tape, loss)
    adam_step(params, T.grads(params), adam)
    return float(loss.data)


# ---------------------------------------------------------------------------
# guided sampling


@dataclass(frozen=True)
class GuidanceConfig:
    lam: float = 1e-6
    n_grad_iters: int = 3
    ddim_steps: int = 50
    # which pairings enter the guidance loss: refined left vs right, and each
    # refined hand against the other hand of the condition
    against_condition: bool = True


@dataclass
class SampleResult:
    x0: np.ndarray  # normalised
    state: TwoHandState
    step_losses: list = field(default_factory=list)  # (t, [loss per guidance iteration])
    skipped: int = 0


def guidance_loss(x_raw: np.ndarray, cond_pair, cfg: col.CollisionConfig, tess, against_condition: bool = True):
    """Collision loss of a raw flat state and its gradient over the flat vector."""
    pp = col.pose_state_vector(x_raw, tess)
    vl, vr = pp.left_mesh.vertices, pp.right_mesh.vertices
    cs = col.detect_collisions(pp.left_mesh, pp.right_mesh, cfg)
    loss, gl, gr = col.pair_loss(vl, vr, cs, cfg)
    if against_condition and cond_pair is not None:
        cs_l = col.detect_collisions(pp.left_mesh, cond_pair.right_mesh, cfg)
        l2, g2, _ = col.pair_loss(vl, cond_pair.right_mesh.vertices, cs_l, cfg)
        cs_r = col.detect_collisions(cond_pair.left_mesh, pp.right_mesh, cfg)
        l3, _, g3 = col.pair_loss(cond_pair.left_mesh.vertices, vr, cs_r, cfg)
        loss, gl, gr = loss + l2 + l3, gl + g2, gr + g3
    return loss, col.state_vjp(pp, gl, gr)


def guide_prediction(x0_hat: np.ndarray, normalizer: Normalizer, cond_pair, guidance: GuidanceConfig,
                     ccfg: col.CollisionConfig, tess):
    """Gradient-descent steps on the collision loss, in normalised coordinates.

    Returns the adjusted prediction, the loss seen at each iteration, and the
    number of skipped (non-finite) iterations.
    """
    z = np.array(x0_hat, dtype=np.float64)
    losses = []
    skipped = 0
    for _ in range(guidance.n_grad_iters):
        loss, g_raw = guidance_loss(normalizer.decode(z), cond_pair, ccfg, tess, guidance.against_condition)
        losses.append(loss)
        if not (np.isfinite(loss) and np.all(np.isfinite(g_raw))):
            log.warning("non-finite collision gradient; skipping guidance iteration")
            skipped += 1
            continue
        z = z - guidance.lam * (g_raw * normalizer.std)
    return z, losses, skipped


def guided_sample(c: np.ndarray, denoiser, schedule: NoiseSchedule, guidance: GuidanceConfig,
                  normalizer: Normalizer, ccfg: col.CollisionConfig = col.CollisionConfig(),
                  tess=(8, 6), seed: int = 0, x_T: np.ndarray | None = None,
                  left_root=None) -> SampleResult:
    """Refine one penetrated condition ``c`` (normalised flat state)."""
    c = np.asarray(c, dtype=np.float64).reshape(1, STATE_DIM)
    if x_T is None:
        x_T = np.random.default_rng(seed).standard_normal((1, STATE_DIM))
    cond_pair = col.pose_state_vector(normalizer.decode(c[0]), tess)
    result = SampleResult(None, None)
    predict = denoiser.predict if hasattr(denoiser, "predict") else denoiser

    def denoise(x, t):
        return predict(x, t, c)

    def adjust(x0_hat, t):
        if guidance.n_grad_iters <= 0:
            return x0_hat
        z, losses, skipped = guide_prediction(x0_hat[0], normalizer, cond_pair, guidance, ccfg, tess)
        result.step_losses.append((t, losses))
        result.skipped += skipped
        return z[None, :]

    x0 = ddim_sample(denoise, x_T, schedule, guidance.ddim_steps, adjust)[0]
    result.x0 = x0
    result.state = TwoHandState.from_vector(normalizer.decode(x0), left_root=left_root)
    return result


def unguided_sample(c, denoiser, schedule, steps, normalizer, seed: int = 0, left_root=None) -> SampleResult:
    c = np.asarray(c, dtype=np.float64).reshape(1, STATE_DIM)
    x_T = np.random.default_rng(seed).standard_normal((1, STATE_DIM))
    predict = denoiser.predict if hasattr(denoiser, "predict") else denoiser
    x0 = ddim_sample(lambda x, t: predict(x, t, c), x_T, schedule, steps)[0]
    return SampleResult(x0, TwoHandState.from_vector(normalizer.decode(x0), left_root=left_root))


# ---------------------------------------------------------------------------
# persistence


def denoiser_state(denoiser: Denoiser, normalizer: Normalizer) -> dict[str, np.ndarray]:
    named = denoiser.state_dict()
    named["norm.mean"] = normalizer.mean
    named["norm.std"] = normalizer.std
    cfg = denoiser.cfg
    named["config"] = np.array([cfg.d_model, cfg.heads, cfg.layers, cfg.ff_mult, cfg.cond_skip], dtype=np.float64)
    return named


def denoiser_from_state(named: dict[str, np.ndarray]) -> tuple[Denoiser, Normalizer]:
    named = dict(named)
    d, h, layers, ff, skip = (int(v) for v in named.pop("config"))
    norm = Normalizer(named.pop("norm.mean"), named.pop("norm.std"))
    model = Denoiser(DenoiserConfig(d, h, layers, ff, bool(skip)))
    model.load_state_dict(named)
    return model, norm



# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4500
    batch: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 10
    lr_schedule: str = "cosine"  # or "constant"

    def __post_init__(self):
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``; cosine decays to zero at the last step."""
        if self.lr_schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * (step - 1) / self.steps))


def train_denoiser(clean: np.ndarray, cond: np.ndarray, schedule: NoiseSchedule,
                   model_cfg: DenoiserConfig = DenoiserConfig(), cfg: TrainConfig = TrainConfig(),
                   progress=None):
    """Fit a denoiser on raw (clean, condition) pairs.

    The normaliser is fitted on the clean states and applied to both.  Batches,
    timesteps and noise come from one generator seeded with ``cfg.seed``, so a
    rerun is bit-identical.  Returns (denoiser, normaliser, [(step, loss)]).
    """
    clean = np.asarray(clean, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if clean.shape != cond.shape or clean.ndim != 2 or clean.shape[1] != STATE_DIM or len(clean) == 0:
        raise ValueError("clean and cond must be matching non-empty (n, 109) arrays")
    rng = np.random.default_rng(cfg.seed)
    norm = Normalizer.fit(clean)
    x0_all, c_all = norm.encode(clean), norm.encode(cond)
    model = Denoiser(model_cfg, rng)
    adam = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(clean), cfg.batch)
        t = rng.integers(1, schedule.T + 1, cfg.batch)
        noise = rng.standard_normal((cfg.batch, STATE_DIM))
        adam.lr = cfg.lr_at(step)
        loss = train_step(x0_all[idx], c_all[idx], t, noise, model, schedule, adam)
        if step % cfg.log_every == 0 or step == cfg.steps:
            curve.append((step, loss))
            if progress is not None:
                progress(step, loss)
    return model, norm, curve
