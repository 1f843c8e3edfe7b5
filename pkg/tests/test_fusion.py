import itertools

import numpy as np
import pytest

from twohand import fusion as F
from twohand.nn import tensor as T
from twohand.nn.layers import Linear, TransformerEncoder

RNG = np.random.default_rng(0)


def test_equal_priors_give_projection():
    proj = Linear(8, 16, RNG)
    x = RNG.normal(size=(5, 8))
    assert np.array_equal(F.fuse_priors(x, x, x, proj).data, proj(x).data)


def test_prior_permutation_exact():
    proj = Linear(8, 16, RNG)
    parts = [RNG.normal(size=(2, 5, 8)) for _ in range(3)]
    ref = F.fuse_priors(*parts, proj).data
    for perm in itertools.permutations(parts):
        assert np.array_equal(F.fuse_priors(*perm, proj).data, ref)


def test_zero_priors_give_bias():
    proj = Linear(8, 16, RNG)
    proj.b.data = RNG.normal(size=16)
    z = np.zeros((4, 8))
    assert np.array_equal(F.fuse_priors(z, z, z, proj).data, np.broadcast_to(proj.b.data, (4, 16)))


def test_prior_shape_mismatch_rejected():
    proj = Linear(8, 16, RNG)
    with pytest.raises(ValueError):
        F.fuse_priors(np.zeros((4, 8)), np.zeros((5, 8)), np.zeros((4, 8)), proj)


def test_mean_gradient():
    parts = [T.Tensor(RNG.normal(size=(3, 4)), requires_grad=True) for _ in range(3)]
    w = RNG.normal(size=(3, 4))
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(F._mean3(*parts), w))
    T.backward(tape, loss)
    for p in parts:
        assert np.allclose(p.grad, w / 3.0, rtol=0, atol=1e-15)


def test_identity_encoder_returns_image_tokens():
    fus = F.Fusion(F.FusionConfig(d=16, d_p=8, heads=2), RNG, identity=True)
    F_i = RNG.normal(size=(7, 16))
    priors = [RNG.normal(size=(4, 8)) for _ in range(3)]
    _, out = fus(F_i, *priors)
    assert np.array_equal(out.data, F_i)


def test_output_length_is_l():
    rng = np.random.default_rng(1)
    for _ in range(10):
        l, l_p, d, d_p = (int(v) for v in rng.integers([1, 1, 1, 1], [30, 30, 5, 5]))
        d, d_p = 4 * d, 4 * d_p
        B = int(rng.integers(1, 3))
        enc = TransformerEncoder(d, 2, 1, 2 * d, rng)
        proj = Linear(d_p, d, rng)
        F_a = F.fuse_priors(*[rng.normal(size=(B, l_p, d_p)) for _ in range(3)], proj)
        out = F.integrate(rng.normal(size=(B, l, d)), F_a, enc)
        assert out.shape == (B, l, d)
        assert F.integrate(rng.normal(size=(l, d)), F_a.data[0], enc).shape == (l, d)


def test_information_flows_from_priors():
    rng = np.random.default_rng(2)
    enc = TransformerEncoder(16, 2, 2, 32, rng)
    for p in enc.parameters():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    F_a = T.Tensor(rng.normal(size=(1, 5, 16)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(F.integrate(rng.normal(size=(1, 6, 16)), F_a, enc), 1.0))
    T.backward(tape, loss)
    assert np.abs(F_a.grad).max() > 1e-6


def test_width_mismatch_rejected():
    enc = TransformerEncoder(8, 2, 1, 16, RNG)
    with pytest.raises(ValueError):
        F.integrate(np.zeros((3, 8)), np.zeros((2, 4)), enc)


SMALL = F.FusionConfig(l=16, d=16, l_p=4, d_p=16, heads=2, prior_layers=1, fusion_layers=1, resolution=16)


@pytest.fixture(scope="module")
def grids():
    from twohand.synth import SCENARIOS, load_scenario
    return np.stack([F.prior_rasters(load_scenario(n).state, SMALL) for n in SCENARIOS])


def test_prior_rasters_ranges(grids):
    assert grids.shape == (5, 3, 16, 16)
    assert np.all((grids >= 0) & (grids <= 1))
    assert set(np.unique(grids[:, 1])) <= {0.0, 1.0}
    assert np.all((grids[:, 2] > 0) == (grids[:, 1] > 0))


def test_patchify_round_trip():
    g = RNG.normal(size=(2, 3, 8, 8))
    p = F.patchify(g, 2)
    assert p.shape == (2, 3, 4, 16)
    assert np.array_equal(p[0, 1, 1], g[0, 1, :4, 4:].reshape(-1))


def test_student_copy_of_teacher_has_zero_loss(grids):
    t = F.teacher(SMALL, 5)
    s = F.student(SMALL, 6)
    s.load_state_dict(t.state_dict())
    assert float(F.distill_loss(grids, t.bundle(grids), s).data) == 0.0


def test_untrained_student_loss_matches_target_variance(grids):
    t = F.teacher(SMALL, 5)
    targets = t.bundle(grids)
    var = np.var(np.concatenate(targets, axis=1))
    loss = float(F.distill_loss(grids, targets, F.student(SMALL, 6)).data)
    assert abs(loss - var) <= 0.5 * var


def test_distillation_decreases_and_is_deterministic(grids):
    a = F.train_student(grids, SMALL, steps=150, batch=4, lr=3e-3, seed=1, teacher_seed=5, log_every=10)
    b = F.train_student(grids, SMALL, steps=150, batch=4, lr=3e-3, seed=1, teacher_seed=5, log_every=10)
    assert a[2] == b[2]
    first = float(F.distill_loss(grids, a[0].bundle(grids), F.student(SMALL, 1)).data)
    last = float(F.distill_loss(grids, a[0].bundle(grids), a[1]).data)
    assert last < 0.5 * first


def test_image_tokens_shape():
    g = RNG.random((2, 3, 64, 64))
    tok = F.image_tokens(g)
    assert tok.shape == (2, 49, 128)
    assert np.array_equal(F.image_tokens(g), tok)
    with pytest.raises(ValueError):
        F.image_tokens(g, F.FusionConfig(l=50))


def test_config_validation():
    with pytest.raises(ValueError):
        F.FusionConfig(l_p=15)
