"""Acceptance criteria 1-9.  Each test prints one PASS/FAIL line.

Criterion 5 replays the recorded end-to-end run in ``results/e2e``: the shipped
weights refine the regenerated test split and every metric must match the
recorded values exactly.
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from twohand import cli
from twohand import collision as col
from twohand import diffusion as D
from twohand import fusion as F
from twohand import metrics as M
from twohand import pipeline as P
from twohand.config import RunConfig
from twohand.hand import skin
from twohand.nn import layers as L
from twohand.nn import tensor as T
from twohand.state import STATE_DIM, TwoHandState
from twohand.synth import (SCENARIOS, SPLITS, SynthConfig, corpus_arrays, dumps_corpus, make_records,
                           sample_clean_pose)

from conftest import colliding_states
from test_nn import OPS, gradcheck, rel_err

E2E = Path(__file__).resolve().parents[1] / "results" / "e2e"
TOL = 1e-4


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


def provenance(name: str) -> dict:
    """key -> value, plus 'input <file>' / 'output <file>' -> sha256."""
    out = {}
    for line in (E2E / f"provenance-{name}.txt").read_text().splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = v
        else:
            tag, fname, sha = line.split()
            out[f"{tag} {fname}"] = sha.split("=", 1)[1]
    return out


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------


def random_two_hand_poses(n: int, seed: int):
    """Scenario poses with extra pose and translation noise; many touch, some overlap."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        st = sample_clean_pose(rng, SCENARIOS[k % len(SCENARIOS)])
        x = st.to_vector()
        x[:STATE_DIM - 3] += rng.normal(0, 0.1, STATE_DIM - 3) * (np.arange(STATE_DIM - 3) % 53 < 48)
        x[-3:] += rng.normal(0, 6.0, 3)
        out.append(TwoHandState.from_vector(x))
    return out


def test_criterion_1_grid_equals_brute_force(report):
    t0 = time.perf_counter()
    states = random_two_hand_poses(100, 2024)
    mismatches, nonempty = 0, 0
    for st in states:
        a, b = skin(st.left), skin(st.right)
        grid = col.detect_collisions(a, b)
        brute = col.detect_collisions(a, b, method="brute")
        keys = list(zip(grid.i.tolist(), grid.j.tolist()))
        mismatches += not (grid.same_as(brute) and keys == sorted(keys)
                           and keys == list(zip(brute.i.tolist(), brute.j.tolist())))
        nonempty += len(grid) > 0
    elapsed = time.perf_counter() - t0
    report(1, mismatches == 0 and nonempty >= 20 and elapsed < 30.0,
           f"{mismatches} mismatches over 100 poses ({nonempty} with pairs), {elapsed:.1f} s")


def module_gradcheck(mod, x, rng, h=1e-6, per_param=6):
    params = mod.parameters()
    w = rng.normal(size=mod(x).shape)

    def value():
        return float(np.sum(w * mod(x).data))

    T.zero_grad(params)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(mod(x), w))
    T.backward(tape, loss)
    worst = 0.0
    for p in params:
        g = p.grad.copy()
        for idx in list(np.ndindex(p.shape))[:per_param]:
            old = p.data[idx]
            p.data[idx] = old + h
            up = value()
            p.data[idx] = old - h
            dn = value()
            p.data[idx] = old
            worst = max(worst, rel_err((up - dn) / (2 * h), g[idx]))
    return worst


class _DenoiserAsModule:
    """Adapter so the composed denoiser can go through module_gradcheck."""

    def __init__(self, model, t, c):
        self.model, self.t, self.c = model, t, c

    def parameters(self):
        return self.model.parameters()

    def __call__(self, x):
        return self.model(x, self.t, self.c)


def test_criterion_2_gradient_fidelity(report):
    states = colliding_states(20, 11)
    worst_col, coords, h = 0.0, 0, 1e-5
    for st in states:
        x = st.to_vector()
        _, g, cs = col.collision_loss_vector(x)
        for k in np.flatnonzero(np.abs(g) > 1e-8):
            e = np.zeros_like(x)
            e[k] = h
            fd = (col.fixed_set_loss(x + e, cs) - col.fixed_set_loss(x - e, cs)) / (2 * h)
            worst_col = max(worst_col, abs(fd - g[k]) / abs(g[k]))
            coords += 1

    rng = np.random.default_rng(5)
    worst_op = max(gradcheck(fn, [rng.normal(size=s) + (1.0 if n == "layer_norm" and i == 1 else 0.0)
                                  for i, s in enumerate(shapes)])
                   for n, (fn, shapes) in OPS.items())
    d = 8
    mods = [L.Linear(d, 5, rng), L.LayerNorm(d), L.SelfAttention(d, 2, rng), L.EncoderLayer(d, 2, 16, rng),
            L.TransformerEncoder(d, 2, 2, 16, rng)]
    worst_layer = 0.0
    for mod in mods:
        for p in mod.parameters():
            p.data = p.data + rng.normal(0, 0.1, p.shape)
        worst_layer = max(worst_layer, module_gradcheck(mod, rng.normal(size=(2, 3, d)), rng))
    model = D.Denoiser(D.DenoiserConfig(d_model=8, heads=2, layers=1), rng)
    for p in model.parameters():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    composed = _DenoiserAsModule(model, np.array([3, 700]), rng.normal(size=(2, STATE_DIM)))
    worst_comp = module_gradcheck(composed, rng.normal(size=(2, STATE_DIM)), rng, per_param=3)
    ok = max(worst_col, worst_op, worst_layer, worst_comp) < TOL and coords > 0
    report(2, ok, f"collision {worst_col:.2e} over {coords} coords of 20 states; ops {worst_op:.2e}; "
                  f"layers {worst_layer:.2e}; composed denoiser {worst_comp:.2e}")


def test_criterion_3_gmof_analytics(report):
    rho = 5.0
    r2 = rho ** 2
    x = np.linspace(0.0, 50 * r2, 1000)
    f, g = col.gmof(x, rho), col.gmof_grad(x, rho)
    ok = (col.gmof(0.0, rho) == 0.0 and col.gmof(r2, rho) == r2 / 2
          and abs(col.gmof(1e6 * r2, rho) - r2) <= 1e-5 * r2
          and np.all(np.diff(f) > 0) and np.all(g > 0) and np.all(np.diff(g) < 0)
          and np.all(f < r2))
    report(3, bool(ok), f"gmof(0)={col.gmof(0.0, rho)}, gmof(rho^2)={col.gmof(r2, rho)}, "
                        f"gmof(1e6 rho^2)={col.gmof(1e6 * r2, rho):.6f}; increasing value, decreasing slope on 1000 points")


def test_criterion_4_schedule_and_sampler(report):
    s = D.cosine_schedule(1000)
    ab = s.alpha_bar
    sched_ok = bool(np.all(np.diff(ab) < 0) and ab[0] >= 0.999 and ab[-1] <= 1e-3)
    rng = np.random.default_rng(1)
    x0 = np.full((100_000, 1), 0.7)
    var_err = 0.0
    for t in (50, 500, 950):
        xt = D.q_sample(x0, t, rng.standard_normal(x0.shape), s)
        var_err = max(var_err, abs(np.var(xt - np.sqrt(ab[t]) * x0) / (1 - ab[t]) - 1))

    sigma0 = 1.7

    def optimal(x, t):
        return np.sqrt(ab[t]) * sigma0 ** 2 * x / (ab[t] * sigma0 ** 2 + 1 - ab[t])

    out = D.ddim_sample(optimal, np.random.default_rng(2).standard_normal(100_000), s, 1000)
    mean_err, v_err = abs(out.mean()) / sigma0, abs(out.var() / sigma0 ** 2 - 1)

    clean, pen = corpus_arrays(make_records(range(8), SynthConfig()))
    model, norm, _ = D.train_denoiser(clean, pen, s, D.DenoiserConfig(16, 2, 1), D.TrainConfig(2, 4, 1e-3))
    c = norm.encode(pen[0])
    g0 = D.guided_sample(c, model, s, D.GuidanceConfig(lam=0.0, ddim_steps=10), norm, seed=4)
    un = D.unguided_sample(c, model, s, 10, norm, seed=4)
    bit_exact = np.array_equal(g0.x0, un.x0) and g0.state.equals(un.state)
    ok = sched_ok and var_err <= 0.02 and mean_err <= 0.03 and v_err <= 0.03 and bit_exact
    report(4, ok, f"schedule ok={sched_ok}; q_sample variance error {var_err:.4f}; DDIM toy mean {mean_err:.4f} "
                  f"variance {v_err:.4f} (1000 steps); lambda=0 bit-identical={bit_exact}")


# ---------------------------------------------------------------------------
# recorded end-to-end run


@pytest.fixture(scope="module")
def test_split():
    a, b = SPLITS["test"]
    return make_records(range(a, b), cli.synth_config(RunConfig()))


def test_criterion_5_end_to_end_refinement(report, test_split):
    cfg = RunConfig()
    train = provenance("train-diffusion")
    refine = provenance("refine")
    wpath = E2E / "denoiser.weights"
    recorded_cfg = {k[len("config."):]: v for k, v in train.items() if k.startswith("config.")}
    default_cfg = dict(line.split(" = ", 1) for line in cfg.dumps().splitlines())
    io_free = {k: v for k, v in recorded_cfg.items() if not k.startswith("io.")}
    assert io_free == {k: v for k, v in default_cfg.items() if not k.startswith("io.")}
    assert cli.sha256_file(wpath) == train["output denoiser.weights"]
    wall = float(train["train_wall_seconds"])

    text = dumps_corpus(test_split, cli.synth_config(cfg).digest())
    assert sha256_text(text) == refine["input test.corpus"]
    refined, lines = cli.refine_records(test_split, cli.make_refiner(cfg, wpath), cfg["diffusion.seed"])
    assert sha256_text(dumps_corpus(refined, "refined")) == refine["output refined.corpus"]
    assert sha256_text("\n".join(lines) + "\n") == refine["output refine_log.txt"]

    ccfg = cli.collision_config(cfg)
    cond = cli.evaluate_pairs([(r.penetrated, r.clean) for r in test_split], cfg.tess, ccfg)
    out = cli.evaluate_pairs([(o.penetrated, r.clean) for o, r in zip(refined, test_split)], cfg.tess, ccfg)
    assert cond.as_keyvalue() == (E2E / "metrics_condition.kv").read_text()
    assert out.as_keyvalue() == (E2E / "metrics_refined.kv").read_text()

    ratio = out.penetration_depth_mean / cond.penetration_depth_mean
    ok = ratio <= 0.5 and out.mpjpe <= cond.mpjpe and wall <= 3600 and out.count == 200
    report(5, ok, f"depth {cond.penetration_depth_mean:.4f} -> {out.penetration_depth_mean:.4f} mm "
                  f"(ratio {ratio:.3f}); MPJPE {cond.mpjpe:.4f} -> {out.mpjpe:.4f} mm; "
                  f"training {wall / 60:.1f} min; recorded metrics reproduced exactly")


def test_criterion_6_gate(report, test_split):
    triggered = sum(P.gate(r.penetrated).refine for r in test_split)

    class Unused:
        def predict(self, *a):
            raise AssertionError("denoiser called for a gated-out sample")

    refiner = P.Refiner(Unused(), D.Normalizer.identity(), D.cosine_schedule())
    gated_out = [r.clean for r in test_split if not P.gate(r.clean).refine]
    apart = [TwoHandState.from_vector(np.concatenate([r.clean.to_vector()[:-3], [400.0, 0.0, 0.0]]))
             for r in test_split[:20]]
    passed = 0
    for st in gated_out + apart:
        out, prov = P.refine(st, refiner, seed=1)
        passed += out is st and np.array_equal(out.to_vector(), st.to_vector()) and not prov.refined
    n = len(gated_out) + len(apart)
    ok = triggered == len(test_split) and passed == n and len(gated_out) > 0
    report(6, ok, f"trigger rate {triggered}/{len(test_split)}; bit-exact pass-through {passed}/{n} "
                  f"({len(gated_out)} clean states, {len(apart)} separated)")


# ---------------------------------------------------------------------------


def test_criterion_7_metric_unit_values(report):
    rng = np.random.default_rng(7)
    gt = rng.normal(0, 40, (21, 3))
    pred = gt.copy()
    pred[4] += [0.0, 0.0, 3.0]
    e = np.zeros((21, 3))
    e[2] = [3.0, 4.0, 12.0]
    xy, z = M.xy_z_split(e, np.zeros((21, 3)))
    units = (M.mpjpe(gt, gt) == 0.0 and M.pa_mpjpe(gt, gt) == 0.0
             and abs(M.mpjpe(pred, gt) - 3 / 21) <= 1e-12
             and M.mrrpe([0, 0, 0], [3, 4, 0], [0, 0, 0], [0, 0, 0]) == 5.0
             and abs(xy - 5 / 21) <= 1e-12 and abs(z - 12 / 21) <= 1e-12)
    violations = 0
    for k in range(1000):
        g = rng.normal(0, 40, (21, 3))
        p = g + rng.normal(0, 5, (21, 3)) if k % 2 else rng.normal(0, 40, (21, 3))
        violations += M.pa_mpjpe(p, g) > M.mpjpe(p, g)
    from scipy.spatial.transform import Rotation
    inv = 0.0
    for k in range(20):
        g = rng.normal(0, 40, (21, 3))
        p = g + rng.normal(0, 4, (21, 3))
        R = Rotation.random(random_state=k).as_matrix()
        moved = rng.uniform(0.3, 3.0) * p @ R.T + rng.normal(0, 50, 3)
        inv = max(inv, abs(M.pa_mpjpe(moved, g) - M.pa_mpjpe(p, g)))
    ok = units and violations == 0 and inv <= 1e-9
    report(7, ok, f"unit values ok={units}; pa<=mpjpe violations {violations}/1000; similarity drift {inv:.1e}")


def test_criterion_8_fusion(report):
    rng = np.random.default_rng(8)
    cfg = F.FusionConfig()
    proj = L.Linear(cfg.d_p, cfg.d, rng)
    a, b, c = (rng.normal(size=(2, cfg.l_p, cfg.d_p)) for _ in range(3))
    ref = F.fuse_priors(a, b, c, proj).data
    perm = all(np.array_equal(F.fuse_priors(*p, proj).data, ref)
               for p in [(a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)])
    lengths = []
    for _ in range(10):
        l, d, dp = (int(v) for v in rng.integers([1, 4, 2], [60, 24, 24]))
        lp = int(rng.choice([1, 4, 16, 64]))
        fcfg = F.FusionConfig(l=l, d=2 * d, l_p=lp, d_p=dp, heads=2, fusion_layers=1)
        net = F.Fusion(fcfg, rng)
        B = int(rng.integers(1, 4))
        _, out = net(rng.normal(size=(B, l, 2 * d)), *(rng.normal(size=(B, lp, dp)) for _ in range(3)))
        lengths.append(out.shape == (B, l, 2 * d))

    recs = make_records(range(100), SynthConfig())
    grids = np.stack([F.prior_rasters(r.clean, cfg) for r in recs])
    teacher, student, _ = F.train_student(grids, cfg, steps=2000, batch=8, lr=1e-3, seed=0, teacher_seed=1234)
    targets = teacher.bundle(grids)
    first = float(F.distill_loss(grids, targets, F.student(cfg, 0)).data)
    last = float(F.distill_loss(grids, targets, student).data)
    ok = perm and all(lengths) and last < 0.1 * first
    report(8, ok, f"permutation exact={perm}; output length l in {sum(lengths)}/10 configs; "
                  f"distillation {first:.4f} -> {last:.4f} ({100 * last / first:.2f}% of initial)")


# ---------------------------------------------------------------------------


def test_criterion_9_determinism(report, tmp_path):
    tiny = ["--synth.n_train", 24, "--synth.n_val", 2, "--synth.n_test", 3, "--train.steps", 100,
            "--train.batch", 8, "--diffusion.ddim_steps", 10]

    def run(out, *extra):
        for cmd in ("synth", "train-diffusion", "refine"):
            assert cli.main([str(a) for a in (cmd, "--out", out, *tiny, *extra)]) == 0

    def blobs(out):
        names = ["corpus/train.corpus", "corpus/val.corpus", "corpus/test.corpus", "denoiser.weights",
                 "diffusion_loss.txt", "refined.corpus", "refine_log.txt"]
        return {n: (out / n).read_bytes() for n in names}

    run(tmp_path / "a")
    run(tmp_path / "b")
    run(tmp_path / "c", "--jobs", 4)
    a, b, c = blobs(tmp_path / "a"), blobs(tmp_path / "b"), blobs(tmp_path / "c")
    same_rerun = [n for n in a if a[n] != b[n]]
    same_jobs = [n for n in a if a[n] != c[n]]
    report(9, not same_rerun and not same_jobs,
           f"rerun differences {same_rerun or 'none'}; --jobs 4 vs 1 differences {same_jobs or 'none'} "
           f"over {len(a)} files")
