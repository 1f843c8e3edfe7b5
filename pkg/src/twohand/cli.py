"""Command-line entry point: twohand <command> [options].

Every config key is accepted three ways: in a ``--config`` file, as
``--set key=value``, or as its own ``--key value`` flag (later sources win in
that order).  Errors end the process with one line on stderr of the form
``error=<code> <message>`` and exit status 2 (config), 3 (I/O) or 4 (numerical).
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .collision import CollisionConfig, state_penetration_depth
from .config import KEYS, ConfigError, RunConfig
from .diffusion import (DenoiserConfig, GuidanceConfig, NumericalError, TrainConfig, cosine_schedule,
                        denoiser_from_state, denoiser_state, train_denoiser)
from .hand import skin, write_obj
from .metrics import MetricReport, aggregate, sample_metrics
from .nn.weights import WeightsError, load_weights, save_weights
from .synth import CorpusError, CorpusRecord, SynthConfig, SynthError, corpus_arrays, make_records, \
    read_corpus, write_corpus

log = logging.getLogger("twohand")

COMMANDS = ("synth", "train-diffusion", "train-fusion", "refine", "eval", "export-mesh", "selftest")
SEED_KEY = {"synth": "synth.seed", "train-diffusion": "diffusion.seed", "refine": "diffusion.seed",
            "train-fusion": "fusion.seed"}
SPLIT_NAMES = ("train", "val", "test")


class IOFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_provenance(out: Path, command: str, cfg: RunConfig, inputs, outputs, extra=()) -> Path:
    lines = [f"command = {command}", f"version = {__version__}", f"git = {git_describe()}", *extra]
    lines += [f"config.{line}" for line in cfg.dumps().splitlines()]
    for tag, paths in (("input", inputs), ("output", outputs)):
        for p in sorted(paths, key=str):
            lines.append(f"{tag} {Path(p).name} sha256={sha256_file(p)}")
    path = out / f"provenance-{command}.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def corpus_dir(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg["io.corpus_dir"]) if cfg["io.corpus_dir"] else out / "corpus"


def weights_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg["io.weights"]) if cfg["io.weights"] else out / "denoiser.weights"


def refined_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg["io.refined"]) if cfg["io.refined"] else out / "refined.corpus"


def collision_config(cfg: RunConfig) -> CollisionConfig:
    return CollisionConfig(cfg["collision.d_threshold_mm"], cfg["collision.cos_theta_threshold"],
                           cfg["collision.rho_mm"], cfg["collision.gmof_form"])


def synth_config(cfg: RunConfig) -> SynthConfig:
    return SynthConfig(cfg["synth.seed"], cfg["synth.pose_sigma"], cfg["synth.trans_sigma"],
                       cfg["synth.jitter_scale"], cfg.tess)


def split_ranges(cfg: RunConfig) -> dict[str, tuple[int, int]]:
    a = cfg["synth.n_train"]
    b = a + cfg["synth.n_val"]
    return {"train": (0, a), "val": (a, b), "test": (b, b + cfg["synth.n_test"])}


def write_curve(path: Path, curve) -> None:
    path.write_text("".join(f"{s} {loss!r}\n" for s, loss in curve))


_WORK = None


def _run_index(i):
    fn, items = _WORK
    return fn(items[i])


def _pool_map(fn, items, jobs: int):
    """Map in input order; forked workers inherit ``fn`` so closures are fine."""
    global _WORK
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    from multiprocessing import get_context
    _WORK = (fn, items)
    try:
        with get_context("fork").Pool(jobs) as pool:
            return pool.map(_run_index, range(len(items)), chunksize=1)
    finally:
        _WORK = None


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: Path, jobs: int) -> list[Path]:
    scfg = synth_config(cfg)
    cdir = out / "corpus"
    cdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, (a, b) in split_ranges(cfg).items():
        recs = make_records(range(a, b), scfg, jobs)
        path = cdir / f"{name}.corpus"
        write_corpus(recs, path, scfg.digest())
        outputs.append(path)
        log.info("%s: %d records", name, len(recs))
    write_provenance(out, "synth", cfg, [], outputs)
    return outputs


def cmd_train_diffusion(cfg: RunConfig, out: Path, jobs: int) -> list[Path]:
    src = _require(corpus_dir(cfg, out) / "train.corpus", "training corpus")
    clean, cond = corpus_arrays(read_corpus(src))
    schedule = cosine_schedule(cfg["diffusion.T"])
    mcfg = DenoiserConfig(cfg["diffusion.d_model"], cfg["diffusion.heads"], cfg["diffusion.layers"],
                          cfg["diffusion.ff_mult"], bool(cfg["diffusion.cond_skip"]))
    tcfg = TrainConfig(cfg["train.steps"], cfg["train.batch"], cfg["train.lr"], cfg["train.weight_decay"],
                       cfg["diffusion.seed"], cfg["train.log_every"], cfg["train.lr_schedule"])
    t0 = time.perf_counter()
    model, norm, curve = train_denoiser(clean, cond, schedule, mcfg, tcfg,
                                        lambda s, l: log.info("step %d loss %.6f", s, l))
    wall = time.perf_counter() - t0
    wpath = out / "denoiser.weights"
    save_weights(wpath, denoiser_state(model, norm))
    cpath = out / "diffusion_loss.txt"
    write_curve(cpath, curve)
    write_provenance(out, "train-diffusion", cfg, [src], [wpath, cpath], [f"train_wall_seconds = {wall:.1f}"])
    return [wpath, cpath]


def cmd_train_fusion(cfg: RunConfig, out: Path, jobs: int) -> list[Path]:
    from .fusion import FusionConfig, prior_rasters, train_student

    src = _require(corpus_dir(cfg, out) / "train.corpus", "training corpus")
    recs = read_corpus(src)[:cfg["fusion.samples"]]
    fcfg = FusionConfig(cfg["fusion.l"], cfg["fusion.d"], cfg["fusion.l_p"], cfg["fusion.d_p"],
                        resolution=cfg["render.resolution"])
    grids = np.stack(_pool_map(lambda r: prior_rasters(r.clean, fcfg, cfg.tess), recs, jobs)) if recs else \
        np.zeros((0, 3, fcfg.resolution, fcfg.resolution))
    index = out / "fusion_corpus.txt"
    index.write_text("".join(f"{r.id} raster_sha256={hashlib.sha256(g.tobytes()).hexdigest()}\n"
                             for r, g in zip(recs, grids)))
    teacher, student, curve = train_student(grids, fcfg, cfg["fusion.steps"], cfg["fusion.batch"],
                                            cfg["fusion.lr"], cfg["fusion.seed"], cfg["fusion.teacher_seed"],
                                            cfg["train.log_every"])
    tpath, spath, cpath = out / "fusion_teacher.weights", out / "fusion_student.weights", out / "fusion_loss.txt"
    save_weights(tpath, teacher.state_dict())
    save_weights(spath, student.state_dict())
    write_curve(cpath, curve)
    outputs = [index, tpath, spath, cpath]
    write_provenance(out, "train-fusion", cfg, [src], outputs)
    return outputs


def make_refiner(cfg: RunConfig, wpath: Path):
    from .pipeline import Refiner

    model, norm = denoiser_from_state(load_weights(wpath))
    guidance = GuidanceConfig(cfg["diffusion.lambda"], cfg["diffusion.n_grad_iters"], cfg["diffusion.ddim_steps"])
    return Refiner(model, norm, cosine_schedule(cfg["diffusion.T"]), guidance, collision_config(cfg), cfg.tess,
                   cfg["render.resolution"], cfg["render.fit_margin"])


def refine_records(records, refiner, seed: int, jobs: int = 1):
    """(refined records, provenance lines) in input order."""
    from .pipeline import refine

    def one(rec: CorpusRecord):
        state, prov = refine(rec.penetrated, refiner, seed=seed ^ rec.id)
        depth = state_penetration_depth(state, refiner.tess) if prov.refined else rec.depth
        return CorpusRecord(rec.id, rec.scenario, rec.seed, rec.clean, state, depth), prov.lines(rec.id)

    results = _pool_map(one, list(records), jobs)
    return [r for r, _ in results], [line for _, lines in results for line in lines]


def cmd_refine(cfg: RunConfig, out: Path, jobs: int) -> list[Path]:
    src = _require(corpus_dir(cfg, out) / f"{cfg['refine.split']}.corpus", "corpus split")
    wpath = _require(weights_path(cfg, out), "denoiser weights")
    recs = read_corpus(src)
    if cfg["refine.limit"] > 0:
        recs = recs[:cfg["refine.limit"]]
    refined, lines = refine_records(recs, make_refiner(cfg, wpath), cfg["diffusion.seed"], jobs)
    rpath, lpath = out / "refined.corpus", out / "refine_log.txt"
    write_corpus(refined, rpath, "refined")
    lpath.write_text("\n".join(lines) + ("\n" if lines else ""))
    write_provenance(out, "refine", cfg, [src, wpath], [rpath, lpath])
    return [rpath, lpath]


def cmd_eval(cfg: RunConfig, out: Path, jobs: int) -> list[Path]:
    src = _require(corpus_dir(cfg, out) / f"{cfg['refine.split']}.corpus", "corpus split")
    gt_recs = read_corpus(src)
    by_id = {r.id: r for r in gt_recs}
    sources = {"clean": [(r.clean, r.clean) for r in gt_recs]}
    inputs = [src]
    rpath = refined_path(cfg, out)
    if rpath.is_file():
        refined = read_corpus(rpath)
        if any(r.id not in by_id for r in refined):
            raise CorpusError("refined corpus has records missing from the ground-truth split")
        sources["condition"] = [(by_id[r.id].penetrated, by_id[r.id].clean) for r in refined]
        sources["refined"] = [(r.penetrated, by_id[r.id].clean) for r in refined]
        inputs.append(rpath)
    else:
        sources["condition"] = [(r.penetrated, r.clean) for r in gt_recs]
    ccfg = collision_config(cfg)
    outputs = []
    for name, pairs in sources.items():
        report = evaluate_pairs(pairs, cfg.tess, ccfg, jobs)
        t, kv = out / f"metrics_{name}.txt", out / f"metrics_{name}.kv"
        t.write_text(report.as_table())
        kv.write_text(report.as_keyvalue())
        outputs += [t, kv]
    write_provenance(out, "eval", cfg, inputs, outputs)
    return outputs


def evaluate_pairs(pairs, tess, ccfg, jobs: int = 1) -> MetricReport:
    samples = _pool_map(lambda pg: sample_metrics(pg[0], pg[1], tess, ccfg), pairs, jobs)
    return aggregate(samples)


def cmd_export_mesh(cfg: RunConfig, out: Path, jobs: int) -> list[Path]:
    src = _require(corpus_dir(cfg, out) / f"{cfg['refine.split']}.corpus", "corpus split")
    recs = read_corpus(src)
    k = cfg["export.record"]
    if not 0 <= k < len(recs):
        raise ConfigError(f"export.record {k} out of range for {len(recs)} records")
    rec = recs[k]
    states = {"clean": rec.clean, "penetrated": rec.penetrated}
    rpath = refined_path(cfg, out)
    inputs = [src]
    if rpath.is_file():
        match = [r for r in read_corpus(rpath) if r.id == rec.id]
        if match:
            states["refined"] = match[0].penetrated
            inputs.append(rpath)
    mdir = out / "meshes"
    mdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, st in states.items():
        for side in ("left", "right"):
            p = mdir / f"record{rec.id}_{name}_{side}.obj"
            write_obj(skin(getattr(st, side), *cfg.tess), p)
            outputs.append(p)
    write_provenance(out, "export-mesh", cfg, inputs, outputs)
    return outputs


def cmd_selftest(cfg: RunConfig, out: Path, jobs: int) -> list[Path]:
    from .selftest import run_selftest

    lines, ok = run_selftest()
    path = out / "selftest.txt"
    path.write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    if not ok:
        raise NumericalError("selftest failed")
    return [path]


HANDLERS = {"synth": cmd_synth, "train-diffusion": cmd_train_diffusion, "train-fusion": cmd_train_fusion,
            "refine": cmd_refine, "eval": cmd_eval, "export-mesh": cmd_export_mesh, "selftest": cmd_selftest}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twohand", description="Two-hand interpenetration refinement engine.")
    ap.add_argument("--version", action="version", version=f"twohand {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__doc__ or name,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", type=Path, help="key-value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", type=Path, default=Path("run"), help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (results match --jobs 1)")
        if name in SEED_KEY:
            p.add_argument("--seed", type=int, help=f"shorthand for --{SEED_KEY[name]}")
        keys = p.add_argument_group("config keys")
        for k in KEYS:
            keys.add_argument(f"--{k.name}", dest=f"key:{k.name}", metavar=k.type.__name__.upper(),
                              help=f"{k.help} (default {k.default})")
    return ap


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    for k in KEYS:
        v = getattr(args, f"key:{k.name}")
        if v is not None:
            cfg.set(k.name, v)
    if getattr(args, "seed", None) is not None:
        cfg.set(SEED_KEY[args.command], args.seed)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    return cfg


def _fail(code: str, status: int, msg: str) -> int:
    print(f"error={code} {' '.join(str(msg).split())}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) if e.code in (0, None) else 2
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, args.out, args.jobs)
    except ConfigError as e:
        return _fail("config", 2, e)
    except (OSError, CorpusError, WeightsError, IOFailure) as e:
        return _fail("io", 3, e)
    except (NumericalError, SynthError, FloatingPointError) as e:
        return _fail("numerical", 4, e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
