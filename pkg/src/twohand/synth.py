"""Synthetic interacting two-hand corpus.

Clean states come from five hand-authored scenario templates plus bounded
jitter, rejection-sampled until the hands do not interpenetrate.  Penetrated
counterparts are made by adding Gaussian noise to a fresh copy of the clean
state until the penetration test fires.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .collision import state_penetration_depth
from .hand import SHAPE_RANGE, HandParams, canonicalize_axis_angle
from .state import LEFT_POSE, REL_TRANS, RIGHT_POSE, STATE_DIM, TwoHandState

SCENARIOS = ("clasp", "cross", "pinch", "prayer", "free")
FLEXION_RANGE = (-0.2, 1.8)
CORPUS_VERSION = 1
SPLITS = {"train": (0, 5000), "val": (5000, 5500), "test": (5500, 5700)}


class SynthError(RuntimeError):
    pass


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenario templates


@dataclass(frozen=True)
class Scenario:
    name: str
    state: TwoHandState
    jitter_finger: float  # rad, per axis-angle component of joints 1..15
    jitter_wrist: float  # rad, per component of joint 0
    jitter_trans: float  # mm, per component of the relative translation
    jitter_shape: float  # relative, per shape multiplier (shared by both hands)


_TEMPLATE_KEYS = ("left.pose", "left.shape", "right.pose", "right.shape", "rel_trans",
                  "jitter.finger", "jitter.wrist", "jitter.trans", "jitter.shape")


def format_scenario(sc: Scenario) -> str:
    x = sc.state.to_vector()
    rows = [f"# two-hand scenario template: {sc.name}", f"name = {sc.name}"]
    vals = {"left.pose": x[LEFT_POSE], "left.shape": sc.state.left.shape,
            "right.pose": x[RIGHT_POSE], "right.shape": sc.state.right.shape, "rel_trans": x[REL_TRANS],
            "jitter.finger": [sc.jitter_finger], "jitter.wrist": [sc.jitter_wrist],
            "jitter.trans": [sc.jitter_trans], "jitter.shape": [sc.jitter_shape]}
    for k in _TEMPLATE_KEYS:
        rows.append(f"{k} = " + " ".join(f"{float(v):.17g}" for v in vals[k]))
    return "\n".join(rows) + "\n"


def parse_scenario(text: str) -> Scenario:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        kv[k.strip()] = v.strip()
    missing = [k for k in ("name",) + _TEMPLATE_KEYS if k not in kv]
    if missing:
        raise ValueError(f"scenario template missing keys: {missing}")
    num = {k: np.array([float(t) for t in kv[k].split()]) for k in _TEMPLATE_KEYS}
    left = HandParams("left", num["left.pose"], num["left.shape"], np.zeros(3))
    right = HandParams("right", num["right.pose"], num["right.shape"], num["rel_trans"])
    return Scenario(kv["name"], TwoHandState(left, right), float(num["jitter.finger"][0]),
                    float(num["jitter.wrist"][0]), float(num["jitter.trans"][0]), float(num["jitter.shape"][0]))


@lru_cache(maxsize=None)
def scenario_text(name: str) -> str:
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; expected one of {SCENARIOS}")
    return resources.files("twohand").joinpath("scenarios", f"{name}.txt").read_text()


def load_scenario(name: str) -> Scenario:
    return parse_scenario(scenario_text(name))


# ---------------------------------------------------------------------------
# sampling


def _jitter_pose(pose: np.ndarray, rng, finger: float, wrist: float) -> np.ndarray:
    p = pose.reshape(16, 3).copy()
    p[0] += rng.uniform(-wrist, wrist, 3)
    p[1:] += rng.uniform(-finger, finger, (15, 3))
    p[1:, 0] = np.clip(p[1:, 0], *FLEXION_RANGE)
    return canonicalize_axis_angle(p.reshape(-1))


def jittered_state(sc: Scenario, rng: np.random.Generator, scale: float = 1.0) -> TwoHandState:
    """One draw of template + bounded uniform jitter (no penetration check)."""
    st = sc.state
    lp = _jitter_pose(st.left.pose, rng, scale * sc.jitter_finger, scale * sc.jitter_wrist)
    rp = _jitter_pose(st.right.pose, rng, scale * sc.jitter_finger, scale * sc.jitter_wrist)
    k = 1.0 + rng.uniform(-1.0, 1.0, 5) * scale * sc.jitter_shape
    ls = np.clip(st.left.shape * k, *SHAPE_RANGE)
    rs = np.clip(st.right.shape * k, *SHAPE_RANGE)
    rel = st.relative_translation + rng.uniform(-1.0, 1.0, 3) * scale * sc.jitter_trans
    return TwoHandState(HandParams("left", lp, ls, np.zeros(3)), HandParams("right", rp, rs, rel))


def sample_clean_pose(rng: np.random.Generator, scenario: str, jitter_scale: float = 1.0,
                      tess=None, max_tries: int = 100) -> TwoHandState:
    sc = load_scenario(scenario)
    for _ in range(max_tries):
        st = jittered_state(sc, rng, jitter_scale)
        if state_penetration_depth(st, tess) == 0.0:
            return st
    raise SynthError(f"scenario {scenario!r}: no penetration-free sample in {max_tries} tries")


@dataclass(frozen=True)
class NoiseScale:
    pose: float = 0.08  # rad
    trans: float = 3.0  # mm


def perturb_until_penetration(clean: TwoHandState, rng: np.random.Generator,
                              sigma: NoiseScale = NoiseScale(), tess=None,
                              max_tries: int = 200) -> tuple[TwoHandState, float, int]:
    """Returns (penetrated state, its depth, attempts used)."""
    x0 = clean.to_vector()
    root = clean.left.root_translation
    for attempt in range(1, max_tries + 1):
        x = x0.copy()
        x[LEFT_POSE] += rng.normal(0.0, 1.0, 48) * sigma.pose
        x[RIGHT_POSE] += rng.normal(0.0, 1.0, 48) * sigma.pose
        x[REL_TRANS] += rng.normal(0.0, 1.0, 3) * sigma.trans
        st = TwoHandState.from_vector(x, left_root=root)
        depth = state_penetration_depth(st, tess)
        if depth > 0.0:
            return st, depth, attempt
    raise SynthError(f"no penetration after {max_tries} noise draws")


# ---------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class CorpusRecord:
    id: int
    scenario: str
    seed: int
    clean: TwoHandState
    penetrated: TwoHandState
    depth: float

    def equals(self, other: "CorpusRecord") -> bool:
        return (self.id == other.id and self.scenario == other.scenario and self.seed == other.seed
                and self.clean.equals(other.clean) and self.penetrated.equals(other.penetrated)
                and self.depth == other.depth)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    pose_sigma: float = 0.08
    trans_sigma: float = 3.0
    jitter_scale: float = 1.0
    tess: tuple = (8, 6)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.seed, self.pose_sigma, self.trans_sigma, self.jitter_scale, tuple(self.tess))).encode())
        for name in SCENARIOS:
            h.update(scenario_text(name).encode())
        return h.hexdigest()[:16]


def record_seed(corpus_seed: int, index: int) -> int:
    return int(corpus_seed) ^ int(index)


def make_record(index: int, cfg: SynthConfig) -> CorpusRecord:
    seed = record_seed(cfg.seed, index)
    rng = np.random.default_rng(seed)
    scenario = SCENARIOS[index % len(SCENARIOS)]
    clean = sample_clean_pose(rng, scenario, cfg.jitter_scale, cfg.tess)
    pen, depth, _ = perturb_until_penetration(clean, rng, NoiseScale(cfg.pose_sigma, cfg.trans_sigma), cfg.tess)
    return CorpusRecord(index, scenario, seed, clean, pen, depth)


def _make_record_args(args):
    return make_record(*args)


def make_records(indices, cfg: SynthConfig, jobs: int = 1) -> list[CorpusRecord]:
    """Records in index order; the worker count does not change the result."""
    indices = list(indices)
    if jobs <= 1 or len(indices) < 2:
        return [make_record(i, cfg) for i in indices]
    from multiprocessing import get_context
    with get_context("fork").Pool(jobs) as pool:
        return pool.map(_make_record_args, [(i, cfg) for i in indices], chunksize=8)


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def dumps_corpus(records, config_hash: str = "none") -> str:
    lines = [f"twohand-corpus version={CORPUS_VERSION} config={config_hash} records={len(records)}"]
    for r in records:
        vals = np.concatenate([r.clean.to_vector(), r.penetrated.to_vector(), [r.depth]])
        lines.append(f"{r.id} {r.scenario} {r.seed} " + " ".join(_fmt(v) for v in vals))
    body = "\n".join(lines) + "\n"
    return body + "sha256 " + hashlib.sha256(body.encode()).hexdigest() + "\n"


def loads_corpus(text: str) -> tuple[list[CorpusRecord], str]:
    """Parse corpus text; returns (records, config hash)."""
    body, sep, tail = text.rstrip("\n").rpartition("\n")
    if not sep or not tail.startswith("sha256 "):
        raise CorpusError("corpus checksum line missing")
    body += "\n"
    if hashlib.sha256(body.encode()).hexdigest() != tail.split()[1]:
        raise CorpusError("corpus checksum mismatch")
    lines = body.splitlines()
    head = dict(f.split("=", 1) for f in lines[0].split()[1:])
    if not lines[0].startswith("twohand-corpus") or head.get("version") != str(CORPUS_VERSION):
        raise CorpusError(f"unsupported corpus header: {lines[0]!r}")
    records = []
    for line in lines[1:]:
        f = line.split()
        if len(f) != 3 + 2 * STATE_DIM + 1:
            raise CorpusError(f"malformed corpus record with {len(f)} fields")
        v = np.array([float(t) for t in f[3:]])
        clean = TwoHandState.from_vector(v[:STATE_DIM], canonical=False)
        pen = TwoHandState.from_vector(v[STATE_DIM:2 * STATE_DIM], canonical=False)
        records.append(CorpusRecord(int(f[0]), f[1], int(f[2]), clean, pen, float(v[-1])))
    if int(head.get("records", -1)) != len(records):
        raise CorpusError("record count does not match header")
    return records, head.get("config", "none")


def write_corpus(records, path, config_hash: str = "none") -> None:
    Path(path).write_text(dumps_corpus(records, config_hash))


def read_corpus(path) -> list[CorpusRecord]:
    return loads_corpus(Path(path).read_text())[0]


def corpus_arrays(records) -> tuple[np.ndarray, np.ndarray]:
    """(clean, penetrated) as (n, 109) arrays."""
    if not records:
        return np.zeros((0, STATE_DIM)), np.zeros((0, STATE_DIM))
    return (np.stack([r.clean.to_vector() for r in records]),
            np.stack([r.penetrated.to_vector() for r in records]))
