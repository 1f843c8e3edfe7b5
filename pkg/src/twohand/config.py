"""Key-value run configuration.

Text format: one ``key = value`` per line, ``#`` starts a comment.  Every key
has a declared type and default; unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: object
    help: str
    choices: tuple = ()


KEYS = [
    Key("mesh.capsule_u", int, 8, "capsule segments around the bone axis"),
    Key("mesh.capsule_v", int, 6, "capsule rings along the bone axis"),
    Key("render.resolution", int, 64, "raster side in pixels"),
    Key("render.fit_margin", float, 0.9, "fraction of the window filled by the two-hand box"),
    Key("collision.d_threshold_mm", float, 4.0, "pair distance threshold (mm)"),
    Key("collision.cos_theta_threshold", float, -0.5, "pair normal cosine threshold"),
    Key("collision.rho_mm", float, 5.0, "GMoF scale (mm)"),
    Key("collision.gmof_form", str, "standard", "GMoF variant", ("standard", "as_printed")),
    Key("synth.seed", int, 7, "corpus seed"),
    Key("synth.n_train", int, 5000, "training records"),
    Key("synth.n_val", int, 500, "validation records"),
    Key("synth.n_test", int, 200, "test records"),
    Key("synth.pose_sigma", float, 0.08, "penetration noise on pose (rad)"),
    Key("synth.trans_sigma", float, 3.0, "penetration noise on relative translation (mm)"),
    Key("synth.jitter_scale", float, 1.0, "multiplier on the scenario jitter bounds"),
    Key("diffusion.T", int, 1000, "noising steps"),
    Key("diffusion.ddim_steps", int, 50, "DDIM steps at inference"),
    Key("diffusion.lambda", float, 1e-6, "guidance step size (normalised units)"),
    Key("diffusion.n_grad_iters", int, 3, "guidance iterations per DDIM step"),
    Key("diffusion.seed", int, 0, "training and sampling seed"),
    Key("diffusion.d_model", int, 128, "denoiser width"),
    Key("diffusion.heads", int, 4, "denoiser attention heads"),
    Key("diffusion.layers", int, 4, "denoiser encoder layers"),
    Key("diffusion.ff_mult", int, 2, "denoiser feed-forward width multiplier"),
    Key("diffusion.cond_skip", int, 1, "add condition embeddings to the matching state tokens", (0, 1)),
    Key("train.steps", int, 4500, "denoiser optimiser steps"),
    Key("train.batch", int, 32, "denoiser batch size"),
    Key("train.lr", float, 5e-4, "denoiser learning rate"),
    Key("train.lr_schedule", str, "cosine", "learning-rate schedule", ("cosine", "constant")),
    Key("train.weight_decay", float, 0.0, "decoupled weight decay"),
    Key("train.log_every", int, 10, "loss curve sampling interval (steps)"),
    Key("fusion.l", int, 49, "image tokens"),
    Key("fusion.d", int, 128, "image token width"),
    Key("fusion.l_p", int, 16, "tokens per prior"),
    Key("fusion.d_p", int, 64, "prior token width"),
    Key("fusion.samples", int, 100, "corpus records rendered for distillation"),
    Key("fusion.steps", int, 2000, "distillation steps"),
    Key("fusion.batch", int, 8, "distillation batch size"),
    Key("fusion.lr", float, 1e-3, "distillation learning rate"),
    Key("fusion.seed", int, 0, "student seed"),
    Key("fusion.teacher_seed", int, 1234, "frozen teacher seed"),
    Key("refine.split", str, "test", "corpus split to refine", ("train", "val", "test")),
    Key("refine.limit", int, 0, "refine only the first N records (0 = all)"),
    Key("io.corpus_dir", str, "", "corpus directory (default <out>/corpus)"),
    Key("io.weights", str, "", "denoiser weights (default <out>/denoiser.weights)"),
    Key("io.refined", str, "", "refined corpus to evaluate (default <out>/refined.corpus)"),
    Key("export.record", int, 0, "corpus record index for export-mesh"),
]
KEY_MAP = {k.name: k for k in KEYS}


def _parse(key: Key, raw) -> object:
    if isinstance(raw, key.type) and not (key.type is int and isinstance(raw, bool)):
        val = raw
    else:
        try:
            val = key.type(str(raw).strip())
        except ValueError:
            raise ConfigError(f"{key.name}: cannot parse {raw!r} as {key.type.__name__}") from None
    if key.choices and val not in key.choices:
        raise ConfigError(f"{key.name}: {val!r} not one of {key.choices}")
    return val


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k.name: k.default for k in KEYS}
        for name, raw in (values or {}).items():
            self.set(name, raw)

    def set(self, name: str, raw) -> None:
        if name not in KEY_MAP:
            raise ConfigError(f"unknown config key {name!r}")
        self.values[name] = _parse(KEY_MAP[name], raw)

    def __getitem__(self, name: str):
        return self.values[name]

    def update_text(self, text: str, source: str = "<text>") -> None:
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'key = value'")
            k, v = line.split("=", 1)
            self.set(k.strip(), v.strip())

    @classmethod
    def load(cls, path) -> "RunConfig":
        cfg = cls()
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise FileNotFoundError(f"config file {path}: {e.strerror}") from e
        cfg.update_text(text, str(path))
        return cfg

    def dumps(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))

    @property
    def tess(self) -> tuple[int, int]:
        return (self["mesh.capsule_u"], self["mesh.capsule_v"])
