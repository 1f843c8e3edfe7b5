"""Inference gate and per-sample refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import collision as col
from .diffusion import GuidanceConfig, Normalizer, NoiseSchedule, guided_sample
from .hand import skin
from .render import fit_camera, rasterize, silhouette_iou
from .state import TwoHandState


@dataclass(frozen=True)
class GateDecision:
    iou: float
    penetration_depth: float
    collision_pairs: int

    @property
    def penetrating(self) -> bool:
        return self.penetration_depth > 0.0

    @property
    def refine(self) -> bool:
        return self.iou > 0.0 and self.penetrating


def gate(state: TwoHandState, tess=(8, 6), resolution: int = 64, fit_margin: float = 0.9,
         ccfg: col.CollisionConfig = col.CollisionConfig()) -> GateDecision:
    """Silhouette overlap in the canonical view plus the 3D penetration test."""
    ml, mr = skin(state.left, *tess), skin(state.right, *tess)
    cam = fit_camera(np.concatenate([ml.vertices, mr.vertices]), resolution, fit_margin)
    iou = silhouette_iou(rasterize(ml, cam)[0], rasterize(mr, cam)[0])
    pairs = len(col.detect_collisions(ml, mr, ccfg))
    return GateDecision(float(iou), col.penetration_depth(ml, mr), pairs)


@dataclass
class Provenance:
    decision: GateDecision
    refined: bool
    seed: int
    ddim_steps: int = 0
    step_losses: list = field(default_factory=list)
    skipped: int = 0

    def lines(self, record_id) -> list[str]:
        d = self.decision
        out = [f"record {record_id} iou={d.iou!r} penetration_mm={d.penetration_depth!r} "
               f"pairs={d.collision_pairs} refine={int(d.refine)} seed={self.seed} "
               f"ddim_steps={self.ddim_steps} skipped={self.skipped}"]
        for t, losses in self.step_losses:
            out.append(f"  t={t} collision_loss=" + ",".join(repr(float(v)) for v in losses))
        return out


@dataclass(frozen=True)
class Refiner:
    denoiser: object
    normalizer: Normalizer
    schedule: NoiseSchedule
    guidance: GuidanceConfig = GuidanceConfig()
    ccfg: col.CollisionConfig = col.CollisionConfig()
    tess: tuple = (8, 6)
    resolution: int = 64
    fit_margin: float = 0.9


def refine(state: TwoHandState, refiner: Refiner, seed: int = 0) -> tuple[TwoHandState, Provenance]:
    """Guided diffusion when the gate fires; otherwise the input object unchanged."""
    decision = gate(state, refiner.tess, refiner.resolution, refiner.fit_margin, refiner.ccfg)
    if not decision.refine:
        return state, Provenance(decision, False, seed)
    c = refiner.normalizer.encode(state.to_vector())
    res = guided_sample(c, refiner.denoiser, refiner.schedule, refiner.guidance, refiner.normalizer,
                        refiner.ccfg, refiner.tess, seed=seed, left_root=state.left.root_translation)
    prov = Provenance(decision, True, seed, refiner.guidance.ddim_steps, res.step_losses, res.skipped)
    return res.state, prov
