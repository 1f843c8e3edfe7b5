"""Two-hand state and its flat 109-value layout.

Layout: ``[left pose 48, left shape 5, right pose 48, right shape 5, relative translation 3]``
with relative translation = right root - left root (mm).  The flat vector does
not carry the absolute left root; decoding places it at ``left_root`` (origin by
default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hand import POSE_DIM, SHAPE_DIM, HandParams, canonicalize_axis_angle

STATE_DIM = 2 * (POSE_DIM + SHAPE_DIM) + 3

LEFT_POSE = slice(0, 48)
LEFT_SHAPE = slice(48, 53)
RIGHT_POSE = slice(53, 101)
RIGHT_SHAPE = slice(101, 106)
REL_TRANS = slice(106, 109)


@dataclass(frozen=True)
class TwoHandState:
    left: HandParams
    right: HandParams

    def __post_init__(self):
        if self.left.chirality != "left" or self.right.chirality != "right":
            raise ValueError("TwoHandState needs a left and a right hand")

    @property
    def relative_translation(self) -> np.ndarray:
        return self.right.root_translation - self.left.root_translation

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.left.pose, self.left.shape,
                               self.right.pose, self.right.shape,
                               self.relative_translation])

    @classmethod
    def from_vector(cls, x, left_root=None, canonical: bool = True) -> "TwoHandState":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (STATE_DIM,):
            raise ValueError(f"expected a {STATE_DIM}-vector, got shape {x.shape}")
        left_root = np.zeros(3) if left_root is None else np.asarray(left_root, dtype=np.float64)
        lp, rp = x[LEFT_POSE], x[RIGHT_POSE]
        if canonical:
            lp, rp = canonicalize_axis_angle(lp), canonicalize_axis_angle(rp)
        left = HandParams("left", lp, x[LEFT_SHAPE], left_root)
        right = HandParams("right", rp, x[RIGHT_SHAPE], left_root + x[REL_TRANS])
        return cls(left, right)

    def translated(self, offset) -> "TwoHandState":
        offset = np.asarray(offset, dtype=np.float64)
        return TwoHandState(self.left.replace(root_translation=self.left.root_translation + offset),
                            self.right.replace(root_translation=self.right.root_translation + offset))

    def equals(self, other: "TwoHandState") -> bool:
        return self.left.equals(other.left) and self.right.equals(other.right)
