"""Two-hand interpenetration detection and collision-guided diffusion refinement."""

__version__ = "0.1.0"
