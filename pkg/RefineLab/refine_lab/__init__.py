"""Self-correcting discrete diffusion for constraint puzzles."""

__version__ = "0.1.0"
