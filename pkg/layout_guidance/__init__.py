"""Scene-graph layouts steering a guided diffusion sampler"""

__version__ = "0.1.0"
