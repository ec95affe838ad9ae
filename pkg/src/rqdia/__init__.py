"""Q-value distribution regularisation with augmented pixels, on SAC and C51 agents."""

__version__ = "0.1.0"
