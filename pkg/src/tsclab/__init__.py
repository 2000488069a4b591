"""Single-intersection traffic-signal-control lab with rule-based safety for RL controllers."""
__version__ = "0.1.0"
