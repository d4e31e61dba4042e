"""Policy-guided offline RL laboratory."""

__version__ = "0.1.0"
