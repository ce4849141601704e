"""Domain-adversarial and -conditional state space model with latent-space CEM planning."""

__version__ = "0.1.0"
