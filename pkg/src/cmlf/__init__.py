"""Cross-modal latent filter: visuo-tactile latent state-space model, simulator and probes."""

__version__ = "0.1.0"
