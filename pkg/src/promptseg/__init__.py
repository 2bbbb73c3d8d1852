"""Prompt-conditioned diffusion segmentation: domain generalization via
prompt randomization and test-time adaptation via scene-prompt tuning."""

__version__ = "0.1.0"
