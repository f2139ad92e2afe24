"""Unseen-modality interaction: projection into a shared token space, feature
alignment, dual-branch prediction with pseudo-supervision, a synthetic
benchmark and a training harness, on a small numpy autodiff core."""

__version__ = "0.1.0"
