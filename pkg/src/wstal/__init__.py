"""Weakly-supervised temporal action localization toolkit.

Saliency-partitioned feature refinement, cross-video class memory, and
pseudo-label distillation on top of a numpy autodiff core, with proposal
generation and mAP@IoU evaluation.
"""

__version__ = "0.1.0"
