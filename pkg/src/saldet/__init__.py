"""Saliency-guided defect detection: saliency maps, region proposals,
enhancement, detection post-processing and evaluation."""
from __future__ import annotations

__version__ = "0.1.0"
