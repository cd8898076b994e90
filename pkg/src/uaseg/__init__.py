"""Uncertainty-aware co-training for 2D semantic segmentation.

Two small encoder-decoder networks are trained jointly on disjoint labeled
subsets plus shared unlabeled images. Monte-Carlo-dropout entropy maps
re-weight the supervised and agreement losses, and adversarial examples
(FGSM on labeled, VAT on unlabeled data) drive a diversity term that keeps
the two models from collapsing onto one decision boundary.
"""

__version__ = "0.1.0"
