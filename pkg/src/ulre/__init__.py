"""Uncertainty-aware likelihood ratio estimation for pixel-wise
out-of-distribution detection: an evidential binary classifier over dense
feature vectors, trained against synthetic proxy outliers, producing
per-pixel likelihood-ratio score maps.
"""

__version__ = "0.1.0"
