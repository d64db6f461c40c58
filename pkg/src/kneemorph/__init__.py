"""Knee cartilage morphometrics: standardization, template learning and
diffeomorphic registration, and mesh-based shape and lesion metrics."""

__version__ = "0.1.0"
