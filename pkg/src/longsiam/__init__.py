"""Siamese 3D CNN for classifying longitudinal brain MRI pairs as Stable or Decline."""

__version__ = "0.1.0"
