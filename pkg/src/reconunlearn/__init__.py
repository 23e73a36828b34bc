"""Machine unlearning for multi-coil MRI reconstruction at desk scale."""

__version__ = "0.1.0"
