"""Balance-control simulation and CNN-based identification of the controller
parameters of a modular multi-joint posture control model."""

__version__ = "0.1.0"
