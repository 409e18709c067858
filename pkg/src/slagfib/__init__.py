"""Special Lagrangian fibrations on perturbed flat Calabi-Yau models."""

__version__ = "0.1.0"
