"""Two-stage MR-to-CT registration for ablation guidance, with synthetic phantoms."""

__version__ = "0.1.0"
