"""Vision transformer with transferability-weighted attention and adversarial domain adaptation, built on a numpy autodiff engine."""

__version__ = "0.1.0"
