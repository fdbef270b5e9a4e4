"""Coupled self-exciting event model with a gated latent response state."""
from importlib.resources import files

__version__ = "0.1.0"


def toy_path(name: str) -> str:
    """Path of a bundled toy CSV (``toy_counts.csv``, ``toy_counts_low.csv``, ``toy_trends.csv``)."""
    return str(files(__package__) / "data" / name)
