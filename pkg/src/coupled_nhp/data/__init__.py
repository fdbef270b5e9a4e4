"""Bundled toy panels (generated by ``coupled_nhp.toydata``)."""
from pathlib import Path

_HERE = Path(__file__).resolve().parent


def path(name: str) -> Path:
    p = _HERE / name
    if not p.exists():
        raise FileNotFoundError(f"no bundled file {name!r}")
    return p
