"""Semantic stream reasoning over RDF-star streams, with swarm federation and tracking."""

from importlib import resources

__version__ = "0.1.0"


def default_rules(name: str = "sort") -> str:
    """Text of a bundled rule file: ``sort`` or ``deepsort``."""
    return resources.files("thoth").joinpath("data", f"{name}.rules").read_text()
