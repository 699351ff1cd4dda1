"""Partial-label volumetric segmentation with per-class heads conditioned
on fixed text embeddings, masked optimization, continual class extension,
sliding-window inference and phantom-based verification."""

from importlib import resources

__version__ = "0.1.0"


def default_template_path():
    """Path to the shipped 32-class template file."""
    return resources.files("uniseg.data") / "classes32.tmpl"
