"""Audio-visual non-intrusive speech quality and intelligibility assessment."""

__version__ = "0.1.0"
