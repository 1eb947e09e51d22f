"""Security analysis pipeline for agent skill packages."""

__version__ = "0.1.0"
