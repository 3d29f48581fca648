"""Novel view synthesis by predicted appearance flow."""

__version__ = "0.1.0"
