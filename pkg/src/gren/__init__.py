"""Graph-regularised weakly supervised lesion localisation on synthetic chest-like scenes."""

__version__ = "0.1.0"
