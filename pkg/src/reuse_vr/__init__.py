"""Sample-reuse variance reduction: outer/sub-solver framework and instantiations."""

__version__ = "0.1.0"
