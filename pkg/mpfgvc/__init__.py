# mpfgvc package
"""Multi-prompt fine-grained visual classification at desk scale."""

__version__ = "0.1.0"
