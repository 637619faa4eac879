"""Triple-branch self-supervised sequence encoder training at desk scale."""

__version__ = "0.1.0"
