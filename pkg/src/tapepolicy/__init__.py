"""Record-once/replay-many adjoint tapes for training policies through differentiable simulators."""

__version__ = "0.1.0"
