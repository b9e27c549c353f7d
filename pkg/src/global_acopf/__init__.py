"""Global solver for the lifted, penalized AC optimal power flow problem."""

__version__ = "0.1.0"
