"""Safe density control for robot swarms on the Fokker-Planck equation."""

__version__ = "0.1.0"
