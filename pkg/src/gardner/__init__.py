"""Gardner volume of the spherical perceptron: replica theory and Monte Carlo checks."""

__version__ = "0.1.0"
