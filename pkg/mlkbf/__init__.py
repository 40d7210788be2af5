"""mlkbf: multilevel ensemble Kalman-Bucy filters for normalizing constants and parameter estimation."""

__version__ = "0.1.0"
