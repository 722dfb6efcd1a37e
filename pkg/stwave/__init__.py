"""STWave - disentangled spatio-temporal graph attention for traffic flow forecasting."""

__version__ = "0.1.0"
