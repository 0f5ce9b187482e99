"""Self-supervised time-series representation learning for forecasting.

Trains a multi-scale causal convolutional encoder by predicting the latent
representation of a window's future segment from the summary of its history
segment, then forecasts with a ridge regression head on the frozen encoder.
"""

__version__ = "0.1.0"
