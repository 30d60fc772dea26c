"""riskae: risk estimation for sparse, irregular time series.

A transformer autoencoder with local attention, trained on normalized
consumption series, ranks accounts by reconstruction error and groups
them into fixed-size risk clusters.
"""

__version__ = "0.1.0"
