"""Hierarchical spatio-temporal transformer for next-POI recommendation.

Modules: ``numerics`` (tensor engine and autodiff), ``geotime`` (distance and
time-gap matrices), ``dataio`` (loading, windowing, synthetic data),
``model``, ``training``, ``evalkit`` (metrics, baseline, exports),
``formats`` (configs, checkpoints, datasets) and ``cli``.
"""

__version__ = "0.1.0"
