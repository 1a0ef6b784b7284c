"""Vector-field neural surface reconstruction with analytic-scene oracles."""

__version__ = "0.1.0"
