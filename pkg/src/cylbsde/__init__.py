"""BSDEs driven by cylindrical martingales, solved exactly on scenario trees."""

__version__ = "0.1.0"
