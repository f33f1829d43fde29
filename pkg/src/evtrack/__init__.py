"""Event-camera pupil tracking: event binning, CNN + recurrent regressors, LRP explanations."""

__version__ = "0.1.0"
