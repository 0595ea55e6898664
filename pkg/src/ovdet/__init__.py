"""Open-vocabulary object detection with frozen text prototypes."""

__version__ = "0.1.0"
