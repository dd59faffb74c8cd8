"""attrdet: object detection with color and material attribute recognition."""

__version__ = "0.1.0"
