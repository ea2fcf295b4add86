"""Software stack of an automated multi-view specimen imaging device.

Simulated two-camera capture of sinking specimens, detection and cropping,
per-image classification with specimen-level decision rules, the repeated
split evaluation protocol and silhouette-area biomass regression.
"""

__version__ = "0.1.0"
